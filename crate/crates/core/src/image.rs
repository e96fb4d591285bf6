//! Image volumes and the flat binary image format.
//!
//! Layout on disk: a 32-byte header followed by `channels * height * width`
//! little-endian f32 values, one row-major plane per channel.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DDNZIMG1"
//! 8       4     u32 width
//! 12      4     u32 height
//! 16      4     u32 channels
//! 20      4     u32 reserved (zero)
//! 24      4     f32 pixel_size
//! 28      4     f32 intensity_scale
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 8] = b"DDNZIMG1";

/// Intensity unit carried by an in-memory volume. Not part of the file
/// format; loaders default to `Arbitrary`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityUnit {
    /// Activity in arbitrary units (phantom native scale).
    Arbitrary,
    /// Standardized-uptake-value-like calibrated scale.
    SuvLike,
    /// Model domain, nominally [-1, 1].
    Normalized,
}

/// A 2D image or a stack of co-registered 2D planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    /// (channels, height, width)
    pub data: Array3<f32>,
    pub pixel_size: f32,
    pub intensity_scale: f32,
    pub unit: IntensityUnit,
}

impl ImageVolume {
    pub fn new(data: Array3<f32>) -> Self {
        Self { data, pixel_size: 1.0, intensity_scale: 1.0, unit: IntensityUnit::Arbitrary }
    }

    pub fn from_plane(plane: Array2<f32>) -> Self {
        let (h, w) = plane.dim();
        Self::new(plane.into_shape_with_order((1, h, w)).expect("contiguous plane"))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn plane(&self, c: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(ndarray::Axis(0), c)
    }

    /// The center plane of a stack (the slice a 2.5D bundle denoises).
    pub fn center_plane(&self) -> ArrayView2<'_, f32> {
        self.plane(self.channels() / 2)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (c, h, w) = self.data.dim();
        let mut buf = Vec::with_capacity(32 + 4 * c * h * w);
        buf.extend_from_slice(IMAGE_MAGIC);
        buf.extend_from_slice(&(w as u32).to_le_bytes());
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&self.pixel_size.to_le_bytes());
        buf.extend_from_slice(&self.intensity_scale.to_le_bytes());
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path, &buf)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path)?;
        let mut header = [0u8; 32];
        file.read_exact(&mut header).map_err(|_| Error::Format {
            path: path.display().to_string(),
            reason: "truncated header".into(),
        })?;
        if &header[0..8] != IMAGE_MAGIC {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "bad magic".into(),
            });
        }
        let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let pixel_size = f32::from_le_bytes(header[24..28].try_into().unwrap());
        let intensity_scale = f32::from_le_bytes(header[28..32].try_into().unwrap());
        let n = c * h * w;
        let mut raw = vec![0u8; 4 * n];
        file.read_exact(&mut raw).map_err(|_| Error::Format {
            path: path.display().to_string(),
            reason: format!("truncated payload: expected {} f32 values", n),
        })?;
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "trailing bytes after payload".into(),
            });
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let data = Array3::from_shape_vec((c, h, w), values).map_err(|_| Error::Format {
            path: path.display().to_string(),
            reason: "inconsistent dimensions".into(),
        })?;
        Ok(Self { data, pixel_size, intensity_scale, unit: IntensityUnit::Arbitrary })
    }
}

/// Write-temp-then-rename so concurrent readers never observe partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Separable Gaussian blur with a compact kernel (radius = ceil(2 sigma)),
/// reflect padding.
pub fn gaussian_smooth(img: ArrayView2<'_, f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 0.0 {
        return img.to_owned();
    }
    let radius = (2.0 * sigma).ceil() as i64;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = img.dim();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xi = reflect(x as i64 + k as i64 - radius, w);
                acc += kv * img[[y, xi]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yi = reflect(y as i64 + k as i64 - radius, h);
                acc += kv * tmp[[yi, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// FNV-1a 64-bit content hash, hex encoded. Used for manifest integrity.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tempdir;
    use ndarray::Array3;

    #[test]
    fn round_trip_exact() {
        let dir = tempdir();
        let mut img = ImageVolume::new(Array3::from_shape_fn((2, 3, 4), |(c, y, x)| {
            (c * 100 + y * 10 + x) as f32 * 0.25 - 1.5
        }));
        img.pixel_size = 1.17;
        img.intensity_scale = 3.5;
        let path = dir.join("a.img");
        img.write(&path).unwrap();
        let back = ImageVolume::read(&path).unwrap();
        assert_eq!(back.data, img.data);
        assert_eq!(back.pixel_size, img.pixel_size);
        assert_eq!(back.intensity_scale, img.intensity_scale);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempdir();
        let img = ImageVolume::from_plane(Array2::zeros((4, 4)));
        let path = dir.join("b.img");
        img.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(ImageVolume::read(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir();
        let path = dir.join("c.img");
        fs::write(&path, vec![0u8; 64]).unwrap();
        assert!(matches!(ImageVolume::read(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(content_hash(b""), "cbf29ce484222325");
        assert_eq!(content_hash(b"a"), content_hash(b"a"));
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

}
