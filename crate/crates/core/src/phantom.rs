//! Synthetic paired functional/anatomical phantoms, low-dose simulation,
//! and dataset persistence.
//!
//! Phantoms stand in for clinical data: a shared elliptical anatomy drives
//! both the activity image and the anatomical prior, region intensities are
//! drawn per modality with a wide activity dynamic range, and a coin flip
//! inserts regions visible in only one modality (the prior-conditioning
//! failure mode).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, gaussian_smooth, ImageVolume};
use crate::rng;

pub const GENERATOR_VERSION: &str = "phantom-v1";
pub const SUPPORTED_SIZES: [usize; 3] = [32, 64, 128];
pub const DEFAULT_COUNTS_PER_UNIT: f64 = 50.0;

/// One co-registered pair plus its region bookkeeping.
#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub pet_clean: ImageVolume,
    pub mr_prior: ImageVolume,
    pub roi_masks: Vec<(String, Array2<bool>)>,
    /// Regions present in one modality only (painted in PET but not MR, or
    /// vice versa).
    pub mismatch_regions: Vec<Array2<bool>>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    fn mask(&self, size: usize) -> Array2<bool> {
        Array2::from_shape_fn((size, size), |(y, x)| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }
}

/// Generate one randomized piecewise-smooth phantom pair.
///
/// The PET image carries hot and cold regions spanning at least a 10x
/// intensity ratio; region boundaries are shared with the prior except for
/// mismatch regions, inserted with probability 1/2.
pub fn generate_phantom_pair(seed: u64, size: usize) -> Result<PhantomPair> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(Error::param("size", format!("supported sizes are {SUPPORTED_SIZES:?}, got {size}")));
    }
    let mut rng = rng::stream(seed, rng::streams::PHANTOM);
    let s = size as f64;

    let body = Ellipse {
        cy: s * (0.5 + rng.random_range(-0.02..0.02)),
        cx: s * (0.5 + rng.random_range(-0.02..0.02)),
        ry: s * rng.random_range(0.40..0.46),
        rx: s * rng.random_range(0.36..0.44),
        angle: rng.random_range(-0.3..0.3),
    };
    let body_mask = body.mask(size);
    let body_area = body_mask.iter().filter(|&&b| b).count().max(1);

    let pet_background = rng.random_range(0.25..0.45);
    let mr_background = rng.random_range(0.35..0.55);

    let mut pet = Array2::<f32>::zeros((size, size));
    let mut mr = Array2::<f32>::zeros((size, size));
    // mild radial falloff keeps the background piecewise smooth, not flat
    for ((y, x), inside) in body_mask.indexed_iter() {
        if *inside {
            let r2 = (((y as f64 + 0.5) - body.cy) / body.ry).powi(2)
                + (((x as f64 + 0.5) - body.cx) / body.rx).powi(2);
            let falloff = 1.0 - 0.15 * r2;
            pet[[y, x]] = (pet_background * falloff) as f32;
            mr[[y, x]] = (mr_background * (1.0 - 0.1 * r2)) as f32;
        }
    }

    let has_mismatch = rng.random_bool(0.5);
    let n_mismatch = if has_mismatch { rng.random_range(1..=2) } else { 0 };

    // (mask, is_mismatch); later regions paint over earlier ones, so masks
    // are kept disjoint as the list grows
    let mut regions: Vec<(Array2<bool>, bool)> = Vec::new();
    let mut covered = Array2::<bool>::from_elem((size, size), false);
    let mut covered_count = 0usize;
    let mut hot_done = false;
    let mut cold_done = false;

    let max_regions = 14;
    for idx in 0..max_regions {
        let coverage = covered_count as f64 / body_area as f64;
        let enough = coverage >= 0.32 && hot_done && cold_done && idx >= n_mismatch + 4;
        if enough {
            break;
        }
        // sample a region ellipse with its center inside the body
        let region = loop {
            let cy = body.cy + rng.random_range(-0.75..0.75) * body.ry;
            let cx = body.cx + rng.random_range(-0.75..0.75) * body.rx;
            if body.contains(cy, cx) {
                break Ellipse {
                    cy,
                    cx,
                    ry: s * rng.random_range(0.06..0.16),
                    rx: s * rng.random_range(0.06..0.16),
                    angle: rng.random_range(-1.5..1.5),
                };
            }
        };
        let mut mask = region.mask(size);
        // clip to the body and paint over earlier regions (later wins), so
        // the emitted masks stay disjoint
        for (idx2, m) in mask.indexed_iter_mut() {
            *m = *m && body_mask[idx2];
        }
        if mask.iter().filter(|&&b| b).count() < 4 {
            continue;
        }
        // mismatch regions stay intact: reject candidates that touch one
        let touches_mismatch = regions
            .iter()
            .any(|(m, is_mismatch)| *is_mismatch && m.indexed_iter().any(|(idx2, &b)| b && mask[idx2]));
        if touches_mismatch {
            continue;
        }
        for (prev, _) in regions.iter_mut() {
            for (idx2, p) in prev.indexed_iter_mut() {
                if mask[idx2] {
                    *p = false;
                }
            }
        }
        regions.retain(|(m, _)| m.iter().any(|&b| b));

        // activity: force at least one hot and one cold region so the
        // dynamic range spans >= 10x
        let pet_level = if !hot_done {
            hot_done = true;
            pet_background * rng.random_range(6.0..12.0)
        } else if !cold_done {
            cold_done = true;
            pet_background * rng.random_range(0.05..0.4)
        } else if rng.random_bool(0.5) {
            pet_background * rng.random_range(1.8..10.0)
        } else {
            pet_background * rng.random_range(0.05..0.6)
        };
        let mr_level = rng.random_range(0.1..1.0);

        let mismatch_kind = if idx < n_mismatch {
            if rng.random_bool(0.5) {
                Some(MismatchKind::PetOnly)
            } else {
                Some(MismatchKind::MrOnly)
            }
        } else {
            None
        };

        for ((y, x), &inside) in mask.indexed_iter() {
            if !inside {
                continue;
            }
            match mismatch_kind {
                // PET-only: activity changes, the prior shows nothing
                Some(MismatchKind::PetOnly) => pet[[y, x]] = pet_level as f32,
                // MR-only: prior structure with background activity
                Some(MismatchKind::MrOnly) => mr[[y, x]] = mr_level as f32,
                None => {
                    pet[[y, x]] = pet_level as f32;
                    mr[[y, x]] = mr_level as f32;
                }
            }
        }
        for (idx2, &inside) in mask.indexed_iter() {
            if inside && !covered[idx2] {
                covered[idx2] = true;
                covered_count += 1;
            }
        }
        regions.push((mask, mismatch_kind.is_some()));
    }
    let roi_masks: Vec<(String, Array2<bool>)> = regions
        .iter()
        .enumerate()
        .map(|(i, (m, _))| (format!("roi_{i:02}"), m.clone()))
        .collect();
    let mismatch_regions: Vec<Array2<bool>> = regions
        .iter()
        .filter(|(_, is_mismatch)| *is_mismatch)
        .map(|(m, _)| m.clone())
        .collect();

    let pair = PhantomPair {
        pet_clean: ImageVolume::from_plane(pet),
        mr_prior: ImageVolume::from_plane(mr),
        roi_masks,
        mismatch_regions,
    };
    debug_assert!(pair.pet_clean.data.iter().all(|&v| v >= 0.0));
    Ok(pair)
}

#[derive(Clone, Copy)]
enum MismatchKind {
    PetOnly,
    MrOnly,
}

/// Poisson thinning in image space: counts ~ Poisson(fraction * cpu * activity),
/// output = counts / (fraction * cpu). Unbiased: E[output] = activity.
pub fn simulate_low_dose(
    pet_clean: ArrayView2<'_, f32>,
    dose_fraction: f64,
    counts_per_unit: f64,
    seed: u64,
) -> Result<Array2<f32>> {
    if !(dose_fraction > 0.0 && dose_fraction <= 1.0) {
        return Err(Error::param("dose_fraction", "must lie in (0, 1]"));
    }
    if !counts_per_unit.is_finite() || counts_per_unit <= 0.0 {
        return Err(Error::param("counts_per_unit", "must be finite and > 0"));
    }
    if pet_clean.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::param("pet_clean", "activity must be finite and >= 0"));
    }
    let mut rng = rng::stream(seed, rng::streams::LOW_DOSE);
    let scale = dose_fraction * counts_per_unit;
    let mut out = Array2::<f32>::zeros(pet_clean.dim());
    for (idx, &activity) in pet_clean.indexed_iter() {
        let lambda = scale * activity as f64;
        if lambda > 0.0 {
            let counts = Poisson::new(lambda).unwrap().sample(&mut rng);
            out[idx] = (counts / scale) as f32;
        }
    }
    Ok(out)
}

/// Optional reconstruction-correlation mimic: small Gaussian post-smoothing.
pub fn post_smooth(noisy: ArrayView2<'_, f32>, sigma: f32) -> Array2<f32> {
    gaussian_smooth(noisy, sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
    fn stream_tag(&self) -> u64 {
        match self {
            Split::Train => 0x7261,
            Split::Val => 0x7661,
            Split::Test => 0x7465,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    /// Path relative to the dataset root.
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub seed: u64,
    pub roi_names: Vec<String>,
    pub mismatch_count: usize,
    pub files: BTreeMap<String, FileRef>,
}

/// Item list of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub dose_fraction: f64,
    pub generator_version: String,
    pub items: Vec<ManifestItem>,
}

/// The on-disk dataset: shared generation parameters plus one manifest per
/// split, persisted as `manifest.toml` under the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub size: usize,
    pub seed: u64,
    pub dose_fraction: f64,
    pub counts_per_unit: f64,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub dose_fraction: f64,
    pub counts_per_unit: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 85,
            n_val: 5,
            n_test: 30,
            size: 64,
            dose_fraction: 0.25,
            counts_per_unit: DEFAULT_COUNTS_PER_UNIT,
            seed: 0,
        }
    }
}

/// Generate and persist a full dataset. Refuses a non-empty output
/// directory unless `force` is set.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path, force: bool) -> Result<Dataset> {
    for (name, n) in [("n_train", spec.n_train), ("n_val", spec.n_val), ("n_test", spec.n_test)] {
        if n < 1 {
            return Err(Error::param(
                match name {
                    "n_train" => "n_train",
                    "n_val" => "n_val",
                    _ => "n_test",
                },
                "must be >= 1",
            ));
        }
    }
    if !SUPPORTED_SIZES.contains(&spec.size) {
        return Err(Error::param("size", format!("supported sizes are {SUPPORTED_SIZES:?}")));
    }
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputDirNotEmpty(out_dir.display().to_string()));
        }
        if non_empty {
            fs::remove_dir_all(out_dir)?;
        }
    }
    fs::create_dir_all(out_dir)?;

    let mut splits = Vec::new();
    for (split, n) in [
        (Split::Train, spec.n_train),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ] {
        let items: Vec<ManifestItem> = (0..n)
            .into_par_iter()
            .map(|i| write_item(spec, out_dir, split, i))
            .collect::<Result<Vec<_>>>()?;
        splits.push(DatasetManifest {
            split,
            dose_fraction: spec.dose_fraction,
            generator_version: GENERATOR_VERSION.to_string(),
            items,
        });
    }
    let dataset = Dataset {
        size: spec.size,
        seed: spec.seed,
        dose_fraction: spec.dose_fraction,
        counts_per_unit: spec.counts_per_unit,
        test: splits.pop().unwrap(),
        val: splits.pop().unwrap(),
        train: splits.pop().unwrap(),
    };
    dataset.save(out_dir)?;
    Ok(dataset)
}

fn write_item(spec: &DatasetSpec, out_dir: &Path, split: Split, index: usize) -> Result<ManifestItem> {
    let item_seed = rng::derive_seed(spec.seed, split.stream_tag(), index as u64);
    let pair = generate_phantom_pair(item_seed, spec.size)?;
    let low = simulate_low_dose(
        pair.pet_clean.plane(0),
        spec.dose_fraction,
        spec.counts_per_unit,
        item_seed,
    )?;

    let id = format!("item_{index:03}");
    let dir = out_dir.join(split.tag());
    fs::create_dir_all(&dir)?;

    let mut files = BTreeMap::new();
    let mut store = |key: &str, vol: &ImageVolume| -> Result<()> {
        let rel = format!("{}/{}.{}.img", split.tag(), id, key);
        vol.write(&out_dir.join(&rel))?;
        let hash = image::file_hash(&out_dir.join(&rel))?;
        files.insert(key.to_string(), FileRef { path: rel, hash });
        Ok(())
    };
    store("pet_clean", &pair.pet_clean)?;
    store("pet_low", &ImageVolume::from_plane(low))?;
    store("mr_prior", &pair.mr_prior)?;
    store("rois", &masks_to_volume(pair.roi_masks.iter().map(|(_, m)| m), spec.size))?;
    store("mismatch", &masks_to_volume(pair.mismatch_regions.iter(), spec.size))?;

    Ok(ManifestItem {
        id,
        seed: item_seed,
        roi_names: pair.roi_masks.iter().map(|(n, _)| n.clone()).collect(),
        mismatch_count: pair.mismatch_regions.len(),
        files,
    })
}

fn masks_to_volume<'a>(masks: impl Iterator<Item = &'a Array2<bool>>, size: usize) -> ImageVolume {
    let masks: Vec<_> = masks.collect();
    let mut data = ndarray::Array3::<f32>::zeros((masks.len(), size, size));
    for (c, mask) in masks.iter().enumerate() {
        for (idx, &b) in mask.indexed_iter() {
            if b {
                data[[c, idx.0, idx.1]] = 1.0;
            }
        }
    }
    ImageVolume::new(data)
}

/// One dataset item loaded back into memory.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub id: String,
    pub seed: u64,
    pub pet_clean: Array2<f32>,
    pub pet_low: Array2<f32>,
    pub mr_prior: Array2<f32>,
    pub roi_masks: Vec<(String, Array2<bool>)>,
    pub mismatch_regions: Vec<Array2<bool>>,
}

impl Dataset {
    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.toml")
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format {
            path: "manifest.toml".into(),
            reason: e.to_string(),
        })?;
        image::write_atomic(&Self::manifest_path(root), text.as_bytes())
    }

    /// Load and validate: file references unique, every referenced file
    /// exists, hashes match.
    pub fn load(root: &Path) -> Result<Self> {
        let path = Self::manifest_path(root);
        if !path.exists() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "manifest not found".into(),
            });
        }
        let text = fs::read_to_string(&path)?;
        let dataset: Dataset = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        dataset.validate(root)?;
        Ok(dataset)
    }

    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen_paths = std::collections::BTreeSet::new();
        for manifest in [&self.train, &self.val, &self.test] {
            for item in &manifest.items {
                for file in item.files.values() {
                    if !seen_paths.insert(file.path.clone()) {
                        return Err(Error::Format {
                            path: file.path.clone(),
                            reason: "file referenced by more than one split item".into(),
                        });
                    }
                    let full = root.join(&file.path);
                    if !full.exists() {
                        return Err(Error::Format {
                            path: file.path.clone(),
                            reason: "referenced file missing".into(),
                        });
                    }
                    let hash = image::file_hash(&full)?;
                    if hash != file.hash {
                        return Err(Error::Format {
                            path: file.path.clone(),
                            reason: format!("hash mismatch: manifest {} vs file {}", file.hash, hash),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn load_items(&self, root: &Path, split: Split) -> Result<Vec<LoadedItem>> {
        self.split(split)
            .items
            .iter()
            .map(|item| {
                let read_plane = |key: &str| -> Result<Array2<f32>> {
                    let vol = ImageVolume::read(&root.join(&item.files[key].path))?;
                    Ok(vol.plane(0).to_owned())
                };
                let rois_vol = ImageVolume::read(&root.join(&item.files["rois"].path))?;
                let mismatch_vol = ImageVolume::read(&root.join(&item.files["mismatch"].path))?;
                let roi_masks = item
                    .roi_names
                    .iter()
                    .enumerate()
                    .map(|(c, name)| (name.clone(), rois_vol.plane(c).mapv(|v| v > 0.5)))
                    .collect();
                let mismatch_regions = (0..mismatch_vol.channels())
                    .map(|c| mismatch_vol.plane(c).mapv(|v| v > 0.5))
                    .collect();
                Ok(LoadedItem {
                    id: item.id.clone(),
                    seed: item.seed,
                    pet_clean: read_plane("pet_clean")?,
                    pet_low: read_plane("pet_low")?,
                    mr_prior: read_plane("mr_prior")?,
                    roi_masks,
                    mismatch_regions,
                })
            })
            .collect()
    }
}
