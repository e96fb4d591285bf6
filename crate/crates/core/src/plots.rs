//! Chart and image rendering for reports: SVG bar/box charts and PNG maps.
//! All outputs are byte-deterministic for fixed inputs.

use std::path::Path;

use ndarray::Array2;

use crate::error::Result;
use crate::image::write_atomic;

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Vertical bar chart. Entries are (label, value).
pub fn bar_chart_svg(title: &str, y_label: &str, entries: &[(String, f64)]) -> String {
    let width = 120 + entries.len() * 90;
    let height = 320;
    let plot_h = 220.0;
    let lo = entries.iter().map(|e| e.1).fold(f64::INFINITY, f64::min).min(0.0);
    let hi = entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    let scale = plot_h / (hi - lo);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    s.push_str(&format!("<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\">{title}</text>\n", width / 2));
    s.push_str(&format!("<text x=\"18\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\" transform=\"rotate(-90 18 {})\" text-anchor=\"middle\">{y_label}</text>\n", 40.0 + plot_h / 2.0, 40.0 + plot_h / 2.0));
    s.push_str(&format!("<line x1=\"70\" y1=\"40\" x2=\"70\" y2=\"{}\" stroke=\"black\"/>\n", 40.0 + plot_h));
    s.push_str(&format!("<line x1=\"70\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n", 40.0 + plot_h, width - 20));
    for (i, (label, value)) in entries.iter().enumerate() {
        let x = 90 + i * 90;
        let bar_h = (value - lo) * scale;
        let y = 40.0 + plot_h - bar_h;
        s.push_str(&format!(
            "<rect x=\"{x}\" y=\"{:.2}\" width=\"60\" height=\"{:.2}\" fill=\"#4878a8\"/>\n",
            y, bar_h
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
            x + 30,
            y - 6.0,
            fmt(*value)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{label}</text>\n",
            x + 30,
            40.0 + plot_h + 18.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Box plot (median, quartiles, whiskers at min/max). Series are
/// (label, samples).
pub fn box_plot_svg(title: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let width = 120 + series.len() * 90;
    let height = 340;
    let plot_h = 240.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, vals) in series {
        for &v in vals {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let pad = 0.08 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let y_of = |v: f64| 40.0 + plot_h - (v - lo) / (hi - lo) * plot_h;
    let quantile = |sorted: &[f64], q: f64| -> f64 {
        let pos = q * (sorted.len() - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 < sorted.len() {
            sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
        } else {
            sorted[i]
        }
    };
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    s.push_str(&format!("<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\">{title}</text>\n", width / 2));
    s.push_str(&format!("<text x=\"18\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\" transform=\"rotate(-90 18 {})\" text-anchor=\"middle\">{y_label}</text>\n", 40.0 + plot_h / 2.0, 40.0 + plot_h / 2.0));
    s.push_str(&format!("<line x1=\"70\" y1=\"40\" x2=\"70\" y2=\"{}\" stroke=\"black\"/>\n", 40.0 + plot_h));
    for (i, (label, vals)) in series.iter().enumerate() {
        let x = 90 + i * 90;
        let cx = x + 30;
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.is_empty() {
            continue;
        }
        let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
        let q1 = quantile(&sorted, 0.25);
        let q2 = quantile(&sorted, 0.5);
        let q3 = quantile(&sorted, 0.75);
        s.push_str(&format!("<line x1=\"{cx}\" y1=\"{:.2}\" x2=\"{cx}\" y2=\"{:.2}\" stroke=\"black\"/>\n", y_of(min), y_of(max)));
        s.push_str(&format!(
            "<rect x=\"{x}\" y=\"{:.2}\" width=\"60\" height=\"{:.2}\" fill=\"#8fb8d8\" stroke=\"black\"/>\n",
            y_of(q3),
            (y_of(q1) - y_of(q3)).max(0.5)
        ));
        s.push_str(&format!("<line x1=\"{x}\" y1=\"{0:.2}\" x2=\"{1}\" y2=\"{0:.2}\" stroke=\"black\" stroke-width=\"2\"/>\n", y_of(q2), x + 60));
        s.push_str(&format!(
            "<text x=\"{cx}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{label}</text>\n",
            40.0 + plot_h + 18.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn diverging_color(v: f64, cap: f64) -> [u8; 3] {
    let t = (v / cap).clamp(-1.0, 1.0);
    if t >= 0.0 {
        // white -> red
        let u = 1.0 - t;
        [255, (255.0 * u) as u8, (255.0 * u) as u8]
    } else {
        // white -> blue
        let u = 1.0 + t;
        [(255.0 * u) as u8, (255.0 * u) as u8, 255]
    }
}

/// Signed map (e.g. relative error) as a blue-white-red PNG; invalid voxels
/// are dark gray. `cap` pins the color range to [-cap, cap].
pub fn error_map_png(values: &Array2<f64>, valid: &Array2<bool>, cap: f64, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in values.indexed_iter() {
        let px = if valid[[y, x]] {
            diverging_color(v, cap)
        } else {
            [60, 60, 60]
        };
        img.put_pixel(x as u32, y as u32, image::Rgb(px));
    }
    encode_png(img, path)
}

/// Grayscale rendering with the range taken from the data.
pub fn grayscale_png(values: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in values.indexed_iter() {
        let g = (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8;
        img.put_pixel(x as u32, y as u32, image::Luma([g]));
    }
    let mut bytes = Vec::new();
    image::DynamicImage::ImageLuma8(img)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| crate::error::Error::Format { path: path.display().to_string(), reason: e.to_string() })?;
    write_atomic(path, &bytes)
}

/// Flat-map analogue of a surface plot: each region painted with the color
/// of its summary value; background dark gray.
pub fn roi_flat_map_png(
    masks: &[(String, Array2<bool>)],
    values: &[f64],
    cap: f64,
    path: &Path,
) -> Result<()> {
    let (h, w) = masks
        .first()
        .map(|(_, m)| m.dim())
        .ok_or_else(|| crate::error::Error::param("masks", "need at least one region"))?;
    let mut img = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([60, 60, 60]));
    for ((_, mask), &v) in masks.iter().zip(values.iter()) {
        let color = diverging_color(v, cap);
        for ((y, x), &inside) in mask.indexed_iter() {
            if inside {
                img.put_pixel(x as u32, y as u32, image::Rgb(color));
            }
        }
    }
    encode_png(img, path)
}

fn encode_png(img: image::RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| crate::error::Error::Format { path: path.display().to_string(), reason: e.to_string() })?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tempdir;

    #[test]
    fn bar_chart_is_deterministic() {
        let entries = vec![("a".to_string(), 21.5), ("b".to_string(), 24.1)];
        let s1 = bar_chart_svg("PSNR", "dB", &entries);
        let s2 = bar_chart_svg("PSNR", "dB", &entries);
        assert_eq!(s1, s2);
        assert!(s1.contains("<svg"));
        assert!(s1.contains("21.50"));
    }

    #[test]
    fn box_plot_handles_degenerate_series() {
        let series = vec![("x".to_string(), vec![1.0, 1.0, 1.0])];
        let s = box_plot_svg("t", "y", &series);
        assert!(s.contains("<rect"));
    }

    #[test]
    fn pngs_written() {
        let dir = tempdir();
        let vals = Array2::from_shape_fn((8, 8), |(y, x)| (y as f64 - x as f64) / 8.0);
        let valid = Array2::from_elem((8, 8), true);
        error_map_png(&vals, &valid, 0.5, &dir.join("err.png")).unwrap();
        assert!(dir.join("err.png").exists());
        let g = Array2::from_shape_fn((8, 8), |(y, _)| y as f32);
        grayscale_png(&g, &dir.join("gray.png")).unwrap();
        let masks = vec![("r".to_string(), Array2::from_elem((8, 8), true))];
        roi_flat_map_png(&masks, &[0.2], 0.5, &dir.join("roi.png")).unwrap();
    }

    #[test]
    fn colors_clip_at_cap() {
        assert_eq!(diverging_color(10.0, 1.0), [255, 0, 0]);
        assert_eq!(diverging_color(-10.0, 1.0), [0, 0, 255]);
        assert_eq!(diverging_color(0.0, 1.0), [255, 255, 255]);
    }
}
