//! Image quality metrics and paired nonparametric tests.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// PSNR result; zero-MSE pairs are flagged rather than returning infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            Psnr::Identical => None,
        }
    }
}

fn check_shapes(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(&[a.dim().0, a.dim().1], &[b.dim().0, b.dim().1]));
    }
    Ok(())
}

fn mse(img: ArrayView2<f32>, reference: ArrayView2<f32>) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &b) in img.iter().zip(reference.iter()) {
        let d = a as f64 - b as f64;
        acc += d * d;
    }
    acc / img.len() as f64
}

/// Peak signal-to-noise ratio in dB: 20 log10(range) - 10 log10(MSE).
///
/// `data_range` defaults to max(reference) - min(reference).
pub fn psnr(img: ArrayView2<f32>, reference: ArrayView2<f32>, data_range: Option<f64>) -> Result<Psnr> {
    check_shapes(img, reference)?;
    let range = resolve_range(reference, data_range)?;
    let m = mse(img, reference);
    if m == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(20.0 * range.log10() - 10.0 * m.log10()))
}

fn resolve_range(reference: ArrayView2<f32>, data_range: Option<f64>) -> Result<f64> {
    let range = match data_range {
        Some(r) => r,
        None => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in reference.iter() {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
            hi - lo
        }
    };
    if !range.is_finite() || range <= 0.0 {
        return Err(Error::param("data_range", "must be finite and > 0"));
    }
    Ok(range)
}

/// Mean local structural similarity over all fully-valid square windows.
///
/// Uniform (unweighted) windows; local moments use the population
/// normalization. Constants C1 = (k1 range)^2, C2 = (k2 range)^2.
pub fn ssim(
    img: ArrayView2<f32>,
    reference: ArrayView2<f32>,
    window: usize,
    k1: f64,
    k2: f64,
    data_range: Option<f64>,
) -> Result<f64> {
    check_shapes(img, reference)?;
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::param("window", "must be odd and >= 3"));
    }
    let (h, w) = img.dim();
    if h < window || w < window {
        return Err(Error::param("window", format!("image {h}x{w} smaller than window {window}")));
    }
    let range = resolve_range(reference, data_range)?;
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let n = (window * window) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=(h - window) {
        for x0 in 0..=(w - window) {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..window {
                for dx in 0..window {
                    let a = img[[y0 + dy, x0 + dx]] as f64;
                    let b = reference[[y0 + dy, x0 + dx]] as f64;
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let mx = sx / n;
            let my = sy / n;
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cxy = sxy / n - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Standard SSIM parameters: 7x7 window, k1 = 0.01, k2 = 0.03.
pub fn ssim_default(img: ArrayView2<f32>, reference: ArrayView2<f32>, data_range: Option<f64>) -> Result<f64> {
    ssim(img, reference, 7, 0.01, 0.03, data_range)
}

/// Voxelwise relative error (post - normal) / normal with a validity mask.
/// Voxels where |normal| <= floor are flagged invalid and excluded from
/// summaries.
#[derive(Debug, Clone)]
pub struct RelativeErrorMap {
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
}

impl RelativeErrorMap {
    /// Mean |relative error| over valid voxels, optionally restricted to a mask.
    pub fn mean_abs(&self, mask: Option<ArrayView2<bool>>) -> Option<f64> {
        let mut acc = 0.0;
        let mut n = 0usize;
        for ((idx, &v), &ok) in self.values.indexed_iter().zip(self.valid.iter()) {
            let selected = mask.is_none_or(|m| m[idx]);
            if ok && selected {
                acc += v.abs();
                n += 1;
            }
        }
        (n > 0).then(|| acc / n as f64)
    }
}

pub fn relative_error_map(
    post: ArrayView2<f32>,
    normal: ArrayView2<f32>,
    floor: f64,
) -> Result<RelativeErrorMap> {
    check_shapes(post, normal)?;
    if floor < 0.0 {
        return Err(Error::param("floor", "must be >= 0"));
    }
    let mut values = Array2::zeros(post.dim());
    let mut valid = Array2::from_elem(post.dim(), false);
    for (idx, &n) in normal.indexed_iter() {
        if (n as f64).abs() > floor {
            values[idx] = (post[idx] as f64 - n as f64) / n as f64;
            valid[idx] = true;
        }
    }
    Ok(RelativeErrorMap { values, valid })
}

/// Per-ROI PSNR entry. `value` is None when the mask was empty (skipped).
#[derive(Debug, Clone)]
pub struct RoiPsnr {
    pub name: String,
    pub voxels: usize,
    pub value: Option<Psnr>,
}

/// Regional PSNR: the MSE is restricted to each mask, the data range is
/// shared across regions.
pub fn roi_psnr(
    img: ArrayView2<f32>,
    reference: ArrayView2<f32>,
    masks: &[(String, Array2<bool>)],
    data_range: Option<f64>,
) -> Result<Vec<RoiPsnr>> {
    check_shapes(img, reference)?;
    if masks.is_empty() || masks.iter().all(|(_, m)| !m.iter().any(|&b| b)) {
        return Err(Error::param("masks", "need at least one non-empty mask"));
    }
    let range = resolve_range(reference, data_range)?;
    let mut out = Vec::with_capacity(masks.len());
    for (name, mask) in masks {
        if mask.dim() != img.dim() {
            return Err(Error::shape(&[img.dim().0, img.dim().1], &[mask.dim().0, mask.dim().1]));
        }
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for (idx, &inside) in mask.indexed_iter() {
            if inside {
                let d = img[idx] as f64 - reference[idx] as f64;
                acc += d * d;
                n += 1;
            }
        }
        let value = if n == 0 {
            None
        } else if acc == 0.0 {
            Some(Psnr::Identical)
        } else {
            Some(Psnr::Db(20.0 * range.log10() - 10.0 * (acc / n as f64).log10()))
        };
        out.push(RoiPsnr { name: name.clone(), voxels: n, value });
    }
    Ok(out)
}

/// Alternative hypothesis for the paired signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// x shifted above y.
    Greater,
    /// x shifted below y.
    Less,
}

const WILCOXON_EXACT_MAX_N: usize = 25;

/// Paired Wilcoxon signed-rank test p-value.
///
/// Zero differences are dropped; ties in |d| get average ranks. Exact
/// sign-flip distribution for n <= 25 (ties included via doubled ranks),
/// normal approximation with tie correction and continuity correction above.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::param("x/y", "paired samples must have equal length"));
    }
    let mut diffs: Vec<f64> = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::DegenerateData("all paired differences are zero".into()));
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::param("x/y", format!("need >= 5 non-zero differences, got {n}")));
    }
    // rank |d| ascending, average ranks for ties
    diffs.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut tie_sizes: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = avg;
        }
        tie_sizes.push(j + 1 - i);
        i = j + 1;
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(ranks.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    let p = if n <= WILCOXON_EXACT_MAX_N {
        exact_signed_rank_p(&ranks, w_plus, alternative)
    } else {
        normal_signed_rank_p(n, &tie_sizes, w_plus, alternative)
    };
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0))
}

/// Exact distribution of W+ over all 2^n sign assignments via a counting DP
/// on doubled ranks (average ranks are multiples of 1/2).
fn exact_signed_rank_p(ranks: &[f64], w_plus: f64, alternative: Alternative) -> f64 {
    let n = ranks.len();
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max_sum + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=max_sum).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total = 2f64.powi(n as i32);
    let w2 = (2.0 * w_plus).round() as usize;
    let p_ge: f64 = counts[w2..].iter().map(|&c| c as f64).sum::<f64>() / total;
    let p_le: f64 = counts[..=w2].iter().map(|&c| c as f64).sum::<f64>() / total;
    match alternative {
        Alternative::Greater => p_ge,
        Alternative::Less => p_le,
        Alternative::TwoSided => (2.0 * p_ge.min(p_le)).min(1.0),
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_signed_rank_p(n: usize, tie_sizes: &[usize], w_plus: f64, alternative: Alternative) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let sd = var.sqrt();
    let z = |shift: f64| (w_plus - mean + shift) / sd;
    match alternative {
        Alternative::Greater => 1.0 - std_normal_cdf(z(-0.5)),
        Alternative::Less => std_normal_cdf(z(0.5)),
        Alternative::TwoSided => {
            let p_g = 1.0 - std_normal_cdf(z(-0.5));
            let p_l = std_normal_cdf(z(0.5));
            (2.0 * p_g.min(p_l)).min(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn psnr_identical_flag() {
        let a = Array2::<f32>::from_elem((4, 4), 0.3);
        assert_eq!(psnr(a.view(), a.view(), Some(1.0)).unwrap(), Psnr::Identical);
    }

    #[test]
    fn psnr_hand_oracle() {
        // MSE = 0.01, range 1 -> 20 dB
        let img = Array2::<f32>::from_elem((8, 8), 0.1);
        let reference = Array2::<f32>::zeros((8, 8));
        match psnr(img.view(), reference.view(), Some(1.0)).unwrap() {
            Psnr::Db(v) => assert_relative_eq!(v, 20.0, epsilon = 1e-5),
            _ => panic!("expected finite PSNR"),
        }
    }

    #[test]
    fn psnr_scale_invariant() {
        let img = Array2::from_shape_fn((6, 6), |(y, x)| (y * 6 + x) as f32 * 0.01);
        let reference = Array2::from_shape_fn((6, 6), |(y, x)| ((y * 6 + x) % 5) as f32 * 0.1);
        let p1 = psnr(img.view(), reference.view(), Some(2.0)).unwrap().db().unwrap();
        let scaled_img = img.mapv(|v| v * 7.0);
        let scaled_ref = reference.mapv(|v| v * 7.0);
        let p2 = psnr(scaled_img.view(), scaled_ref.view(), Some(14.0)).unwrap().db().unwrap();
        // f32 storage quantizes the scaled pixels slightly
        assert_relative_eq!(p1, p2, epsilon = 1e-4);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let reference = Array2::from_shape_fn((16, 16), |(y, x)| ((y + x) % 7) as f32);
        let mut rng = crate::rng::stream(3, 0);
        let noise: Array2<f32> =
            Array2::from_shape_fn((16, 16), |_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32);
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.05, 0.2, 0.8, 2.0] {
            let img = &reference + &noise.mapv(|v| v * amp);
            let p = psnr(img.view(), reference.view(), None).unwrap().db().unwrap();
            assert!(p < last, "psnr must strictly decrease, {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = Array2::from_shape_fn((12, 12), |(y, x)| (y as f32).sin() + x as f32 * 0.1);
        assert_relative_eq!(ssim_default(a.view(), a.view(), Some(2.0)).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // mx = 0, my = 1, zero variances: C1 / (1 + C1) with C1 = 1e-4
        let img = Array2::<f32>::from_elem((9, 9), 1.0);
        let reference = Array2::<f32>::zeros((9, 9));
        let v = ssim_default(img.view(), reference.view(), Some(1.0)).unwrap();
        let c1 = 1e-4;
        assert_relative_eq!(v, c1 / (1.0 + c1), max_relative = 1e-10);
        assert_relative_eq!(v, 9.999e-5, max_relative = 1e-3);
    }

    #[test]
    fn ssim_symmetric() {
        let a = Array2::from_shape_fn((10, 10), |(y, x)| (y * x) as f32 * 0.02);
        let b = Array2::from_shape_fn((10, 10), |(y, x)| (y + x) as f32 * 0.05);
        let r = 2.0;
        assert_relative_eq!(
            ssim_default(a.view(), b.view(), Some(r)).unwrap(),
            ssim_default(b.view(), a.view(), Some(r)).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ssim_rejects_small_images_and_bad_windows() {
        let a = Array2::<f32>::zeros((5, 5));
        assert!(ssim_default(a.view(), a.view(), Some(1.0)).is_err());
        let b = Array2::<f32>::zeros((9, 9));
        assert!(ssim(b.view(), b.view(), 4, 0.01, 0.03, Some(1.0)).is_err());
        assert!(ssim(b.view(), b.view(), 1, 0.01, 0.03, Some(1.0)).is_err());
    }

    #[test]
    fn relative_error_zero_when_equal() {
        let a = Array2::from_shape_fn((6, 6), |(y, x)| 1.0 + (y + x) as f32);
        let m = relative_error_map(a.view(), a.view(), 0.0).unwrap();
        assert!(m.valid.iter().all(|&v| v));
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_direct_value() {
        let post = Array2::<f32>::from_elem((4, 4), 1.2);
        let normal = Array2::<f32>::from_elem((4, 4), 1.0);
        let m = relative_error_map(post.view(), normal.view(), 0.0).unwrap();
        for &v in m.values.iter() {
            assert_relative_eq!(v, 0.2, max_relative = 1e-6);
        }
    }

    #[test]
    fn relative_error_masks_zero_voxels() {
        let post = Array2::<f32>::from_elem((2, 2), 1.0);
        let mut normal = Array2::<f32>::from_elem((2, 2), 2.0);
        normal[[0, 0]] = 0.0;
        let m = relative_error_map(post.view(), normal.view(), 0.0).unwrap();
        assert!(!m.valid[[0, 0]]);
        assert!(m.valid[[0, 1]]);
        let mean = m.mean_abs(None).unwrap();
        assert_relative_eq!(mean, 0.5, max_relative = 1e-6);
    }

    #[test]
    fn relative_error_invariant_to_joint_rescaling() {
        let post = Array2::from_shape_fn((5, 5), |(y, x)| 1.0 + 0.1 * (y as f32) + 0.05 * x as f32);
        let normal = Array2::from_shape_fn((5, 5), |(y, x)| 1.0 + 0.08 * (y as f32) + 0.06 * x as f32);
        let m1 = relative_error_map(post.view(), normal.view(), 1e-6).unwrap().mean_abs(None).unwrap();
        let post2 = post.mapv(|v| v * 13.0);
        let normal2 = normal.mapv(|v| v * 13.0);
        let m2 = relative_error_map(post2.view(), normal2.view(), 1e-6).unwrap().mean_abs(None).unwrap();
        assert_relative_eq!(m1, m2, max_relative = 1e-6);
    }

    #[test]
    fn roi_psnr_full_mask_equals_global() {
        let img = Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f32 * 0.01);
        let reference = Array2::from_shape_fn((8, 8), |(y, x)| ((y * 8 + x) % 9) as f32 * 0.05);
        let all = vec![("all".to_string(), Array2::from_elem((8, 8), true))];
        let rois = roi_psnr(img.view(), reference.view(), &all, Some(1.0)).unwrap();
        let global = psnr(img.view(), reference.view(), Some(1.0)).unwrap().db().unwrap();
        assert_relative_eq!(rois[0].value.unwrap().db().unwrap(), global, epsilon = 1e-12);
    }

    #[test]
    fn roi_psnr_recombination_identity() {
        // count-weighted recombination of regional MSEs reproduces global MSE
        let img = Array2::from_shape_fn((8, 8), |(y, x)| (y as f32).cos() + 0.3 * x as f32);
        let reference = Array2::from_shape_fn((8, 8), |(y, x)| (x as f32).sin() + 0.2 * y as f32);
        let masks: Vec<(String, Array2<bool>)> = (0..4)
            .map(|q| {
                (
                    format!("q{q}"),
                    Array2::from_shape_fn((8, 8), |(y, x)| (y / 4) * 2 + x / 4 == q),
                )
            })
            .collect();
        let range = 3.0;
        let rois = roi_psnr(img.view(), reference.view(), &masks, Some(range)).unwrap();
        let mut weighted = 0.0;
        let mut total = 0usize;
        for r in &rois {
            let db = r.value.unwrap().db().unwrap();
            let mse_r = 10f64.powf((20.0 * range.log10() - db) / 10.0);
            weighted += mse_r * r.voxels as f64;
            total += r.voxels;
        }
        let global_mse = mse(img.view(), reference.view());
        assert_relative_eq!(weighted / total as f64, global_mse, max_relative = 1e-10);
    }

    #[test]
    fn roi_psnr_identical_region_and_empty_mask() {
        let mut img = Array2::from_shape_fn((6, 6), |(y, x)| (y + x) as f32);
        let reference = img.clone();
        img[[5, 5]] = 99.0;
        let mut one = Array2::from_elem((6, 6), false);
        one[[0, 0]] = true;
        let masks = vec![
            ("one".to_string(), one),
            ("empty".to_string(), Array2::from_elem((6, 6), false)),
        ];
        let rois = roi_psnr(img.view(), reference.view(), &masks, Some(1.0)).unwrap();
        assert_eq!(rois[0].value.unwrap(), Psnr::Identical);
        assert!(rois[1].value.is_none());
    }

    #[test]
    fn wilcoxon_exact_all_positive_n5() {
        // enumeration over 2^5 sign assignments: p = 0.0625 two-sided
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.0; 5];
        let p = wilcoxon_signed_rank(&x, &y, Alternative::TwoSided).unwrap();
        assert_relative_eq!(p, 0.0625, epsilon = 1e-12);
        let p1 = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        assert_relative_eq!(p1, 0.03125, epsilon = 1e-12);
    }

    #[test]
    fn wilcoxon_degenerate_when_equal() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x, Alternative::TwoSided),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn wilcoxon_two_sided_symmetric() {
        let x = [1.2, 0.4, 3.3, -0.5, 2.2, 0.9, 1.4];
        let y = [0.3, 0.8, 1.1, 0.2, 1.9, 1.5, 0.7];
        let pxy = wilcoxon_signed_rank(&x, &y, Alternative::TwoSided).unwrap();
        let pyx = wilcoxon_signed_rank(&y, &x, Alternative::TwoSided).unwrap();
        assert_relative_eq!(pxy, pyx, epsilon = 1e-12);
    }

    #[test]
    fn wilcoxon_rejects_short_or_mismatched() {
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[0.0, 0.0], Alternative::TwoSided).is_err());
        assert!(wilcoxon_signed_rank(&[1.0; 6], &[0.0; 5], Alternative::TwoSided).is_err());
        // zero differences dropped below the minimum
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        assert!(wilcoxon_signed_rank(&x, &y, Alternative::TwoSided).is_err());
    }

    /// Brute-force enumeration of the exact sign-flip distribution.
    fn enumerate_p(diffs: &[f64], alternative: Alternative) -> f64 {
        let kept: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
        let n = kept.len();
        let mut sorted = kept.clone();
        sorted.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
        let rank_of = |d: f64| -> f64 {
            let lower = sorted.iter().filter(|s| s.abs() < d.abs()).count();
            let equal = sorted.iter().filter(|s| s.abs() == d.abs()).count();
            (lower + 1 + lower + equal) as f64 / 2.0
        };
        let ranks: Vec<f64> = kept.iter().map(|&d| rank_of(d)).collect();
        let w_obs: f64 = kept
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, r)| *r)
            .sum();
        let mut ge = 0usize;
        let mut le = 0usize;
        for mask in 0..(1usize << n) {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w >= w_obs - 1e-9 {
                ge += 1;
            }
            if w <= w_obs + 1e-9 {
                le += 1;
            }
        }
        let total = (1usize << n) as f64;
        match alternative {
            Alternative::Greater => ge as f64 / total,
            Alternative::Less => le as f64 / total,
            Alternative::TwoSided => (2.0 * (ge.min(le) as f64) / total).min(1.0),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_wilcoxon_matches_enumeration(
            seed in 0u64..10_000,
            n in 5usize..=10,
            with_ties in proptest::bool::ANY,
        ) {
            let mut rng = crate::rng::stream(seed, 99);
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.sample(rand_distr::StandardNormal);
                    if with_ties { (v * 2.0).round() / 2.0 } else { v }
                })
                .filter(|d| *d != 0.0)
                .collect();
            prop_assume!(diffs.len() >= 5);
            let x: Vec<f64> = diffs.clone();
            let y = vec![0.0; diffs.len()];
            for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
                let p = wilcoxon_signed_rank(&x, &y, alt).unwrap();
                let p_ref = enumerate_p(&diffs, alt).clamp(f64::MIN_POSITIVE, 1.0);
                prop_assert!((p - p_ref).abs() < 1e-9, "alt {:?}: {} vs {}", alt, p, p_ref);
            }
        }

        #[test]
        fn prop_uncertainty_scaling_psnr_range(c in 0.5f64..4.0) {
            // joint rescaling of both images and range leaves PSNR unchanged
            let img = Array2::from_shape_fn((8, 8), |(y, x)| 0.3 + 0.01 * (y * 8 + x) as f32);
            let reference = Array2::from_shape_fn((8, 8), |(y, x)| 0.2 + 0.012 * (y * 8 + x) as f32);
            let p1 = psnr(img.view(), reference.view(), Some(1.0)).unwrap().db().unwrap();
            let img2 = img.mapv(|v| v * c as f32);
            let ref2 = reference.mapv(|v| v * c as f32);
            let p2 = psnr(img2.view(), ref2.view(), Some(c)).unwrap().db().unwrap();
            prop_assert!((p1 - p2).abs() < 1e-4);
        }
    }

    #[test]
    fn wilcoxon_normal_approximation_tracks_exact() {
        // n = 30 takes the approximation path; the exact DP still works at
        // that size and bounds the approximation error
        let mut rng = crate::rng::stream(5, 7);
        let x: Vec<f64> = (0..30).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) + 0.4).collect();
        let y: Vec<f64> = vec![0.0; 30];
        for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
            let p = wilcoxon_signed_rank(&x, &y, alt).unwrap();
            assert!(p > 0.0 && p <= 1.0);
            let ranks: Vec<f64> = {
                let mut d: Vec<f64> = x.clone();
                d.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
                let rank_of = |v: f64| d.iter().position(|s| s.abs() == v.abs()).unwrap() as f64 + 1.0;
                x.iter().map(|&v| rank_of(v)).collect()
            };
            let w_plus: f64 = x.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| *r).sum();
            let p_exact = exact_signed_rank_p(&ranks, w_plus, alt);
            assert!((p - p_exact).abs() < 0.01, "alt {alt:?}: approx {p} vs exact {p_exact}");
        }
    }
}
