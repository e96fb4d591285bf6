//! Single-head self-attention over spatial positions, with residual
//! connection. Applied at the coarsest scales only.

use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;

use super::layers::{Conv2d, ConvCache, GroupNorm, GroupNormCache};
use super::{sc, GradSet, ParamSet, Scalar};

#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
}

pub struct AttnCache<F: Scalar> {
    norm: GroupNormCache<F>,
    qkv_cache: ConvCache<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Array2<F>,
    proj_cache: ConvCache<F>,
    hw: (usize, usize),
}

impl AttnBlock {
    pub fn init<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        let norm = GroupNorm::init(ps, &format!("{name}.norm"), channels);
        let qkv = Conv2d::init(ps, rng, &format!("{name}.qkv"), channels, 3 * channels, 1, 1, 0, false);
        // zero-init projection: a fresh attention block is the identity
        let proj = Conv2d::init(ps, rng, &format!("{name}.proj"), channels, channels, 1, 1, 0, true);
        Self { norm, qkv, proj, channels }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamSet<F>, x: ArrayView3<'_, F>) -> (Array3<F>, AttnCache<F>) {
        let (c, h, w) = x.dim();
        let n = h * w;
        let (normed, norm_cache) = self.norm.forward(ps, x);
        let (qkv_out, qkv_cache) = self.qkv.forward(ps, normed.view());
        let qkv_mat = qkv_out.into_shape_with_order((3 * c, n)).unwrap();
        let q = qkv_mat.slice(ndarray::s![0..c, ..]).to_owned();
        let k = qkv_mat.slice(ndarray::s![c..2 * c, ..]).to_owned();
        let v = qkv_mat.slice(ndarray::s![2 * c..3 * c, ..]).to_owned();
        let scale = sc::<F>(1.0 / (c as f64).sqrt());
        // scores[i, j] = scale * q[:, i] . k[:, j], softmax over j
        let mut scores = q.t().dot(&k);
        scores.mapv_inplace(|s| s * scale);
        let attn = softmax_rows(&scores);
        // out[:, i] = sum_j attn[i, j] v[:, j]
        let out_mat = v.dot(&attn.t());
        let out = out_mat.into_shape_with_order((c, h, w)).unwrap();
        let (proj_out, proj_cache) = self.proj.forward(ps, out.view());
        let y = &x + &proj_out;
        (y, AttnCache { norm: norm_cache, qkv_cache, q, k, v, attn, proj_cache, hw: (h, w) })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        cache: &AttnCache<F>,
        grad_out: &Array3<F>,
        grads: &mut GradSet<F>,
    ) -> Array3<F> {
        let c = self.channels;
        let (h, w) = cache.hw;
        let n = h * w;
        let d_proj_in = self.proj.backward(ps, &cache.proj_cache, grad_out, grads);
        let d_out = d_proj_in.into_shape_with_order((c, n)).unwrap();
        // out = v attn^T
        let d_v = d_out.dot(&cache.attn);
        let d_attn = d_out.t().dot(&cache.v);
        // softmax backward per row
        let mut d_scores = Array2::<F>::zeros((n, n));
        for i in 0..n {
            let mut dot = F::zero();
            for j in 0..n {
                dot += d_attn[[i, j]] * cache.attn[[i, j]];
            }
            for j in 0..n {
                d_scores[[i, j]] = cache.attn[[i, j]] * (d_attn[[i, j]] - dot);
            }
        }
        let scale = sc::<F>(1.0 / (c as f64).sqrt());
        let mut d_q = cache.k.dot(&d_scores.t());
        d_q.mapv_inplace(|v| v * scale);
        let mut d_k = cache.q.dot(&d_scores);
        d_k.mapv_inplace(|v| v * scale);
        let mut d_qkv = Array3::<F>::zeros((3 * c, h, w));
        {
            let mut d_qkv_mat = d_qkv.view_mut().into_shape_with_order((3 * c, n)).unwrap();
            d_qkv_mat.slice_mut(ndarray::s![0..c, ..]).assign(&d_q);
            d_qkv_mat.slice_mut(ndarray::s![c..2 * c, ..]).assign(&d_k);
            d_qkv_mat.slice_mut(ndarray::s![2 * c..3 * c, ..]).assign(&d_v);
        }
        let d_normed = self.qkv.backward(ps, &cache.qkv_cache, &d_qkv, grads);
        let mut dx = self.norm.backward(ps, &cache.norm, &d_normed, grads);
        dx += grad_out;
        dx
    }
}

fn softmax_rows<F: Scalar>(scores: &Array2<F>) -> Array2<F> {
    let (n, m) = scores.dim();
    let mut out = Array2::<F>::zeros((n, m));
    for i in 0..n {
        let row = scores.row(i);
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for j in 0..m {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..m {
            out[[i, j]] /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::ArrayD;

    #[test]
    fn fresh_block_is_identity() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::stream(20, 1);
        let attn = AttnBlock::init(&mut ps, &mut r, "a", 4);
        let x: ArrayD<f64> = rng::normal_array(&mut rng::stream(21, 0), &[4, 3, 3]);
        let x: Array3<f64> = x.into_dimensionality().unwrap();
        let (y, _) = attn.forward(&ps, x.view());
        assert_eq!(y, x);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::stream(22, 1);
        let attn = AttnBlock::init(&mut ps, &mut r, "a", 2);
        // perturb the zero-init projection so its path carries gradient
        {
            let mut r2 = rng::stream(23, 1);
            *ps.get_mut(attn.proj.w) = super::super::uniform_init(&mut r2, &[2, 2, 1, 1], 2);
        }
        let x: ArrayD<f64> = rng::normal_array(&mut rng::stream(24, 0), &[2, 3, 3]);
        let x: Array3<f64> = x.into_dimensionality().unwrap();
        let loss = |ps: &ParamSet<f64>| {
            let (out, _) = attn.forward(ps, x.view());
            out.iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let (out, cache) = attn.forward(&ps, x.view());
        let mut grads = ps.zero_grads();
        let gx = attn.backward(&ps, &cache, &out, &mut grads);

        let eps = 1e-5;
        for pid in 0..ps.len() {
            let len = ps.arrays()[pid].len();
            for flat in (0..len).step_by((len / 5).max(1)) {
                let orig = ps.arrays()[pid].as_slice().unwrap()[flat];
                ps.arrays_mut()[pid].as_slice_mut().unwrap()[flat] = orig + eps;
                let up = loss(&ps);
                ps.arrays_mut()[pid].as_slice_mut().unwrap()[flat] = orig - eps;
                let down = loss(&ps);
                ps.arrays_mut()[pid].as_slice_mut().unwrap()[flat] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let exact = grads.arrays()[pid].as_slice().unwrap()[flat];
                if numeric.abs() < 1e-7 && exact.abs() < 1e-7 {
                    continue; // below the finite-difference noise floor
                }
                let denom = exact.abs().max(numeric.abs());
                assert!(
                    ((numeric - exact) / denom).abs() < 1e-5,
                    "param {pid}[{flat}]: fd {numeric} vs analytic {exact}"
                );
            }
        }
        // input gradient
        let mut x2 = x.clone();
        for &(c, y, xx) in &[(0usize, 0usize, 0usize), (1, 2, 1)] {
            x2[[c, y, xx]] += eps;
            let (o, _) = attn.forward(&ps, x2.view());
            let up: f64 = o.iter().map(|v| v * v).sum::<f64>() / 2.0;
            x2[[c, y, xx]] -= 2.0 * eps;
            let (o, _) = attn.forward(&ps, x2.view());
            let down: f64 = o.iter().map(|v| v * v).sum::<f64>() / 2.0;
            x2[[c, y, xx]] += eps;
            let numeric = (up - down) / (2.0 * eps);
            assert!((numeric - gx[[c, y, xx]]).abs() < 1e-5 * numeric.abs().max(1.0));
        }
    }
}
