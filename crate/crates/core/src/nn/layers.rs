//! Layers with explicit forward caches and hand-written backward passes.
//!
//! All layer methods operate on one sample (no batch axis); batching is a
//! parallel map at the network level, which keeps results bit-identical
//! regardless of batch splitting.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3};
use rand::Rng;

use super::{sc, GradSet, ParamId, ParamSet, Scalar};

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<F: Scalar> {
    col: Array2<F>,
    in_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w_arr = if zero_init {
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch, in_ch, k, k]))
        } else {
            super::uniform_init(rng, &[out_ch, in_ch, k, k], fan_in)
        };
        let b_arr = if zero_init {
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch]))
        } else {
            super::uniform_init(rng, &[out_ch], fan_in)
        };
        let w = ps.alloc(format!("{name}.w"), w_arr);
        let b = ps.alloc(format!("{name}.b"), b_arr);
        Self { w, b, in_ch, out_ch, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col<F: Scalar>(&self, x: ArrayView3<'_, F>) -> Array2<F> {
        let (c_in, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let kk = self.k * self.k;
        let mut col = Array2::<F>::zeros((c_in * kk, ho * wo));
        for c in 0..c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = c * kk + ky * self.k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[[row, oy * wo + ox]] = x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        col
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamSet<F>, x: ArrayView3<'_, F>) -> (Array3<F>, ConvCache<F>) {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let col = self.im2col(x);
        let w_mat = ps
            .get(self.w)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.k * self.k))
            .unwrap();
        let mut out = w_mat.dot(&col);
        let b = ps.get(self.b);
        for (o, mut row) in out.rows_mut().into_iter().enumerate() {
            let bias = b[[o]];
            row.mapv_inplace(|v| v + bias);
        }
        let out = out.into_shape_with_order((self.out_ch, ho, wo)).unwrap();
        (out, ConvCache { col, in_hw: (h, w) })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        cache: &ConvCache<F>,
        grad_out: &Array3<F>,
        grads: &mut GradSet<F>,
    ) -> Array3<F> {
        let (c_out, ho, wo) = grad_out.dim();
        let n = ho * wo;
        let kk = self.k * self.k;
        let go_mat = grad_out.view().into_shape_with_order((c_out, n)).unwrap();

        {
            let gb = grads.get_mut(self.b);
            for o in 0..c_out {
                let mut acc = F::zero();
                for j in 0..n {
                    acc += go_mat[[o, j]];
                }
                gb[[o]] += acc;
            }
        }
        let gw_update = go_mat.dot(&cache.col.t());
        {
            let gw = grads.get_mut(self.w);
            let mut gw_mat = gw.view_mut().into_shape_with_order((c_out, self.in_ch * kk)).unwrap();
            gw_mat += &gw_update;
        }

        let w_mat = ps
            .get(self.w)
            .view()
            .into_shape_with_order((c_out, self.in_ch * kk))
            .unwrap();
        let col_grad = w_mat.t().dot(&go_mat);

        // col2im scatter-add
        let (h, w) = cache.in_hw;
        let mut gx = Array3::<F>::zeros((self.in_ch, h, w));
        for c in 0..self.in_ch {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = c * kk + ky * self.k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[[c, iy as usize, ix as usize]] += col_grad[[row, oy * wo + ox]];
                        }
                    }
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct DenseCache<F: Scalar> {
    x: Array1<F>,
}

impl Dense {
    pub fn init<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
    ) -> Self {
        let w_arr = if zero_init {
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_dim, in_dim]))
        } else {
            super::uniform_init(rng, &[out_dim, in_dim], in_dim)
        };
        let b_arr = if zero_init {
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_dim]))
        } else {
            super::uniform_init(rng, &[out_dim], in_dim)
        };
        Self {
            w: ps.alloc(format!("{name}.w"), w_arr),
            b: ps.alloc(format!("{name}.b"), b_arr),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamSet<F>, x: ArrayView1<'_, F>) -> (Array1<F>, DenseCache<F>) {
        let w = ps.get(self.w).view().into_shape_with_order((self.out_dim, self.in_dim)).unwrap();
        let b = ps.get(self.b);
        let mut y = w.dot(&x);
        for (o, v) in y.iter_mut().enumerate() {
            *v += b[[o]];
        }
        (y, DenseCache { x: x.to_owned() })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        cache: &DenseCache<F>,
        grad_out: ArrayView1<'_, F>,
        grads: &mut GradSet<F>,
    ) -> Array1<F> {
        {
            let gw = grads.get_mut(self.w);
            let mut gw_mat = gw.view_mut().into_shape_with_order((self.out_dim, self.in_dim)).unwrap();
            for o in 0..self.out_dim {
                for i in 0..self.in_dim {
                    gw_mat[[o, i]] += grad_out[o] * cache.x[i];
                }
            }
        }
        {
            let gb = grads.get_mut(self.b);
            for o in 0..self.out_dim {
                gb[[o]] += grad_out[o];
            }
        }
        let w = ps.get(self.w).view().into_shape_with_order((self.out_dim, self.in_dim)).unwrap();
        w.t().dot(&grad_out)
    }
}

// ---------------------------------------------------------------------------
// group norm
// ---------------------------------------------------------------------------

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCache<F: Scalar> {
    x_hat: Array3<F>,
    inv_std: Vec<F>,
}

impl GroupNorm {
    pub fn init<F: Scalar>(ps: &mut ParamSet<F>, name: &str, channels: usize) -> Self {
        // about eight channels per group; wide groups keep the inter-channel
        // offsets that carry global-intensity information through the norm
        let groups = if channels.is_multiple_of(8) { channels / 8 } else { 1 };
        let gamma = ps.alloc(format!("{name}.gamma"), ndarray::ArrayD::from_elem(ndarray::IxDyn(&[channels]), F::one()));
        let beta = ps.alloc(format!("{name}.beta"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels])));
        Self { gamma, beta, channels, groups }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamSet<F>, x: ArrayView3<'_, F>) -> (Array3<F>, GroupNormCache<F>) {
        let (c, h, w) = x.dim();
        let per = c / self.groups;
        let m = sc::<F>((per * h * w) as f64);
        let mut x_hat = Array3::<F>::zeros((c, h, w));
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let c0 = g * per;
            let mut mean = F::zero();
            for ch in c0..c0 + per {
                for v in x.index_axis(ndarray::Axis(0), ch).iter() {
                    mean += *v;
                }
            }
            mean /= m;
            let mut var = F::zero();
            for ch in c0..c0 + per {
                for v in x.index_axis(ndarray::Axis(0), ch).iter() {
                    let d = *v - mean;
                    var += d * d;
                }
            }
            var /= m;
            let inv = F::one() / (var + sc::<F>(GN_EPS)).sqrt();
            inv_std.push(inv);
            for ch in c0..c0 + per {
                for (idx, v) in x.index_axis(ndarray::Axis(0), ch).indexed_iter() {
                    x_hat[[ch, idx.0, idx.1]] = (*v - mean) * inv;
                }
            }
        }
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut y = x_hat.clone();
        for ch in 0..c {
            let (gm, bt) = (gamma[[ch]], beta[[ch]]);
            y.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| gm * v + bt);
        }
        (y, GroupNormCache { x_hat, inv_std })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        cache: &GroupNormCache<F>,
        grad_out: &Array3<F>,
        grads: &mut GradSet<F>,
    ) -> Array3<F> {
        let (c, h, w) = grad_out.dim();
        let per = c / self.groups;
        let m = sc::<F>((per * h * w) as f64);
        let gamma = ps.get(self.gamma);
        {
            let ggamma = grads.get_mut(self.gamma);
            for ch in 0..c {
                let mut acc = F::zero();
                for (idx, g) in grad_out.index_axis(ndarray::Axis(0), ch).indexed_iter() {
                    acc += *g * cache.x_hat[[ch, idx.0, idx.1]];
                }
                ggamma[[ch]] += acc;
            }
        }
        {
            let gbeta = grads.get_mut(self.beta);
            for ch in 0..c {
                let mut acc = F::zero();
                for g in grad_out.index_axis(ndarray::Axis(0), ch).iter() {
                    acc += *g;
                }
                gbeta[[ch]] += acc;
            }
        }
        let mut gx = Array3::<F>::zeros((c, h, w));
        for g in 0..self.groups {
            let c0 = g * per;
            let inv = cache.inv_std[g];
            // dxhat = dy * gamma; dx = inv (dxhat - mean(dxhat) - xhat * mean(dxhat xhat))
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            for ch in c0..c0 + per {
                let gm = gamma[[ch]];
                for (idx, gy) in grad_out.index_axis(ndarray::Axis(0), ch).indexed_iter() {
                    let dxh = *gy * gm;
                    s1 += dxh;
                    s2 += dxh * cache.x_hat[[ch, idx.0, idx.1]];
                }
            }
            s1 /= m;
            s2 /= m;
            for ch in c0..c0 + per {
                let gm = gamma[[ch]];
                for (idx, gy) in grad_out.index_axis(ndarray::Axis(0), ch).indexed_iter() {
                    let dxh = *gy * gm;
                    let xh = cache.x_hat[[ch, idx.0, idx.1]];
                    gx[[ch, idx.0, idx.1]] = inv * (dxh - s1 - xh * s2);
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time_proj: Option<Dense>,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

pub struct ResBlockCache<F: Scalar> {
    x: Array3<F>,
    n1: GroupNormCache<F>,
    h0: Array3<F>,
    c1: ConvCache<F>,
    tp: Option<DenseCache<F>>,
    t_emb: Option<Array1<F>>,
    n2: GroupNormCache<F>,
    h3: Array3<F>,
    c2: ConvCache<F>,
    skip: Option<ConvCache<F>>,
}

impl ResBlock {
    pub fn init<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        time_dim: Option<usize>,
    ) -> Self {
        let norm1 = GroupNorm::init(ps, &format!("{name}.norm1"), in_ch);
        let conv1 = Conv2d::init(ps, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, false);
        let time_proj = time_dim.map(|td| Dense::init(ps, rng, &format!("{name}.time"), td, out_ch, false));
        let norm2 = GroupNorm::init(ps, &format!("{name}.norm2"), out_ch);
        // zero-init the second conv so a fresh block is an identity mapping
        let conv2 = Conv2d::init(ps, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, true);
        let skip = (in_ch != out_ch)
            .then(|| Conv2d::init(ps, rng, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 0, false));
        Self { norm1, conv1, time_proj, norm2, conv2, skip }
    }

    pub fn forward<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        x: ArrayView3<'_, F>,
        t_emb: Option<ArrayView1<'_, F>>,
    ) -> (Array3<F>, ResBlockCache<F>) {
        let (h0_raw, n1) = self.norm1.forward(ps, x);
        let h1 = h0_raw.mapv(silu);
        let (mut h2, c1) = self.conv1.forward(ps, h1.view());
        let (tp_cache, t_cache) = match (&self.time_proj, t_emb) {
            (Some(dense), Some(emb)) => {
                let emb_act = emb.mapv(silu);
                let (delta, cache) = dense.forward(ps, emb_act.view());
                for (ch, d) in delta.iter().enumerate() {
                    h2.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| v + *d);
                }
                (Some(cache), Some(emb.to_owned()))
            }
            _ => (None, None),
        };
        let (h3_raw, n2) = self.norm2.forward(ps, h2.view());
        let h4 = h3_raw.mapv(silu);
        let (h5, c2) = self.conv2.forward(ps, h4.view());
        let (skip_out, skip_cache) = match &self.skip {
            Some(conv) => {
                let (s, c) = conv.forward(ps, x);
                (s, Some(c))
            }
            None => (x.to_owned(), None),
        };
        let y = skip_out + &h5;
        let cache = ResBlockCache {
            x: x.to_owned(),
            n1,
            h0: h0_raw,
            c1,
            tp: tp_cache,
            t_emb: t_cache,
            n2,
            h3: h3_raw,
            c2,
            skip: skip_cache,
        };
        (y, cache)
    }

    /// Returns (grad wrt x, grad wrt shared time embedding).
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        cache: &ResBlockCache<F>,
        grad_out: &Array3<F>,
        grads: &mut GradSet<F>,
    ) -> (Array3<F>, Option<Array1<F>>) {
        // main branch
        let dh4 = self.conv2.backward(ps, &cache.c2, grad_out, grads);
        let dh3 = ndarray::Zip::from(&dh4).and(&cache.h3).map_collect(|&g, &x| g * silu_grad(x));
        let mut dh2 = self.norm2.backward(ps, &cache.n2, &dh3, grads);
        // time projection
        let d_temb = match (&self.time_proj, &cache.tp, &cache.t_emb) {
            (Some(dense), Some(tp_cache), Some(t_emb)) => {
                let mut d_delta = Array1::<F>::zeros(dense.out_dim);
                for ch in 0..dense.out_dim {
                    let mut acc = F::zero();
                    for v in dh2.index_axis(ndarray::Axis(0), ch).iter() {
                        acc += *v;
                    }
                    d_delta[ch] = acc;
                }
                let d_emb_act = dense.backward(ps, tp_cache, d_delta.view(), grads);
                let d_emb = ndarray::Zip::from(&d_emb_act)
                    .and(t_emb)
                    .map_collect(|&g, &x| g * silu_grad(x));
                Some(d_emb)
            }
            _ => None,
        };
        let dh1 = self.conv1.backward(ps, &cache.c1, &dh2, grads);
        dh2 = Array3::zeros((0, 0, 0)); // released
        let _ = dh2;
        let dh0 = ndarray::Zip::from(&dh1).and(&cache.h0).map_collect(|&g, &x| g * silu_grad(x));
        let mut dx = self.norm1.backward(ps, &cache.n1, &dh0, grads);
        // skip branch
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(skip_cache)) => {
                let ds = conv.backward(ps, skip_cache, grad_out, grads);
                dx += &ds;
            }
            _ => {
                dx += grad_out;
            }
        }
        let _ = &cache.x;
        (dx, d_temb)
    }
}

// ---------------------------------------------------------------------------
// resolution changes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn init<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut impl Rng, name: &str, ch: usize) -> Self {
        Self { conv: Conv2d::init(ps, rng, name, ch, ch, 3, 2, 1, false) }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamSet<F>, x: ArrayView3<'_, F>) -> (Array3<F>, ConvCache<F>) {
        self.conv.forward(ps, x)
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        cache: &ConvCache<F>,
        grad_out: &Array3<F>,
        grads: &mut GradSet<F>,
    ) -> Array3<F> {
        self.conv.backward(ps, cache, grad_out, grads)
    }
}

#[derive(Debug, Clone)]
pub struct Upsample {
    pub conv: Conv2d,
}

pub struct UpsampleCache<F: Scalar> {
    conv: ConvCache<F>,
    in_hw: (usize, usize),
}

impl Upsample {
    pub fn init<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut impl Rng, name: &str, ch: usize) -> Self {
        Self { conv: Conv2d::init(ps, rng, name, ch, ch, 3, 1, 1, false) }
    }

    pub fn forward<F: Scalar>(&self, ps: &ParamSet<F>, x: ArrayView3<'_, F>) -> (Array3<F>, UpsampleCache<F>) {
        let (c, h, w) = x.dim();
        let mut up = Array3::<F>::zeros((c, 2 * h, 2 * w));
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    up[[ch, y, xx]] = x[[ch, y / 2, xx / 2]];
                }
            }
        }
        let (out, conv) = self.conv.forward(ps, up.view());
        (out, UpsampleCache { conv, in_hw: (h, w) })
    }

    pub fn backward<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        cache: &UpsampleCache<F>,
        grad_out: &Array3<F>,
        grads: &mut GradSet<F>,
    ) -> Array3<F> {
        let d_up = self.conv.backward(ps, &cache.conv, grad_out, grads);
        let (c, _, _) = d_up.dim();
        let (h, w) = cache.in_hw;
        let mut gx = Array3::<F>::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    gx[[ch, y / 2, xx / 2]] += d_up[[ch, y, xx]];
                }
            }
        }
        gx
    }
}
