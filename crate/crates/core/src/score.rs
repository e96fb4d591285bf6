//! The eps-prediction network: encoder-decoder with residual blocks,
//! self-attention at the configured scales, sinusoidal time embedding, and
//! channel-concatenated conditioning.

use ndarray::{concatenate, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageVolume;
use crate::nn::attention::{AttnBlock, AttnCache};
use crate::nn::layers::{silu, silu_grad, Conv2d, ConvCache, Dense, DenseCache, GroupNorm, GroupNormCache, ResBlock, ResBlockCache, Upsample, UpsampleCache};
use crate::nn::{GradSet, ParamSet, Scalar};
use crate::rng;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    /// Square input size; must be divisible by 2^(levels - 1).
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    /// Resolutions (in pixels) at which self-attention runs. The coarsest
    /// scale always gets attention in the middle stack.
    pub attention_resolutions: Vec<usize>,
    /// 1 latent channel plus conditioning channels.
    pub in_channels: usize,
    pub time_embed_dim: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            num_res_blocks: 2,
            attention_resolutions: vec![16],
            in_channels: 1,
            time_embed_dim: 64,
        }
    }
}

impl ScoreNetConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 {
            return Err(Error::param("channel_multipliers", "must be non-empty"));
        }
        let factor = 1usize << (levels - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(Error::param(
                "image_size",
                format!("{} not divisible by 2^(levels-1) = {}", self.image_size, factor),
            ));
        }
        if self.in_channels < 1 {
            return Err(Error::param("in_channels", "must be >= 1"));
        }
        if self.base_channels < 1 || self.num_res_blocks < 1 {
            return Err(Error::param("base_channels/num_res_blocks", "must be >= 1"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::param("time_embed_dim", "must be even and >= 2"));
        }
        Ok(())
    }

    fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    fn level_resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }
}

/// Which images condition the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Noisy functional image as input channels.
    Pet,
    /// Anatomical prior as input channels.
    Mr,
    /// Both as input channels.
    PetMr,
    /// Prior as input channels; the noisy image enters only through the
    /// data-consistency term during sampling, never as a channel.
    MrPetCon,
    /// Unconditional.
    None,
}

impl ConditioningMode {
    pub fn conditioning_images(&self) -> usize {
        match self {
            ConditioningMode::Pet | ConditioningMode::Mr | ConditioningMode::MrPetCon => 1,
            ConditioningMode::PetMr => 2,
            ConditioningMode::None => 0,
        }
    }

    pub fn needs_noisy_channel(&self) -> bool {
        matches!(self, ConditioningMode::Pet | ConditioningMode::PetMr)
    }

    pub fn needs_prior(&self) -> bool {
        matches!(self, ConditioningMode::Mr | ConditioningMode::PetMr | ConditioningMode::MrPetCon)
    }

    pub fn label(&self) -> &'static str {
        match self {
            ConditioningMode::Pet => "pet",
            ConditioningMode::Mr => "mr",
            ConditioningMode::PetMr => "petmr",
            ConditioningMode::MrPetCon => "mr_petcon",
            ConditioningMode::None => "none",
        }
    }
}

/// Conditioning channels contributed by `mode` with `slice_context`
/// neighbor slices per side per image.
pub fn conditioning_channels(mode: ConditioningMode, slice_context: usize) -> usize {
    mode.conditioning_images() * (1 + 2 * slice_context)
}

/// Network input channels: 1 latent + conditioning.
pub fn in_channels_for(mode: ConditioningMode, slice_context: usize) -> usize {
    1 + conditioning_channels(mode, slice_context)
}

/// The auxiliary inputs for one sample.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub mode: ConditioningMode,
    pub noisy: Option<ImageVolume>,
    pub prior: Option<ImageVolume>,
    pub slice_context: usize,
}

impl ConditioningBundle {
    pub fn unconditional() -> Self {
        Self { mode: ConditioningMode::None, noisy: None, prior: None, slice_context: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.needs_noisy_channel() && self.noisy.is_none() {
            return Err(Error::param("noisy", format!("mode {} requires a noisy image", self.mode.label())));
        }
        if self.mode.needs_prior() && self.prior.is_none() {
            return Err(Error::param("prior", format!("mode {} requires a prior image", self.mode.label())));
        }
        Ok(())
    }

    /// Stack the conditioning channels (without the latent).
    ///
    /// Each conditioning image contributes its center slice plus
    /// `slice_context` neighbors per side. The noisy image of `MrPetCon`
    /// is deliberately not a channel.
    pub fn channels<F: Scalar>(&self) -> Result<Vec<Array2<F>>> {
        self.validate()?;
        let mut planes = Vec::new();
        let mut push_volume = |vol: &ImageVolume| -> Result<()> {
            let needed = 1 + 2 * self.slice_context;
            if vol.channels() < needed {
                return Err(Error::param(
                    "slice_context",
                    format!("volume has {} planes, need {}", vol.channels(), needed),
                ));
            }
            let center = vol.channels() / 2;
            let start = center - self.slice_context;
            for c in start..start + needed {
                planes.push(vol.plane(c).mapv(|v| F::from_f32(v).unwrap()));
            }
            Ok(())
        };
        match self.mode {
            ConditioningMode::Pet => push_volume(self.noisy.as_ref().unwrap())?,
            ConditioningMode::Mr => push_volume(self.prior.as_ref().unwrap())?,
            ConditioningMode::PetMr => {
                push_volume(self.noisy.as_ref().unwrap())?;
                push_volume(self.prior.as_ref().unwrap())?;
            }
            ConditioningMode::MrPetCon => push_volume(self.prior.as_ref().unwrap())?,
            ConditioningMode::None => {}
        }
        Ok(planes)
    }
}

/// Sinusoidal embedding of a timestep index.
pub fn timestep_embedding<F: Scalar>(t: usize, dim: usize) -> Array1<F> {
    let half = dim / 2;
    let mut emb = Array1::<F>::zeros(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        emb[k] = F::from_f64(arg.cos()).unwrap();
        emb[half + k] = F::from_f64(arg.sin()).unwrap();
    }
    emb
}

struct EncLevel {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    down: Option<crate::nn::layers::Downsample>,
}

struct DecLevel {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    up: Option<Upsample>,
}

/// U-net eps predictor. `time_conditioned = false` drops the time-embedding
/// pathway entirely (used by the supervised baseline).
pub struct ScoreNet<F: Scalar> {
    pub config: ScoreNetConfig,
    pub params: ParamSet<F>,
    time_mlp: Option<(Dense, Dense)>,
    stem: Conv2d,
    enc: Vec<EncLevel>,
    mid: (ResBlock, AttnBlock, ResBlock),
    dec: Vec<DecLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    time_conditioned: bool,
}

/// Deterministically initialized network; same seed, same parameters.
pub fn build_score_net<F: Scalar>(cfg: &ScoreNetConfig, seed: u64) -> Result<ScoreNet<F>> {
    ScoreNet::build(cfg, seed, true)
}

impl<F: Scalar> ScoreNet<F> {
    pub fn build(cfg: &ScoreNetConfig, seed: u64, time_conditioned: bool) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut r = rng::stream(seed, rng::streams::INIT);
        let chans = cfg.level_channels();
        let levels = chans.len();
        let ted = cfg.time_embed_dim;
        let time_dim = time_conditioned.then_some(ted);

        let time_mlp = time_conditioned.then(|| {
            (
                Dense::init(&mut ps, &mut r, "time_mlp.0", ted, ted, false),
                Dense::init(&mut ps, &mut r, "time_mlp.1", ted, ted, false),
            )
        });
        let stem = Conv2d::init(&mut ps, &mut r, "stem", cfg.in_channels, chans[0], 3, 1, 1, false);

        let mut enc = Vec::with_capacity(levels);
        let mut in_ch = chans[0];
        for (i, &ch) in chans.iter().enumerate() {
            let res = cfg.level_resolution(i);
            let with_attn = cfg.attention_resolutions.contains(&res);
            let mut blocks = Vec::new();
            for b in 0..cfg.num_res_blocks {
                let block = ResBlock::init(&mut ps, &mut r, &format!("enc{i}.block{b}"), in_ch, ch, time_dim);
                let attn = with_attn.then(|| AttnBlock::init(&mut ps, &mut r, &format!("enc{i}.attn{b}"), ch));
                blocks.push((block, attn));
                in_ch = ch;
            }
            let down = (i + 1 < levels)
                .then(|| crate::nn::layers::Downsample::init(&mut ps, &mut r, &format!("enc{i}.down"), ch));
            enc.push(EncLevel { blocks, down });
        }

        let c_last = *chans.last().unwrap();
        let mid = (
            ResBlock::init(&mut ps, &mut r, "mid.block1", c_last, c_last, time_dim),
            AttnBlock::init(&mut ps, &mut r, "mid.attn", c_last),
            ResBlock::init(&mut ps, &mut r, "mid.block2", c_last, c_last, time_dim),
        );

        let mut dec = Vec::with_capacity(levels);
        let mut h_ch = c_last;
        for (j, i) in (0..levels).rev().enumerate() {
            let ch = chans[i];
            let res = cfg.level_resolution(i);
            let with_attn = cfg.attention_resolutions.contains(&res);
            let mut blocks = Vec::new();
            let mut block_in = h_ch + ch; // concat with the level skip
            for b in 0..cfg.num_res_blocks {
                let block = ResBlock::init(&mut ps, &mut r, &format!("dec{i}.block{b}"), block_in, ch, time_dim);
                let attn = with_attn.then(|| AttnBlock::init(&mut ps, &mut r, &format!("dec{i}.attn{b}"), ch));
                blocks.push((block, attn));
                block_in = ch;
            }
            let up = (i > 0).then(|| Upsample::init(&mut ps, &mut r, &format!("dec{i}.up"), ch));
            dec.push(DecLevel { blocks, up });
            h_ch = ch;
            let _ = j;
        }

        let out_norm = GroupNorm::init(&mut ps, "out.norm", chans[0]);
        // zero-init head: a fresh net predicts eps = 0
        let out_conv = Conv2d::init(&mut ps, &mut r, "out.conv", chans[0], 1, 3, 1, 1, true);

        Ok(Self {
            config: cfg.clone(),
            params: ps,
            time_mlp,
            stem,
            enc,
            mid,
            dec,
            out_norm,
            out_conv,
            time_conditioned,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn is_time_conditioned(&self) -> bool {
        self.time_conditioned
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::ChannelMismatch { expected: self.config.in_channels, got: c });
        }
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::shape(
                &[self.config.in_channels, self.config.image_size, self.config.image_size],
                &[c, h, w],
            ));
        }
        Ok(())
    }

    fn embed_time(&self, t: usize) -> (Option<Array1<F>>, Option<TimeMlpCache<F>>) {
        match &self.time_mlp {
            Some((d1, d2)) => {
                let raw = timestep_embedding::<F>(t, self.config.time_embed_dim);
                let (h1, c1) = d1.forward(&self.params, raw.view());
                let h1_act = h1.mapv(silu);
                let (emb, c2) = d2.forward(&self.params, h1_act.view());
                (Some(emb), Some((c1, h1, c2)))
            }
            None => (None, None),
        }
    }

    /// Forward for one sample; returns the prediction and the tape.
    fn forward_sample(&self, x: ArrayView3<'_, F>, t: usize) -> (Array3<F>, SampleCache<F>) {
        let (temb, time_cache) = self.embed_time(t);
        let temb_view = temb.as_ref().map(|e| e.view());

        let (mut h, stem_cache) = self.stem.forward(&self.params, x);
        let mut enc_caches = Vec::with_capacity(self.enc.len());
        let mut skips: Vec<Array3<F>> = Vec::with_capacity(self.enc.len());
        for level in &self.enc {
            let mut block_caches = Vec::with_capacity(level.blocks.len());
            for (block, attn) in &level.blocks {
                let (next, bc) = block.forward(&self.params, h.view(), temb_view);
                h = next;
                let ac = attn.as_ref().map(|a| {
                    let (next, ac) = a.forward(&self.params, h.view());
                    h = next;
                    ac
                });
                block_caches.push((bc, ac));
            }
            skips.push(h.clone());
            let down_cache = level.down.as_ref().map(|d| {
                let (next, dc) = d.forward(&self.params, h.view());
                h = next;
                dc
            });
            enc_caches.push(LevelCache { blocks: block_caches, resize: down_cache.map(ResizeCache::Down) });
        }

        let (m1, mc1) = self.mid.0.forward(&self.params, h.view(), temb_view);
        let (m2, mc2) = self.mid.1.forward(&self.params, m1.view());
        let (m3, mc3) = self.mid.2.forward(&self.params, m2.view(), temb_view);
        h = m3;

        let mut dec_caches = Vec::with_capacity(self.dec.len());
        for level in &self.dec {
            let skip = skips.pop().expect("skip stack");
            let h_ch = h.dim().0;
            h = concatenate(Axis(0), &[h.view(), skip.view()]).expect("concat");
            let mut block_caches = Vec::with_capacity(level.blocks.len());
            for (block, attn) in &level.blocks {
                let (next, bc) = block.forward(&self.params, h.view(), temb_view);
                h = next;
                let ac = attn.as_ref().map(|a| {
                    let (next, ac) = a.forward(&self.params, h.view());
                    h = next;
                    ac
                });
                block_caches.push((bc, ac));
            }
            let up_cache = level.up.as_ref().map(|u| {
                let (next, uc) = u.forward(&self.params, h.view());
                h = next;
                uc
            });
            dec_caches.push(DecLevelCache {
                blocks: block_caches,
                up: up_cache,
                h_channels: h_ch,
            });
        }

        let (n_out, out_norm_cache) = self.out_norm.forward(&self.params, h.view());
        let act = n_out.mapv(silu);
        let (y, out_conv_cache) = self.out_conv.forward(&self.params, act.view());

        let cache = SampleCache {
            time: time_cache,
            stem: stem_cache,
            enc: enc_caches,
            mid: (mc1, mc2, mc3),
            dec: dec_caches,
            out_norm: out_norm_cache,
            out_pre_act: n_out,
            out_conv: out_conv_cache,
        };
        (y, cache)
    }

    /// Backward for one sample; accumulates parameter gradients.
    fn backward_sample(&self, cache: &SampleCache<F>, grad_out: &Array3<F>, grads: &mut GradSet<F>) {
        let mut d_temb_total: Option<Array1<F>> = None;
        let add_temb = |d: Option<Array1<F>>, total: &mut Option<Array1<F>>| {
            if let Some(d) = d {
                match total {
                    Some(t) => *t += &d,
                    None => *total = Some(d),
                }
            }
        };

        let d_act = self.out_conv.backward(&self.params, &cache.out_conv, grad_out, grads);
        let d_norm_out = ndarray::Zip::from(&d_act)
            .and(&cache.out_pre_act)
            .map_collect(|&g, &x| g * silu_grad(x));
        let mut dh = self.out_norm.backward(&self.params, &cache.out_norm, &d_norm_out, grads);

        let mut skip_grads: Vec<Array3<F>> = Vec::with_capacity(self.dec.len());
        for (level, lc) in self.dec.iter().zip(&cache.dec).rev() {
            if let (Some(up), Some(uc)) = (&level.up, &lc.up) {
                dh = up.backward(&self.params, uc, &dh, grads);
            }
            for ((block, attn), (bc, ac)) in level.blocks.iter().zip(&lc.blocks).rev() {
                if let (Some(a), Some(ac)) = (attn, ac) {
                    dh = a.backward(&self.params, ac, &dh, grads);
                }
                let (dx, d_temb) = block.backward(&self.params, bc, &dh, grads);
                dh = dx;
                add_temb(d_temb, &mut d_temb_total);
            }
            // split the concat gradient: [h | skip]
            let d_skip = dh.slice(ndarray::s![lc.h_channels.., .., ..]).to_owned();
            dh = dh.slice(ndarray::s![..lc.h_channels, .., ..]).to_owned();
            skip_grads.push(d_skip);
        }

        let (dm3, d_temb) = self.mid.2.backward(&self.params, &cache.mid.2, &dh, grads);
        add_temb(d_temb, &mut d_temb_total);
        let dm2 = self.mid.1.backward(&self.params, &cache.mid.1, &dm3, grads);
        let (dm1, d_temb) = self.mid.0.backward(&self.params, &cache.mid.0, &dm2, grads);
        add_temb(d_temb, &mut d_temb_total);
        dh = dm1;

        for (level, lc) in self.enc.iter().zip(&cache.enc).rev() {
            if let (Some(down), Some(ResizeCache::Down(dc))) = (&level.down, &lc.resize) {
                dh = down.backward(&self.params, dc, &dh, grads);
            }
            // the skip branch feeds the matching decoder level
            let d_skip = skip_grads.pop().expect("skip grad");
            dh += &d_skip;
            for ((block, attn), (bc, ac)) in level.blocks.iter().zip(&lc.blocks).rev() {
                if let (Some(a), Some(ac)) = (attn, ac) {
                    dh = a.backward(&self.params, ac, &dh, grads);
                }
                let (dx, d_temb) = block.backward(&self.params, bc, &dh, grads);
                dh = dx;
                add_temb(d_temb, &mut d_temb_total);
            }
        }
        let _ = self.stem.backward(&self.params, &cache.stem, &dh, grads);

        if let (Some((d1, d2)), Some((c1, h1, c2)), Some(d_temb)) =
            (&self.time_mlp, &cache.time, d_temb_total)
        {
            let d_h1_act = d2.backward(&self.params, c2, d_temb.view(), grads);
            let d_h1 = ndarray::Zip::from(&d_h1_act).and(h1).map_collect(|&g, &x| g * silu_grad(x));
            let _ = d1.backward(&self.params, c1, d_h1.view(), grads);
        }
    }

    /// Batched forward. Samples are processed independently (parallel map),
    /// so results do not depend on batch composition.
    pub fn forward_batch(&self, x: &Array4<F>, ts: &[usize]) -> Result<Array4<F>> {
        self.check_input(x)?;
        let b = x.dim().0;
        if ts.len() != b {
            return Err(Error::param("t", "one timestep per batch element"));
        }
        let outs: Vec<Array3<F>> = (0..b)
            .into_par_iter()
            .map(|i| self.forward_sample(x.index_axis(Axis(0), i), ts[i]).0)
            .collect();
        let mut out = Array4::<F>::zeros((b, 1, x.dim().2, x.dim().3));
        for (i, o) in outs.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&o);
        }
        Ok(out)
    }

    /// Batched forward + backward of a scalar-sum loss with the given output
    /// gradients. Returns predictions and summed parameter gradients
    /// (accumulated in batch order).
    pub fn forward_backward_batch(
        &self,
        x: &Array4<F>,
        ts: &[usize],
        grad_fn: impl Fn(usize, &Array3<F>) -> Array3<F> + Sync,
    ) -> Result<(Array4<F>, GradSet<F>)> {
        self.check_input(x)?;
        let b = x.dim().0;
        if ts.len() != b {
            return Err(Error::param("t", "one timestep per batch element"));
        }
        let per_sample: Vec<(Array3<F>, GradSet<F>)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let (out, cache) = self.forward_sample(x.index_axis(Axis(0), i), ts[i]);
                let grad_out = grad_fn(i, &out);
                let mut grads = self.params.zero_grads();
                self.backward_sample(&cache, &grad_out, &mut grads);
                (out, grads)
            })
            .collect();
        let mut out = Array4::<F>::zeros((b, 1, x.dim().2, x.dim().3));
        let mut total = self.params.zero_grads();
        for (i, (o, g)) in per_sample.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&o);
            total.add_assign(&g);
        }
        Ok((out, total))
    }

    /// Single-image prediction with explicit conditioning.
    pub fn predict_eps(&self, xt: ArrayView2<'_, F>, t: usize, cond: &ConditioningBundle) -> Result<Array2<F>> {
        let cond_planes = cond.channels::<F>()?;
        let (h, w) = xt.dim();
        let expected = 1 + cond_planes.len();
        if expected != self.config.in_channels {
            return Err(Error::ChannelMismatch { expected: self.config.in_channels, got: expected });
        }
        let mut x = Array4::<F>::zeros((1, expected, h, w));
        x.slice_mut(ndarray::s![0, 0, .., ..]).assign(&xt);
        for (c, plane) in cond_planes.iter().enumerate() {
            if plane.dim() != (h, w) {
                return Err(Error::shape(&[h, w], &[plane.dim().0, plane.dim().1]));
            }
            x.slice_mut(ndarray::s![0, c + 1, .., ..]).assign(plane);
        }
        let out = self.forward_batch(&x, &[t])?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { context: "predict_eps".into(), step: t });
        }
        Ok(out.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
    }
}

type TimeMlpCache<F> = (DenseCache<F>, Array1<F>, DenseCache<F>);

enum ResizeCache<F: Scalar> {
    Down(ConvCache<F>),
}

struct LevelCache<F: Scalar> {
    blocks: Vec<(ResBlockCache<F>, Option<AttnCache<F>>)>,
    resize: Option<ResizeCache<F>>,
}

struct DecLevelCache<F: Scalar> {
    blocks: Vec<(ResBlockCache<F>, Option<AttnCache<F>>)>,
    up: Option<UpsampleCache<F>>,
    h_channels: usize,
}

struct SampleCache<F: Scalar> {
    time: Option<TimeMlpCache<F>>,
    stem: ConvCache<F>,
    enc: Vec<LevelCache<F>>,
    mid: (ResBlockCache<F>, AttnCache<F>, ResBlockCache<F>),
    dec: Vec<DecLevelCache<F>>,
    out_norm: GroupNormCache<F>,
    out_pre_act: Array3<F>,
    out_conv: ConvCache<F>,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;
    use ndarray::ArrayD;

    fn toy_config(size: usize, in_channels: usize) -> ScoreNetConfig {
        ScoreNetConfig {
            image_size: size,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![size / 2],
            in_channels,
            time_embed_dim: 16,
        }
    }

    fn random_batch(b: usize, c: usize, s: usize, seed: u64) -> Array4<f64> {
        let arr: ArrayD<f64> = rng::normal_array(&mut rng::stream(seed, 0), &[b, c, s, s]);
        arr.into_dimensionality().unwrap()
    }

    #[test]
    fn same_seed_identical_parameters() {
        let cfg = toy_config(16, 1);
        let a = build_score_net::<f32>(&cfg, 99).unwrap();
        let b = build_score_net::<f32>(&cfg, 99).unwrap();
        for (x, y) in a.params.arrays().iter().zip(b.params.arrays()) {
            assert_eq!(x, y);
        }
        let c = build_score_net::<f32>(&cfg, 100).unwrap();
        assert!(a.params.arrays().iter().zip(c.params.arrays()).any(|(x, y)| x != y));
    }

    #[test]
    fn paper_channel_counts_build() {
        // single-conditioning modes use 3 input channels, dual uses 6
        let mut cfg = toy_config(16, 3);
        let net3 = build_score_net::<f32>(&cfg, 1).unwrap();
        assert_eq!(net3.config.in_channels, 3);
        cfg.in_channels = 6;
        let net6 = build_score_net::<f32>(&cfg, 1).unwrap();
        assert_eq!(net6.config.in_channels, 6);
        // 2.5D bookkeeping: one conditioning image with one neighbor slice
        // per side also lands on 3 when the latent replaces the center slice
        assert_eq!(conditioning_channels(ConditioningMode::Pet, 1), 3);
        assert_eq!(conditioning_channels(ConditioningMode::PetMr, 1), 6);
        assert_eq!(in_channels_for(ConditioningMode::Pet, 0), 2);
        assert_eq!(in_channels_for(ConditioningMode::PetMr, 0), 3);
        assert_eq!(in_channels_for(ConditioningMode::None, 0), 1);
    }

    #[test]
    fn rejects_indivisible_image_size() {
        let mut cfg = toy_config(16, 1);
        cfg.channel_multipliers = vec![1, 2, 4];
        cfg.image_size = 18; // not divisible by 2^(levels-1) = 4
        assert!(build_score_net::<f32>(&cfg, 1).is_err());
        cfg.image_size = 0;
        assert!(build_score_net::<f32>(&cfg, 1).is_err());
    }

    #[test]
    fn fresh_net_predicts_zero() {
        let cfg = toy_config(16, 1);
        let net = build_score_net::<f64>(&cfg, 5).unwrap();
        let x = random_batch(2, 1, 16, 6);
        let y = net.forward_batch(&x, &[3, 7]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_preserved_across_config_sweep() {
        for size in [32usize, 64] {
            for depth in [2usize, 3] {
                let cfg = ScoreNetConfig {
                    image_size: size,
                    base_channels: 8,
                    channel_multipliers: (0..depth).map(|i| 1 << i).collect(),
                    num_res_blocks: 1,
                    attention_resolutions: vec![size >> (depth - 1)],
                    in_channels: 2,
                    time_embed_dim: 16,
                };
                let net = build_score_net::<f32>(&cfg, 2).unwrap();
                let arr: ArrayD<f32> = rng::normal_array(&mut rng::stream(3, 0), &[1, 2, size, size]);
                let x: Array4<f32> = arr.into_dimensionality().unwrap();
                let y = net.forward_batch(&x, &[0]).unwrap();
                assert_eq!(y.dim(), (1, 1, size, size), "size {size} depth {depth}");
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let cfg = toy_config(16, 2);
        let mut net = build_score_net::<f64>(&cfg, 8).unwrap();
        perturb_all(&mut net);
        let x = random_batch(1, 2, 16, 9);
        let a = net.forward_batch(&x, &[5]).unwrap();
        let b = net.forward_batch(&x, &[5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_composition_does_not_change_results() {
        let cfg = toy_config(16, 1);
        let mut net = build_score_net::<f64>(&cfg, 11).unwrap();
        perturb_all(&mut net);
        let x = random_batch(3, 1, 16, 12);
        let batched = net.forward_batch(&x, &[1, 2, 3]).unwrap();
        for i in 0..3 {
            let single = x.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0));
            let y = net.forward_batch(&single, &[i + 1]).unwrap();
            assert_eq!(
                y.index_axis(Axis(0), 0),
                batched.index_axis(Axis(0), i),
                "sample {i} differs between batched and single"
            );
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let cfg = toy_config(16, 2);
        let net = build_score_net::<f64>(&cfg, 1).unwrap();
        let x = random_batch(1, 1, 16, 13);
        assert!(matches!(net.forward_batch(&x, &[0]), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn unconditional_predict_eps_shape() {
        let cfg = toy_config(16, 1);
        let mut net = build_score_net::<f64>(&cfg, 14).unwrap();
        perturb_all(&mut net);
        let arr: ArrayD<f64> = rng::normal_array(&mut rng::stream(15, 0), &[16, 16]);
        let xt: Array2<f64> = arr.into_dimensionality().unwrap();
        let cond = ConditioningBundle::unconditional();
        let eps = net.predict_eps(xt.view(), 3, &cond).unwrap();
        assert_eq!(eps.dim(), (16, 16));
        let again = net.predict_eps(xt.view(), 3, &cond).unwrap();
        assert_eq!(eps, again);
    }

    #[test]
    fn conditioning_bundle_rules() {
        let plane = ImageVolume::from_plane(Array2::<f32>::zeros((8, 8)));
        let ok = ConditioningBundle {
            mode: ConditioningMode::Pet,
            noisy: Some(plane.clone()),
            prior: None,
            slice_context: 0,
        };
        assert!(ok.validate().is_ok());
        let missing = ConditioningBundle {
            mode: ConditioningMode::PetMr,
            noisy: Some(plane.clone()),
            prior: None,
            slice_context: 0,
        };
        assert!(missing.validate().is_err());
        // MrPetCon never exposes the noisy image as a channel
        let con = ConditioningBundle {
            mode: ConditioningMode::MrPetCon,
            noisy: Some(plane.clone()),
            prior: Some(plane.clone()),
            slice_context: 0,
        };
        assert_eq!(con.channels::<f32>().unwrap().len(), 1);
        // 2.5D: a 3-plane stack with one neighbor per side
        let stack = ImageVolume::new(ndarray::Array3::<f32>::zeros((3, 8, 8)));
        let stacked = ConditioningBundle {
            mode: ConditioningMode::Mr,
            noisy: None,
            prior: Some(stack),
            slice_context: 1,
        };
        assert_eq!(stacked.channels::<f32>().unwrap().len(), 3);
        // insufficient planes for the requested context
        let thin = ConditioningBundle {
            mode: ConditioningMode::Mr,
            noisy: None,
            prior: Some(plane),
            slice_context: 1,
        };
        assert!(thin.channels::<f32>().is_err());
    }

    #[test]
    fn net_gradients_match_finite_differences() {
        // whole-net directional derivative in f64 on a 16x16 toy config
        let cfg = toy_config(16, 2);
        let mut net = build_score_net::<f64>(&cfg, 21).unwrap();
        perturb_all(&mut net);
        let x = random_batch(2, 2, 16, 22);
        let target: Array4<f64> = {
            let arr: ArrayD<f64> = rng::normal_array(&mut rng::stream(23, 0), &[2, 1, 16, 16]);
            arr.into_dimensionality().unwrap()
        };
        let loss = |net: &ScoreNet<f64>| -> f64 {
            let y = net.forward_batch(&x, &[1, 9]).unwrap();
            y.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
        };
        let n_elems = 2.0 * 16.0 * 16.0;
        let (_, grads) = net
            .forward_backward_batch(&x, &[1, 9], |i, out| {
                let t = target.index_axis(Axis(0), i);
                ndarray::Zip::from(out).and(&t).map_collect(|&o, &tv| 2.0 * (o - tv) / n_elems)
            })
            .unwrap();
        // random direction over all parameters
        let dir: Vec<ArrayD<f64>> = net
            .params
            .arrays()
            .iter()
            .enumerate()
            .map(|(i, a)| rng::normal_array(&mut rng::stream(24 + i as u64, 0), a.shape()))
            .collect();
        let analytic: f64 = grads
            .arrays()
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.iter().zip(d.iter()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let eps = 1e-5;
        let shift = |net: &mut ScoreNet<f64>, sign: f64| {
            for (p, d) in net.params.arrays_mut().iter_mut().zip(&dir) {
                ndarray::Zip::from(p).and(d).for_each(|p, &d| *p += sign * eps * d);
            }
        };
        shift(&mut net, 1.0);
        let up = loss(&net);
        shift(&mut net, -2.0);
        let down = loss(&net);
        shift(&mut net, 1.0);
        let numeric = (up - down) / (2.0 * eps);
        let rel = ((numeric - analytic) / analytic.abs().max(1e-12)).abs();
        assert!(rel < 1e-3, "directional derivative mismatch: fd {numeric} vs analytic {analytic} (rel {rel})");
    }

    #[test]
    fn time_embedding_changes_output() {
        let cfg = toy_config(16, 1);
        let mut net = build_score_net::<f64>(&cfg, 31).unwrap();
        perturb_all(&mut net);
        let x = random_batch(1, 1, 16, 32);
        let y1 = net.forward_batch(&x, &[1]).unwrap();
        let y2 = net.forward_batch(&x, &[14]).unwrap();
        let mad: f64 = y1.iter().zip(y2.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / y1.len() as f64;
        assert!(mad > 0.0, "time conditioning is degenerate");
    }

    #[test]
    fn untimed_variant_ignores_time_and_drops_params() {
        let cfg = toy_config(16, 1);
        let timed = ScoreNet::<f64>::build(&cfg, 41, true).unwrap();
        let mut untimed = ScoreNet::<f64>::build(&cfg, 41, false).unwrap();
        assert!(untimed.param_count() < timed.param_count());
        perturb_all(&mut untimed);
        let x = random_batch(1, 1, 16, 42);
        let y1 = untimed.forward_batch(&x, &[0]).unwrap();
        let y2 = untimed.forward_batch(&x, &[13]).unwrap();
        assert_eq!(y1, y2);
    }

    /// Give every zero-initialized parameter a value so gradients flow in
    /// tests.
    pub(crate) fn perturb_all<F: Scalar>(net: &mut ScoreNet<F>) {
        let mut r = rng::stream(0xfeed, 7);
        for a in net.params.arrays_mut() {
            let d: ArrayD<F> = rng::normal_array(&mut r, a.shape());
            ndarray::Zip::from(a).and(&d).for_each(|a, &d| {
                *a += crate::nn::sc::<F>(0.05) * d;
            });
        }
    }
}
