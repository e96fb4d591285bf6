//! Full reverse-process denoisers: the conditioned variants, the
//! measurement-guided variant, multiple-realization sampling, and
//! uncertainty maps.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointKind, ScoreNetCheckpoint};
use crate::diffusion::{ancestral_step, analytic_eps_gaussian, guided_step, GuidanceSign};
use crate::error::{Error, Result};
use crate::image::{content_hash, gaussian_smooth, ImageVolume};
use crate::nn::Scalar;
use crate::rng;
use crate::schedule::Schedule;
use crate::score::{ConditioningBundle, ConditioningMode, ScoreNet};

/// Batched eps source driving a reverse chain. Latents are (B, 1, H, W).
pub trait EpsSource<F: Scalar>: Sync {
    fn eps(&self, latents: &Array4<F>, t: usize) -> Result<Array4<F>>;
}

/// A score network with frozen conditioning channels, shared by all chains.
pub struct ConditionedNet<'a, F: Scalar> {
    net: &'a ScoreNet<F>,
    cond: Vec<Array2<F>>,
}

impl<'a, F: Scalar> ConditionedNet<'a, F> {
    pub fn new(net: &'a ScoreNet<F>, cond: Vec<Array2<F>>) -> Result<Self> {
        if 1 + cond.len() != net.config.in_channels {
            return Err(Error::ChannelMismatch {
                expected: net.config.in_channels,
                got: 1 + cond.len(),
            });
        }
        Ok(Self { net, cond })
    }
}

impl<F: Scalar> EpsSource<F> for ConditionedNet<'_, F> {
    fn eps(&self, latents: &Array4<F>, t: usize) -> Result<Array4<F>> {
        let (b, _, h, w) = latents.dim();
        let mut x = Array4::<F>::zeros((b, self.net.config.in_channels, h, w));
        for bi in 0..b {
            x.slice_mut(ndarray::s![bi, 0, .., ..])
                .assign(&latents.slice(ndarray::s![bi, 0, .., ..]));
            for (ci, plane) in self.cond.iter().enumerate() {
                x.slice_mut(ndarray::s![bi, 1 + ci, .., ..]).assign(plane);
            }
        }
        self.net.forward_batch(&x, &vec![t; b])
    }
}

/// Closed-form eps for the Gaussian toy distribution; test oracle for the
/// whole sampling path.
pub struct AnalyticGaussianSource {
    pub mu0: f64,
    pub var0: f64,
    pub schedule: Schedule,
}

impl<F: Scalar> EpsSource<F> for AnalyticGaussianSource {
    fn eps(&self, latents: &Array4<F>, t: usize) -> Result<Array4<F>> {
        let dyn_latents: ArrayD<F> = latents.clone().into_dyn();
        let eps = analytic_eps_gaussian(&dyn_latents, t, self.mu0, self.var0, &self.schedule)?;
        Ok(eps.into_dimensionality().unwrap())
    }
}

/// Measurement-consistency settings for the guided variant. Operates in the
/// model's normalized intensity domain.
#[derive(Debug, Clone)]
pub struct ChainGuidance<F> {
    pub x_noisy: Array2<F>,
    pub sigma_d: f64,
    pub sign: GuidanceSign,
}

/// Options for a reverse-chain run.
#[derive(Debug, Clone)]
pub struct ChainOptions<F> {
    /// Clamp the implied x0 to this range each step (off by default).
    pub clamp_x0: Option<(F, F)>,
}

impl<F> Default for ChainOptions<F> {
    fn default() -> Self {
        Self { clamp_x0: None }
    }
}

/// Run reverse chains for the given chain indices in lockstep.
///
/// Chain `i` draws all of its noise from a stream derived from
/// (seed, indices[i]), so results are independent of how chains are grouped
/// into batches.
pub fn run_reverse_chain_indexed<F: Scalar>(
    source: &impl EpsSource<F>,
    sched: &Schedule,
    shape: (usize, usize),
    seed: u64,
    indices: &[u64],
    guidance: Option<&ChainGuidance<F>>,
    options: &ChainOptions<F>,
) -> Result<Vec<Array2<F>>> {
    if indices.is_empty() {
        return Err(Error::param("indices", "need at least one chain"));
    }
    if let Some(g) = guidance {
        if !g.sigma_d.is_finite() || g.sigma_d <= 0.0 {
            return Err(Error::param("sigma_d", "must be finite and > 0"));
        }
        if g.x_noisy.dim() != shape {
            return Err(Error::shape(&[shape.0, shape.1], &[g.x_noisy.dim().0, g.x_noisy.dim().1]));
        }
    }
    let (h, w) = shape;
    let t_steps = sched.steps();
    let mut streams: Vec<_> = indices.iter().map(|&i| rng::chain_stream(seed, i)).collect();
    let mut latents: Vec<ArrayD<F>> = streams
        .iter_mut()
        .map(|r| rng::normal_array::<F>(r, &[h, w]))
        .collect();
    let noisy_dyn: Option<ArrayD<F>> = guidance.map(|g| g.x_noisy.clone().into_dyn());

    for t in (0..t_steps).rev() {
        let mut batch = Array4::<F>::zeros((latents.len(), 1, h, w));
        for (bi, l) in latents.iter().enumerate() {
            batch
                .slice_mut(ndarray::s![bi, 0, .., ..])
                .assign(&l.view().into_dimensionality::<ndarray::Ix2>().unwrap());
        }
        let eps_hat = source.eps(&batch, t)?;
        if eps_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { context: "eps prediction".into(), step: t });
        }
        // z is forced to zero at the final step
        let zs: Vec<ArrayD<F>> = streams
            .iter_mut()
            .map(|r| {
                if t == 0 {
                    ArrayD::zeros(ndarray::IxDyn(&[h, w]))
                } else {
                    rng::normal_array::<F>(r, &[h, w])
                }
            })
            .collect();
        latents = latents
            .par_iter()
            .zip(zs.par_iter())
            .enumerate()
            .map(|(bi, (xt, z))| {
                let mut eps_b: ArrayD<F> = eps_hat
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), 0)
                    .to_owned()
                    .into_dyn();
                if let Some((lo, hi)) = options.clamp_x0 {
                    let x0 = crate::diffusion::predict_x0_from_eps(xt, &eps_b, t, sched)?;
                    let x0c = x0.mapv(|v| if v < lo { lo } else if v > hi { hi } else { v });
                    let a = F::from_f64(sched.alpha_bar(t).sqrt()).unwrap();
                    let binv = F::from_f64(1.0 / (1.0 - sched.alpha_bar(t)).sqrt()).unwrap();
                    eps_b = ndarray::Zip::from(xt).and(&x0c).map_collect(|&y, &x0v| (y - a * x0v) * binv);
                }
                let next = match (guidance, &noisy_dyn) {
                    (Some(g), Some(noisy)) => {
                        guided_step(xt, &eps_b, t, z, noisy, g.sigma_d, g.sign, sched)?
                    }
                    _ => ancestral_step(xt, &eps_b, t, z, sched)?,
                };
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical { context: "reverse chain".into(), step: t });
                }
                Ok(next)
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(latents
        .into_iter()
        .map(|l| l.into_dimensionality::<ndarray::Ix2>().unwrap())
        .collect())
}

/// Run `n_chains` reverse chains with indices 0..n.
pub fn run_reverse_chain<F: Scalar>(
    source: &impl EpsSource<F>,
    sched: &Schedule,
    shape: (usize, usize),
    seed: u64,
    n_chains: usize,
    guidance: Option<&ChainGuidance<F>>,
    options: &ChainOptions<F>,
) -> Result<Vec<Array2<F>>> {
    let indices: Vec<u64> = (0..n_chains as u64).collect();
    run_reverse_chain_indexed(source, sched, shape, seed, &indices, guidance, options)
}

/// Voxelwise sample standard deviation (divisor n-1); a single realization
/// yields a zero map.
pub fn uncertainty_map(realizations: &[Array2<f32>]) -> Result<Array2<f32>> {
    if realizations.is_empty() {
        return Err(Error::param("realizations", "need at least one"));
    }
    let dim = realizations[0].dim();
    for r in realizations {
        if r.dim() != dim {
            return Err(Error::shape(&[dim.0, dim.1], &[r.dim().0, r.dim().1]));
        }
    }
    let n = realizations.len();
    if n == 1 {
        return Ok(Array2::zeros(dim));
    }
    let mut mean = Array2::<f64>::zeros(dim);
    for r in realizations {
        for (idx, &v) in r.indexed_iter() {
            mean[idx] += v as f64;
        }
    }
    mean.mapv_inplace(|v| v / n as f64);
    let mut var = Array2::<f64>::zeros(dim);
    for r in realizations {
        for (idx, &v) in r.indexed_iter() {
            let d = v as f64 - mean[idx];
            var[idx] += d * d;
        }
    }
    Ok(Array2::from_shape_fn(dim, |idx| (var[idx] / (n - 1) as f64).sqrt() as f32))
}

/// Voxelwise mean of realizations.
pub fn mean_map(realizations: &[Array2<f32>]) -> Result<Array2<f32>> {
    if realizations.is_empty() {
        return Err(Error::param("realizations", "need at least one"));
    }
    let dim = realizations[0].dim();
    let n = realizations.len() as f64;
    let mut mean = Array2::<f64>::zeros(dim);
    for r in realizations {
        for (idx, &v) in r.indexed_iter() {
            mean[idx] += v as f64;
        }
    }
    Ok(mean.mapv(|v| (v / n) as f32))
}

/// Robust noise-level estimate in the normalized domain: scaled median
/// absolute deviation of the (noisy - smoothed) residual.
pub fn estimate_sigma_d(noisy_normalized: ArrayView2<'_, f32>) -> f64 {
    let smooth = gaussian_smooth(noisy_normalized, 1.0);
    let mut residuals: Vec<f64> = noisy_normalized
        .iter()
        .zip(smooth.iter())
        .map(|(&a, &b)| (a - b) as f64)
        .collect();
    residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = residuals[residuals.len() / 2];
    let mut dev: Vec<f64> = residuals.iter().map(|r| (r - median).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1.4826 * dev[dev.len() / 2]).max(1e-6)
}

/// One denoising job.
#[derive(Debug, Clone)]
pub struct DenoiseRequest {
    pub mode: ConditioningMode,
    pub noisy: ImageVolume,
    pub prior: Option<ImageVolume>,
    pub n_realizations: usize,
    pub seed: u64,
    /// Measurement noise level for the guided variant, in the normalized
    /// domain; None lets the robust estimator pick it.
    pub sigma_d: Option<f64>,
    pub guidance_sign: GuidanceSign,
    /// Clamp the implied x0 to the normalization range [-1, 1] each step.
    /// Off by default; stabilizes short schedules and undertrained nets.
    pub clamp_x0: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: ConditioningMode,
    pub seed: u64,
    pub chain_indices: Vec<u64>,
    pub sigma_d: Option<f64>,
    pub guidance_sign: GuidanceSign,
    pub schedule_steps: usize,
    pub checkpoint_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    pub realizations: Vec<Array2<f32>>,
    pub mean: Array2<f32>,
    pub uncertainty: Array2<f32>,
    pub provenance: Provenance,
}

fn mode_compatible(request: ConditioningMode, trained: ConditioningMode) -> bool {
    request == trained
        || matches!(
            (request, trained),
            (ConditioningMode::Mr, ConditioningMode::MrPetCon)
                | (ConditioningMode::MrPetCon, ConditioningMode::Mr)
        )
}

/// Fingerprint over parameter bytes, for provenance sidecars.
pub fn checkpoint_fingerprint(ckpt: &ScoreNetCheckpoint) -> String {
    let mut bytes = Vec::new();
    for (_, arr) in ckpt.params.iter() {
        for v in arr.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    content_hash(&bytes)
}

/// Run the full reverse process per realization, starting from standard
/// normal noise. Inputs are normalized with the checkpoint constants,
/// outputs are denormalized back to input units.
pub fn denoise(req: &DenoiseRequest, ckpt: &ScoreNetCheckpoint) -> Result<DenoiseResult> {
    if req.n_realizations < 1 {
        return Err(Error::param("n_realizations", "must be >= 1"));
    }
    if req.mode == ConditioningMode::None {
        return Err(Error::param("mode", "denoise requires a conditioned mode"));
    }
    if ckpt.kind != CheckpointKind::Score {
        return Err(Error::ModeMismatch {
            requested: req.mode.label().into(),
            available: "supervised baseline checkpoint".into(),
        });
    }
    if !mode_compatible(req.mode, ckpt.mode) {
        return Err(Error::ModeMismatch {
            requested: req.mode.label().into(),
            available: ckpt.mode.label().into(),
        });
    }
    if req.mode == ConditioningMode::MrPetCon {
        if let Some(sd) = req.sigma_d {
            if !sd.is_finite() || sd <= 0.0 {
                return Err(Error::param("sigma_d", "must be finite and > 0"));
            }
        }
    }

    let norm = &ckpt.normalization;
    let normalize_vol = |vol: &ImageVolume, pet: bool| -> ImageVolume {
        let mut v = vol.clone();
        v.data.mapv_inplace(|x| if pet { norm.normalize_pet(x) } else { norm.normalize_mr(x) });
        v.unit = crate::image::IntensityUnit::Normalized;
        v
    };
    let noisy_n = normalize_vol(&req.noisy, true);
    let prior_n = req.prior.as_ref().map(|p| normalize_vol(p, false));

    let bundle = ConditioningBundle {
        mode: req.mode,
        noisy: Some(noisy_n.clone()),
        prior: prior_n,
        slice_context: ckpt.slice_context,
    };
    let cond = bundle.channels::<f32>()?;

    let net = ckpt.instantiate()?;
    let source = ConditionedNet::new(&net, cond)?;

    let shape = (req.noisy.height(), req.noisy.width());
    let guidance = if req.mode == ConditioningMode::MrPetCon {
        let noisy_plane = noisy_n.center_plane().to_owned();
        let sigma_d = match req.sigma_d {
            Some(sd) => sd,
            None => estimate_sigma_d(noisy_plane.view()),
        };
        Some(ChainGuidance { x_noisy: noisy_plane, sigma_d, sign: req.guidance_sign })
    } else {
        None
    };

    let sched = ckpt.schedule.as_ref().ok_or_else(|| Error::Format {
        path: "checkpoint".into(),
        reason: "diffusion checkpoint lacks a schedule".into(),
    })?;
    let indices: Vec<u64> = (0..req.n_realizations as u64).collect();
    let options = ChainOptions {
        clamp_x0: req.clamp_x0.then_some((-1.0f32, 1.0f32)),
    };
    let latents = run_reverse_chain_indexed(
        &source,
        sched,
        shape,
        req.seed,
        &indices,
        guidance.as_ref(),
        &options,
    )?;
    let realizations: Vec<Array2<f32>> = latents
        .into_iter()
        .map(|l| l.mapv(|v| norm.denormalize_pet(v)))
        .collect();
    let mean = mean_map(&realizations)?;
    let uncertainty = uncertainty_map(&realizations)?;
    Ok(DenoiseResult {
        mean,
        uncertainty,
        provenance: Provenance {
            mode: req.mode,
            seed: req.seed,
            chain_indices: indices,
            sigma_d: guidance.as_ref().map(|g| g.sigma_d),
            guidance_sign: req.guidance_sign,
            schedule_steps: sched.steps(),
            checkpoint_fingerprint: checkpoint_fingerprint(ckpt),
        },
        realizations,
    })
}
