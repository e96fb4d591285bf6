//! eps-prediction training: simple uniform-weight loss, adaptive-moment
//! optimizer, parameter averaging, best-validation checkpointing.

use std::io::Write;

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointKind, Normalization, ScoreNetCheckpoint, TrainMeta};
use crate::error::{Error, Result};
use crate::nn::adam::{Adam, Ema};
use crate::nn::Scalar;
use crate::rng;
use crate::schedule::Schedule;
use crate::score::{ConditioningMode, ScoreNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    UnitRange,
    Zscore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// None disables parameter averaging; sampling then uses raw weights.
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub normalization: NormKind,
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            learning_rate: 1e-4,
            ema_decay: Some(0.999),
            seed: 0,
            normalization: NormKind::UnitRange,
            val_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::param("learning_rate", "must be finite and > 0"));
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::param("ema_decay", "must lie in (0, 1)"));
            }
        }
        if self.val_every < 1 {
            return Err(Error::param("val_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// One training example in raw intensity units.
#[derive(Debug, Clone)]
pub struct TrainItem<F> {
    pub clean: Array2<F>,
    pub noisy: Option<Array2<F>>,
    pub prior: Option<Array2<F>>,
}

impl TrainItem<f32> {
    pub fn normalized(&self, norm: &Normalization) -> TrainItem<f32> {
        TrainItem {
            clean: self.clean.mapv(|v| norm.normalize_pet(v)),
            noisy: self.noisy.as_ref().map(|a| a.mapv(|v| norm.normalize_pet(v))),
            prior: self.prior.as_ref().map(|a| a.mapv(|v| norm.normalize_mr(v))),
        }
    }
}

/// Conditioning planes of one item under `mode` (no latent channel).
pub fn cond_planes<'a, F>(item: &'a TrainItem<F>, mode: ConditioningMode) -> Result<Vec<&'a Array2<F>>> {
    let need = |opt: &'a Option<Array2<F>>, what: &'static str| {
        opt.as_ref().ok_or_else(|| Error::param("train_set", format!("mode requires {what} images")))
    };
    Ok(match mode {
        ConditioningMode::Pet => vec![need(&item.noisy, "noisy")?],
        ConditioningMode::Mr | ConditioningMode::MrPetCon => vec![need(&item.prior, "prior")?],
        ConditioningMode::PetMr => vec![need(&item.noisy, "noisy")?, need(&item.prior, "prior")?],
        ConditioningMode::None => vec![],
    })
}

/// Dataset-level normalization constants.
pub fn fit_normalization(items: &[TrainItem<f32>], kind: NormKind) -> Result<Normalization> {
    if items.is_empty() {
        return Err(Error::param("train_set", "must be non-empty"));
    }
    // the activity constants describe the x0 domain, so they are fitted on
    // the clean images; conditioning channels normalized with them may
    // slightly exceed the nominal range
    let pet_values = || items.iter().flat_map(|it| it.clean.iter().copied());
    let mr_values = || items.iter().flat_map(|it| it.prior.iter().flat_map(|a| a.iter().copied()));
    match kind {
        NormKind::UnitRange => {
            let pet_max = pet_values().fold(0.0f32, f32::max) as f64;
            let mr_max = mr_values().fold(0.0f32, f32::max) as f64;
            if pet_max <= 0.0 {
                return Err(Error::DegenerateData("all-zero activity in training set".into()));
            }
            Ok(Normalization::UnitRange { pet_max, mr_max: if mr_max > 0.0 { mr_max } else { 1.0 } })
        }
        NormKind::Zscore => {
            let stats = |mut it: Box<dyn Iterator<Item = f32> + '_>| -> (f64, f64, usize) {
                let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
                for v in &mut it {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                    n += 1;
                }
                (s, s2, n)
            };
            let (s, s2, n) = stats(Box::new(pet_values()));
            if n == 0 {
                return Err(Error::DegenerateData("empty training images".into()));
            }
            let pet_mean = s / n as f64;
            let pet_std = (s2 / n as f64 - pet_mean * pet_mean).sqrt().max(1e-12);
            let (ms, ms2, mn) = stats(Box::new(mr_values()));
            let (mr_mean, mr_std) = if mn > 0 {
                let m = ms / mn as f64;
                (m, (ms2 / mn as f64 - m * m).sqrt().max(1e-12))
            } else {
                (0.0, 1.0)
            };
            Ok(Normalization::Zscore { pet_mean, pet_std, mr_mean, mr_std })
        }
    }
}

/// A drawn diffusion training batch: network input (latent + conditioning),
/// per-sample timesteps, and the noise targets.
pub struct DrawnBatch<F> {
    pub x: Array4<F>,
    pub ts: Vec<usize>,
    pub eps: Array4<F>,
}

/// Draw timesteps and noise for the given (normalized) items in index order:
/// per sample, first t then the noise plane. Deterministic given the rng
/// state.
pub fn draw_batch<F: Scalar>(
    items: &[&TrainItem<F>],
    mode: ConditioningMode,
    sched: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<DrawnBatch<F>> {
    if items.is_empty() {
        return Err(Error::param("batch", "must be non-empty"));
    }
    let (h, w) = items[0].clean.dim();
    let n_cond = cond_planes(items[0], mode)?.len();
    let in_ch = 1 + n_cond;
    let b = items.len();
    let mut x = Array4::<F>::zeros((b, in_ch, h, w));
    let mut eps = Array4::<F>::zeros((b, 1, h, w));
    let mut ts = Vec::with_capacity(b);
    for (bi, item) in items.iter().enumerate() {
        if item.clean.dim() != (h, w) {
            return Err(Error::shape(&[h, w], &[item.clean.dim().0, item.clean.dim().1]));
        }
        let t = rng.random_range(0..sched.steps());
        ts.push(t);
        let e: ndarray::ArrayD<F> = rng::normal_array(rng, &[h, w]);
        let e = e.into_dimensionality::<ndarray::Ix2>().unwrap();
        let a = F::from_f64(sched.alpha_bar(t).sqrt()).unwrap();
        let bcoef = F::from_f64((1.0 - sched.alpha_bar(t)).sqrt()).unwrap();
        {
            let mut latent = x.slice_mut(ndarray::s![bi, 0, .., ..]);
            ndarray::Zip::from(&mut latent)
                .and(&item.clean)
                .and(&e)
                .for_each(|l, &x0, &ev| *l = a * x0 + bcoef * ev);
        }
        for (ci, plane) in cond_planes(item, mode)?.into_iter().enumerate() {
            x.slice_mut(ndarray::s![bi, 1 + ci, .., ..]).assign(plane);
        }
        eps.slice_mut(ndarray::s![bi, 0, .., ..]).assign(&e);
    }
    Ok(DrawnBatch { x, ts, eps })
}

/// Batched eps prediction, the surface `ddpm_loss` evaluates.
pub trait BatchEps<F: Scalar> {
    fn eps_batch(&self, x: &Array4<F>, ts: &[usize]) -> Result<Array4<F>>;
}

impl<F: Scalar> BatchEps<F> for ScoreNet<F> {
    fn eps_batch(&self, x: &Array4<F>, ts: &[usize]) -> Result<Array4<F>> {
        self.forward_batch(x, ts)
    }
}

/// Simple uniform-weight objective: mean squared error between the drawn
/// noise and the prediction, averaged over batch and pixels.
pub fn ddpm_loss<F: Scalar>(
    predictor: &impl BatchEps<F>,
    x0_batch: &[&TrainItem<F>],
    mode: ConditioningMode,
    sched: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let drawn = draw_batch(x0_batch, mode, sched, rng)?;
    let pred = predictor.eps_batch(&drawn.x, &drawn.ts)?;
    let mut acc = 0.0f64;
    for (p, e) in pred.iter().zip(drawn.eps.iter()) {
        let d = (*p - *e).to_f64().unwrap();
        acc += d * d;
    }
    Ok(acc / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    /// None at step 0 (no optimizer step has run yet).
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

/// Write the training curve as append-only `step, train_loss, val_loss`
/// lines.
pub fn write_curve(curve: &[CurvePoint], out: &mut dyn Write) -> Result<()> {
    for p in curve {
        match p.train_loss {
            Some(tl) => writeln!(out, "{}, {:.6e}, {:.6e}", p.step, tl, p.val_loss)?,
            None => writeln!(out, "{}, nan, {:.6e}", p.step, p.val_loss)?,
        }
    }
    Ok(())
}

/// Train the eps predictor. Items are in raw intensity units; the fitted
/// normalization constants are stored in the returned checkpoint. The
/// checkpoint carries the best-validation-loss parameters (averaged weights
/// when EMA is enabled).
pub fn train(
    net: ScoreNet<f32>,
    mode: ConditioningMode,
    train_set: &[TrainItem<f32>],
    val_set: &[TrainItem<f32>],
    cfg: &TrainConfig,
    sched: &Schedule,
) -> Result<(ScoreNetCheckpoint, Vec<CurvePoint>)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::param("train_set/val_set", "datasets must be non-empty"));
    }
    let mut net = net;
    let norm = fit_normalization(train_set, cfg.normalization)?;
    let train_items: Vec<TrainItem<f32>> = train_set.iter().map(|it| it.normalized(&norm)).collect();
    let val_items: Vec<TrainItem<f32>> = val_set.iter().map(|it| it.normalized(&norm)).collect();

    let mut opt = Adam::new(&net.params, cfg.learning_rate);
    let mut ema = cfg.ema_decay.map(|d| Ema::new(&net.params, d));
    let mut rng = rng::stream(cfg.seed, rng::streams::TRAIN);

    let validate = |net: &ScoreNet<f32>| -> Result<f64> {
        // fresh fixed stream every time: validation losses are comparable
        // across checkpoints
        let mut vrng = rng::stream(cfg.seed, rng::streams::TRAIN ^ 0x5641_4c49_4441_5445);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in val_items.chunks(cfg.batch_size) {
            let refs: Vec<&TrainItem<f32>> = chunk.iter().collect();
            total += ddpm_loss(net, &refs, mode, sched, &mut vrng)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    };

    let snapshot = |net: &ScoreNet<f32>, ema: &Option<Ema<f32>>| match ema {
        Some(e) => e.shadow.clone(),
        None => net.params.clone(),
    };
    let eval_with = |net: &mut ScoreNet<f32>, params: &crate::nn::ParamSet<f32>| -> Result<f64> {
        let live = net.params.clone();
        for (dst, src) in net.params.arrays_mut().iter_mut().zip(params.arrays()) {
            dst.assign(src);
        }
        let loss = validate(net);
        for (dst, src) in net.params.arrays_mut().iter_mut().zip(live.arrays()) {
            dst.assign(src);
        }
        loss
    };

    let mut curve = Vec::new();
    let initial_params = snapshot(&net, &ema);
    let mut best_val = eval_with(&mut net, &initial_params)?;
    let mut best_params = initial_params;
    let mut best_step = 0usize;
    curve.push(CurvePoint { step: 0, train_loss: None, val_loss: best_val });

    let mut running = 0.0f64;
    let mut running_n = 0usize;
    for step in 1..=cfg.steps {
        let refs: Vec<&TrainItem<f32>> = (0..cfg.batch_size)
            .map(|_| &train_items[rng.random_range(0..train_items.len())])
            .collect();
        let drawn = draw_batch(&refs, mode, sched, &mut rng)?;
        let n_elems = (drawn.eps.len()) as f32;
        let eps = &drawn.eps;
        let (pred, grads) = net.forward_backward_batch(&drawn.x, &drawn.ts, |i, out| {
            let target = eps.index_axis(Axis(0), i);
            ndarray::Zip::from(out).and(&target).map_collect(|&o, &e| 2.0 * (o - e) / n_elems)
        })?;
        let mut loss = 0.0f64;
        for (p, e) in pred.iter().zip(drawn.eps.iter()) {
            let d = (*p - *e) as f64;
            loss += d * d;
        }
        loss /= pred.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical { context: "training loss".into(), step });
        }
        opt.step(&mut net.params, &grads);
        if let Some(e) = ema.as_mut() {
            e.update(&net.params);
        }
        running += loss;
        running_n += 1;

        if step % cfg.val_every == 0 || step == cfg.steps {
            let candidate = snapshot(&net, &ema);
            let val_loss = eval_with(&mut net, &candidate)?;
            if !val_loss.is_finite() {
                return Err(Error::Numerical { context: "validation loss".into(), step });
            }
            curve.push(CurvePoint { step, train_loss: Some(running / running_n as f64), val_loss });
            running = 0.0;
            running_n = 0;
            if val_loss < best_val {
                best_val = val_loss;
                best_params = candidate;
                best_step = step;
            }
        }
    }

    let ckpt = ScoreNetCheckpoint {
        kind: CheckpointKind::Score,
        config: net.config.clone(),
        mode,
        slice_context: 0,
        time_conditioned: net.is_time_conditioned(),
        schedule: Some(sched.clone()),
        normalization: norm,
        train: TrainMeta {
            steps_run: cfg.steps,
            best_val_loss: best_val,
            best_val_step: best_step,
            seed: cfg.seed,
            ema: ema.is_some(),
        },
        params: best_params,
    };
    Ok((ckpt, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::analytic_eps_gaussian;
    use crate::schedule::{ScheduleKind, SigmaKind};
    use crate::score::{build_score_net, ScoreNetConfig};
    use ndarray::{Array2, ArrayD};

    fn toy_net(in_channels: usize, seed: u64) -> ScoreNet<f32> {
        let cfg = ScoreNetConfig {
            image_size: 16,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![],
            in_channels,
            time_embed_dim: 16,
        };
        build_score_net(&cfg, seed).unwrap()
    }

    fn constant_items(n: usize, value: f32) -> Vec<TrainItem<f32>> {
        (0..n)
            .map(|_| TrainItem {
                clean: Array2::from_elem((16, 16), value),
                noisy: Some(Array2::from_elem((16, 16), value)),
                prior: None,
            })
            .collect()
    }

    struct MockEps {
        fixed: Array4<f32>,
    }
    impl BatchEps<f32> for MockEps {
        fn eps_batch(&self, _x: &Array4<f32>, _ts: &[usize]) -> Result<Array4<f32>> {
            Ok(self.fixed.clone())
        }
    }

    #[test]
    fn perfect_predictor_zero_loss() {
        // replicate the draw to know the eps the loss will sample
        let sched = Schedule::default_linear(10).unwrap();
        let items = constant_items(2, 1.0);
        let refs: Vec<&TrainItem<f32>> = items.iter().collect();
        let mut rng = rng::stream(5, 0);
        let drawn = draw_batch(&refs, ConditioningMode::Pet, &sched, &mut rng.clone()).unwrap();
        let mock = MockEps { fixed: drawn.eps.clone() };
        let loss = ddpm_loss(&mock, &refs, ConditioningMode::Pet, &sched, &mut rng).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn zero_predictor_unit_loss() {
        // fresh nets predict exactly zero, so the loss is E||eps||^2 = 1
        let sched = Schedule::default_linear(10).unwrap();
        let items = constant_items(8, 0.5);
        let refs: Vec<&TrainItem<f32>> = items.iter().collect();
        let net = toy_net(2, 3);
        let mut total = 0.0;
        let reps = 40;
        let mut rng = rng::stream(7, 0);
        for _ in 0..reps {
            total += ddpm_loss(&net, &refs, ConditioningMode::Pet, &sched, &mut rng).unwrap();
        }
        let mean = total / reps as f64;
        // 3 SE of the chi-square mean over reps * 8 * 256 draws
        let n = (reps * 8 * 256) as f64;
        let se = (2.0 / n).sqrt() * 3.0;
        assert!((mean - 1.0).abs() < se.max(0.02), "mean loss {mean}");
        // sanity band for fresh-initialization losses
        assert!((0.5..2.0).contains(&mean));
    }

    #[test]
    fn loss_is_deterministic_given_rng_state() {
        let sched = Schedule::default_linear(10).unwrap();
        let items = constant_items(3, 0.7);
        let refs: Vec<&TrainItem<f32>> = items.iter().collect();
        let net = toy_net(2, 4);
        let a = ddpm_loss(&net, &refs, ConditioningMode::Pet, &sched, &mut rng::stream(11, 2)).unwrap();
        let b = ddpm_loss(&net, &refs, ConditioningMode::Pet, &sched, &mut rng::stream(11, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_batch_rejected() {
        let sched = Schedule::default_linear(10).unwrap();
        let net = toy_net(2, 4);
        let refs: Vec<&TrainItem<f32>> = vec![];
        assert!(ddpm_loss(&net, &refs, ConditioningMode::Pet, &sched, &mut rng::stream(1, 1)).is_err());
    }

    #[test]
    fn smoke_training_reduces_validation_loss() {
        let sched = Schedule::default_linear(50).unwrap();
        let items = constant_items(8, 2.0);
        let cfg = TrainConfig {
            steps: 200,
            learning_rate: 2e-3,
            val_every: 50,
            seed: 9,
            ..Default::default()
        };
        let net = toy_net(2, 9);
        let (ckpt, curve) = train(net, ConditioningMode::Pet, &items, &items[..2], &cfg, &sched).unwrap();
        let initial = curve.first().unwrap().val_loss;
        let last = curve.last().unwrap().val_loss;
        assert!(
            last < initial,
            "validation loss did not improve: {initial} -> {last}"
        );
        assert!(ckpt.train.best_val_loss <= initial);
        assert_eq!(ckpt.mode, ConditioningMode::Pet);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let sched = Schedule::default_linear(10).unwrap();
        let items = constant_items(4, 1.0);
        let cfg = TrainConfig { steps: 0, seed: 13, ..Default::default() };
        let net = toy_net(2, 13);
        let reference = build_score_net::<f32>(&net.config.clone(), 13).unwrap();
        let (ckpt, _) = train(net, ConditioningMode::Pet, &items, &items, &cfg, &sched).unwrap();
        for (a, b) in ckpt.params.arrays().iter().zip(reference.params.arrays()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let sched = Schedule::default_linear(20).unwrap();
        let items = constant_items(6, 1.5);
        let cfg = TrainConfig { steps: 30, val_every: 10, seed: 21, learning_rate: 1e-3, ..Default::default() };
        let run = || {
            let net = toy_net(2, 21);
            let (ckpt, curve) = train(net, ConditioningMode::Pet, &items, &items[..2], &cfg, &sched).unwrap();
            (ckpt.train.best_val_loss, curve)
        };
        let (va, ca) = run();
        let (vb, cb) = run();
        assert_eq!(va, vb);
        assert_eq!(ca, cb);
    }

    #[test]
    fn curve_log_format() {
        let curve = vec![
            CurvePoint { step: 0, train_loss: None, val_loss: 1.0 },
            CurvePoint { step: 100, train_loss: Some(0.5), val_loss: 0.6 },
        ];
        let mut buf = Vec::new();
        write_curve(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().count() == 2);
        assert!(text.lines().nth(1).unwrap().starts_with("100, 5.000000e-1, 6.000000e-1"));
    }

    #[test]
    fn divergent_lr_aborts_with_diagnostic() {
        let sched = Schedule::default_linear(10).unwrap();
        let items = constant_items(4, 1.0);
        // absurd learning rate forces non-finite loss quickly
        let cfg = TrainConfig { steps: 400, learning_rate: 1e18, val_every: 400, seed: 2, ..Default::default() };
        let net = toy_net(2, 2);
        match train(net, ConditioningMode::Pet, &items, &items, &cfg, &sched) {
            Err(Error::Numerical { step, .. }) => assert!(step > 0),
            Ok(_) => panic!("expected divergence"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn gaussian_toy_training_approaches_analytic_predictor() {
        // train an unconditional net on iid normal images; the learned eps
        // should drift toward the closed-form conditional expectation
        let mu0 = 0.3f64;
        let var0 = 0.05f64;
        let sched = Schedule::new(40, ScheduleKind::Linear, 2e-3, 0.25, SigmaKind::PosteriorVariance).unwrap();
        let mut data_rng = rng::stream(31, 0);
        let make_items = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<TrainItem<f32>> {
            (0..n)
                .map(|_| {
                    let arr: ArrayD<f64> = rng::normal_array(rng, &[16, 16]);
                    TrainItem {
                        clean: arr.mapv(|z| (mu0 + var0.sqrt() * z) as f32).into_dimensionality().unwrap(),
                        noisy: None,
                        prior: None,
                    }
                })
                .collect()
        };
        let train_items = make_items(&mut data_rng, 48);
        let val_items = make_items(&mut data_rng, 8);
        let cfg = TrainConfig {
            steps: 600,
            learning_rate: 2e-3,
            val_every: 150,
            seed: 31,
            normalization: NormKind::Zscore,
            ..Default::default()
        };
        let net = toy_net(1, 31);
        let norm = fit_normalization(&train_items, NormKind::Zscore).unwrap();
        let (ckpt, _) = train(net, ConditioningMode::None, &train_items, &val_items, &cfg, &sched).unwrap();
        let trained = ckpt.instantiate().unwrap();
        let fresh = toy_net(1, 31);

        // normalized-domain toy distribution parameters
        let (mu_n, var_n) = match norm {
            Normalization::Zscore { pet_mean, pet_std, .. } => {
                ((mu0 - pet_mean) / pet_std, var0 / (pet_std * pet_std))
            }
            _ => unreachable!(),
        };
        let mad = |net: &ScoreNet<f32>| -> f64 {
            let mut total = 0.0;
            let mut count = 0usize;
            let mut r = rng::stream(77, 1);
            for &t in &[5usize, 20, 35] {
                let xt_arr: ArrayD<f64> = rng::normal_array(&mut r, &[16, 16]);
                let xt32 = xt_arr.mapv(|v| v as f32).into_dimensionality::<ndarray::Ix2>().unwrap();
                let pred = net
                    .predict_eps(xt32.view(), t, &crate::score::ConditioningBundle::unconditional())
                    .unwrap();
                let xt64 = xt32.mapv(|v| v as f64).into_dyn();
                let exact = analytic_eps_gaussian(&xt64, t, mu_n, var_n, &sched).unwrap();
                for (p, e) in pred.iter().zip(exact.iter()) {
                    total += (*p as f64 - e).abs();
                    count += 1;
                }
            }
            total / count as f64
        };
        let before = mad(&fresh);
        let after = mad(&trained);
        assert!(
            after < 0.6 * before,
            "training did not move toward the analytic predictor: {before} -> {after}"
        );
    }
}
