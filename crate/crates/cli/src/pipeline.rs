//! The experiment pipeline: generate -> train -> denoise -> evaluate ->
//! report, with per-stage caching keyed on input fingerprints.
//!
//! Every stage writes a `stage.toml` recording the fingerprint of its
//! inputs and the content hashes of its outputs. Re-running a stage whose
//! fingerprint and outputs are intact is a no-op.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ddnz_core::baselines::{self, NlmParams};
use ddnz_core::checkpoint::ScoreNetCheckpoint;
use ddnz_core::image::{content_hash, file_hash, write_atomic, ImageVolume};
use ddnz_core::infer::{self, DenoiseRequest};
use ddnz_core::phantom::{build_dataset, Dataset, DatasetSpec, LoadedItem, Split};
use ddnz_core::report::{assemble_report, EvaluationReport, MethodRun};
use ddnz_core::rng;
use ddnz_core::score::{in_channels_for, ScoreNet};
use ddnz_core::train::{self, write_curve, TrainItem};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, UnetConditioning};
use crate::error::{CliError, Result};
use crate::methods::Method;

const DENOISE_SEED_TAG: u64 = 0x444e_5a00;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Cached,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageRecord {
    fingerprint: String,
    outputs: Vec<StageFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageFile {
    path: String,
    hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct NlmModel {
    params: NlmParams,
    val_psnr_db: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenoiseMetadata {
    method: String,
    items: Vec<ItemProvenance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemProvenance {
    item: String,
    seed: u64,
    mode: String,
    sigma_d: Option<f64>,
    checkpoint: Option<String>,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    force: bool,
    quiet: bool,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Self {
        Self { cfg, force, quiet: false }
    }

    pub fn quiet(mut self) -> Self {
        self.quiet = true;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn note(&self, stage: &str, outcome: StageOutcome) {
        if !self.quiet {
            match outcome {
                StageOutcome::Ran => eprintln!("stage {stage}: done"),
                StageOutcome::Cached => eprintln!("stage {stage}: cached"),
            }
        }
    }

    fn out(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn stage_dir(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }

    fn stage_record_path(dir: &Path) -> PathBuf {
        dir.join("stage.toml")
    }

    fn stage_is_cached(&self, dir: &Path, fingerprint: &str) -> bool {
        if self.force {
            return false;
        }
        let Ok(text) = std::fs::read_to_string(Self::stage_record_path(dir)) else {
            return false;
        };
        let Ok(record) = toml::from_str::<StageRecord>(&text) else {
            return false;
        };
        if record.fingerprint != fingerprint {
            return false;
        }
        record.outputs.iter().all(|f| {
            let path = self.out().join(&f.path);
            path.exists() && file_hash(&path).map(|h| h == f.hash).unwrap_or(false)
        })
    }

    fn write_stage(&self, dir: &Path, fingerprint: &str, outputs: &[PathBuf]) -> Result<()> {
        let mut files = Vec::with_capacity(outputs.len());
        for path in outputs {
            let rel = path
                .strip_prefix(self.out())
                .map_err(|_| CliError::Config(format!("output {} escapes out_dir", path.display())))?;
            files.push(StageFile {
                path: rel.to_string_lossy().into_owned(),
                hash: file_hash(path)?,
            });
        }
        let record = StageRecord { fingerprint: fingerprint.to_string(), outputs: files };
        let text = toml::to_string_pretty(&record)
            .map_err(|e| CliError::Config(format!("stage record: {e}")))?;
        write_atomic(&Self::stage_record_path(dir), text.as_bytes())?;
        Ok(())
    }

    fn stage_output_hash(&self, dir: &Path) -> Result<String> {
        let text = std::fs::read_to_string(Self::stage_record_path(dir))
            .map_err(ddnz_core::Error::from)?;
        Ok(content_hash(text.as_bytes()))
    }

    fn require_stage(&self, dir: &Path, what: &str, stage: &str) -> Result<()> {
        if !Self::stage_record_path(dir).exists() {
            return Err(CliError::MissingArtifact { what: what.to_string(), stage: stage.to_string() });
        }
        Ok(())
    }

    // -- fingerprints -------------------------------------------------------

    fn fp(&self, parts: &[&str]) -> String {
        let mut buf = String::new();
        for p in parts {
            let _ = write!(buf, "{p};");
        }
        content_hash(buf.as_bytes())
    }

    fn generate_fingerprint(&self) -> Result<String> {
        let ds = toml::to_string(&self.cfg.dataset).unwrap_or_default();
        Ok(self.fp(&["generate", &self.cfg.seed.to_string(), &ds]))
    }

    fn train_fingerprint(&self, method: Method) -> Result<String> {
        let upstream = self.stage_output_hash(&self.stage_dir("dataset_stage"))?;
        let model = toml::to_string(&self.cfg.model).unwrap_or_default();
        let train = toml::to_string(&self.cfg.train).unwrap_or_default();
        // only the sections a method actually consumes participate, so e.g.
        // changing the optimizer settings leaves the nlm tuning cached
        let relevant: Vec<String> = match method {
            Method::Nlm => vec![toml::to_string(&self.cfg.nlm).unwrap_or_default()],
            Method::Unet => {
                vec![model, train, toml::to_string(&self.cfg.unet).unwrap_or_default()]
            }
            _ => vec![toml::to_string(&self.cfg.schedule).unwrap_or_default(), model, train],
        };
        let mut parts = vec!["train", method.label(), &upstream];
        parts.extend(relevant.iter().map(|s| s.as_str()));
        Ok(self.fp(&parts))
    }

    fn denoise_fingerprint(&self, method: Method) -> Result<String> {
        let train_hash = self.stage_output_hash(&self.stage_dir(&format!("train_{method}")))?;
        let inference = toml::to_string(&self.cfg.inference).unwrap_or_default();
        Ok(self.fp(&["denoise", method.label(), &train_hash, &inference, &self.cfg.seed.to_string()]))
    }

    fn evaluate_fingerprint(&self) -> Result<String> {
        let mut parts = vec!["evaluate".to_string()];
        for m in &self.cfg.methods {
            parts.push(self.stage_output_hash(&self.stage_dir(&format!("denoise_{m}")))?);
        }
        parts.push(self.config_hash()?);
        let refs: Vec<&str> = parts.iter().map(|s| s.as_str()).collect();
        Ok(self.fp(&refs))
    }

    fn config_hash(&self) -> Result<String> {
        self.cfg.config_hash()
    }

    // -- data loading -------------------------------------------------------

    fn dataset_dir(&self) -> PathBuf {
        self.out().join("dataset")
    }

    fn load_dataset(&self) -> Result<Dataset> {
        self.require_stage(&self.stage_dir("dataset_stage"), "dataset", "generate")?;
        Ok(Dataset::load(&self.dataset_dir())?)
    }

    fn items_to_train(items: &[LoadedItem]) -> Vec<TrainItem<f32>> {
        items
            .iter()
            .map(|it| TrainItem {
                clean: it.pet_clean.clone(),
                noisy: Some(it.pet_low.clone()),
                prior: Some(it.mr_prior.clone()),
            })
            .collect()
    }

    // -- stages -------------------------------------------------------------

    /// Generate and persist the phantom dataset.
    pub fn generate(&self) -> Result<StageOutcome> {
        self.cfg.freeze()?;
        let stage = self.stage_dir("dataset_stage");
        let fingerprint = self.generate_fingerprint()?;
        if self.stage_is_cached(&stage, &fingerprint) {
            self.note("generate", StageOutcome::Cached);
            return Ok(StageOutcome::Cached);
        }
        std::fs::create_dir_all(&stage).map_err(ddnz_core::Error::from)?;
        let spec = DatasetSpec {
            n_train: self.cfg.dataset.n_train,
            n_val: self.cfg.dataset.n_val,
            n_test: self.cfg.dataset.n_test,
            size: self.cfg.dataset.size,
            dose_fraction: self.cfg.dataset.dose_fraction,
            counts_per_unit: self.cfg.dataset.counts_per_unit,
            seed: self.cfg.seed,
        };
        // the dataset builder owns its directory; stale contents are
        // regenerated whenever the fingerprint changed
        build_dataset(&spec, &self.dataset_dir(), true)?;
        let manifest = Dataset::manifest_path(&self.dataset_dir());
        self.write_stage(&stage, &fingerprint, &[manifest])?;
        self.note("generate", StageOutcome::Ran);
        Ok(StageOutcome::Ran)
    }

    /// Train (or tune) one method.
    pub fn train(&self, method: Method) -> Result<StageOutcome> {
        self.require_stage(&self.stage_dir("dataset_stage"), "dataset", "generate")?;
        let stage = self.stage_dir(&format!("train_{method}"));
        let fingerprint = self.train_fingerprint(method)?;
        if self.stage_is_cached(&stage, &fingerprint) {
            self.note(&format!("train {method}"), StageOutcome::Cached);
            return Ok(StageOutcome::Cached);
        }
        std::fs::create_dir_all(&stage).map_err(ddnz_core::Error::from)?;
        let dataset = self.load_dataset()?;
        let train_items_raw = dataset.load_items(&self.dataset_dir(), Split::Train)?;
        let val_items_raw = dataset.load_items(&self.dataset_dir(), Split::Val)?;

        let outputs = match method {
            Method::Nlm => {
                let pairs: Vec<(Array2<f32>, Array2<f32>, Array2<f32>)> = val_items_raw
                    .iter()
                    .map(|it| {
                        let guide = match self.cfg.nlm.guide {
                            ddnz_core::baselines::GuideMode::SelfGuide => it.pet_low.clone(),
                            ddnz_core::baselines::GuideMode::Prior => it.mr_prior.clone(),
                        };
                        (it.pet_low.clone(), guide, it.pet_clean.clone())
                    })
                    .collect();
                let base = NlmParams {
                    patch_radius: self.cfg.nlm.patch_radius,
                    search_radius: self.cfg.nlm.search_radius,
                    h: self.cfg.nlm.h_grid[0],
                    guide: self.cfg.nlm.guide,
                };
                let (h, val_psnr_db) = baselines::tune_nlm_h(&pairs, &base, &self.cfg.nlm.h_grid)?;
                let model = NlmModel { params: NlmParams { h, ..base }, val_psnr_db };
                let path = stage.join("params.toml");
                let text = toml::to_string_pretty(&model)
                    .map_err(|e| CliError::Config(format!("nlm params: {e}")))?;
                write_atomic(&path, text.as_bytes())?;
                vec![path]
            }
            Method::Unet => {
                let mode = match self.cfg.unet.conditioning {
                    UnetConditioning::Pet => ddnz_core::score::ConditioningMode::Pet,
                    UnetConditioning::PetMr => ddnz_core::score::ConditioningMode::PetMr,
                };
                let in_ch = baselines::unet_input_channels(mode)?;
                let net_cfg = self.cfg.model.score_config(self.cfg.dataset.size, in_ch);
                let net = ScoreNet::<f32>::build(&net_cfg, self.cfg.seed, true)
                    .map_err(CliError::Core)?;
                let train_items = Self::items_to_train(&train_items_raw);
                let val_items = Self::items_to_train(&val_items_raw);
                let tc = self.cfg.train.train_config(self.cfg.seed);
                let (ckpt, curve) =
                    baselines::train_unet_baseline(net, mode, &train_items, &val_items, &tc)?;
                let ckpt_path = stage.join("checkpoint.ckpt");
                ckpt.save(&ckpt_path)?;
                let log_path = stage.join("train_log.txt");
                let mut log = Vec::new();
                write_curve(&curve, &mut log)?;
                write_atomic(&log_path, &log)?;
                vec![ckpt_path, log_path]
            }
            m => {
                let mode = m.conditioning().expect("diffusion method");
                let in_ch = in_channels_for(mode, self.cfg.model.slice_context);
                // the guided variant trains the same prior-conditioned
                // predictor as ddpm_mr; reuse its checkpoint when available
                if m == Method::DdpmMrPetcon {
                    let mr_stage = self.stage_dir("train_ddpm_mr");
                    let mr_fp = self.train_fingerprint(Method::DdpmMr)?;
                    if self.cfg.methods.contains(&Method::DdpmMr)
                        && self.stage_is_cached(&mr_stage, &mr_fp)
                    {
                        let src = mr_stage.join("checkpoint.ckpt");
                        let dst = stage.join("checkpoint.ckpt");
                        std::fs::copy(&src, &dst).map_err(ddnz_core::Error::from)?;
                        self.write_stage(&stage, &fingerprint, &[dst])?;
                        self.note(&format!("train {method} (reusing ddpm_mr)"), StageOutcome::Ran);
                        return Ok(StageOutcome::Ran);
                    }
                }
                let sched = self.cfg.schedule.build()?;
                let net_cfg = self.cfg.model.score_config(self.cfg.dataset.size, in_ch);
                let net = ScoreNet::<f32>::build(&net_cfg, self.cfg.seed, true)
                    .map_err(CliError::Core)?;
                let train_items = Self::items_to_train(&train_items_raw);
                let val_items = Self::items_to_train(&val_items_raw);
                let tc = self.cfg.train.train_config(self.cfg.seed);
                let (ckpt, curve) = train::train(net, mode, &train_items, &val_items, &tc, &sched)?;
                let ckpt_path = stage.join("checkpoint.ckpt");
                ckpt.save(&ckpt_path)?;
                let log_path = stage.join("train_log.txt");
                let mut log = Vec::new();
                write_curve(&curve, &mut log)?;
                write_atomic(&log_path, &log)?;
                vec![ckpt_path, log_path]
            }
        };
        self.write_stage(&stage, &fingerprint, &outputs)?;
        self.note(&format!("train {method}"), StageOutcome::Ran);
        Ok(StageOutcome::Ran)
    }

    /// Apply one trained method to the test split.
    pub fn denoise(&self, method: Method) -> Result<StageOutcome> {
        let train_stage = self.stage_dir(&format!("train_{method}"));
        self.require_stage(&train_stage, &format!("trained {method}"), &format!("train --method {method}"))?;
        let stage = self.stage_dir(&format!("denoise_{method}"));
        let fingerprint = self.denoise_fingerprint(method)?;
        if self.stage_is_cached(&stage, &fingerprint) {
            self.note(&format!("denoise {method}"), StageOutcome::Cached);
            return Ok(StageOutcome::Cached);
        }
        std::fs::create_dir_all(&stage).map_err(ddnz_core::Error::from)?;
        let dataset = self.load_dataset()?;
        let items = dataset.load_items(&self.dataset_dir(), Split::Test)?;

        let mut outputs = Vec::new();
        let mut provenance = Vec::new();
        match method {
            Method::Nlm => {
                let text = std::fs::read_to_string(train_stage.join("params.toml"))
                    .map_err(ddnz_core::Error::from)?;
                let model: NlmModel =
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("nlm params: {e}")))?;
                for it in &items {
                    let guide = match model.params.guide {
                        ddnz_core::baselines::GuideMode::SelfGuide => &it.pet_low,
                        ddnz_core::baselines::GuideMode::Prior => &it.mr_prior,
                    };
                    let out = baselines::nlm_denoise(it.pet_low.view(), guide.view(), &model.params)?;
                    let path = stage.join(format!("{}.mean.img", it.id));
                    ImageVolume::from_plane(out).write(&path)?;
                    outputs.push(path);
                    provenance.push(ItemProvenance {
                        item: it.id.clone(),
                        seed: 0,
                        mode: "nlm".into(),
                        sigma_d: None,
                        checkpoint: None,
                    });
                }
            }
            Method::Unet => {
                let ckpt = ScoreNetCheckpoint::load(&train_stage.join("checkpoint.ckpt"))?;
                let fp = infer::checkpoint_fingerprint(&ckpt);
                for it in &items {
                    let prior = matches!(ckpt.mode, ddnz_core::score::ConditioningMode::PetMr)
                        .then(|| it.mr_prior.view());
                    let out = baselines::unet_denoise(it.pet_low.view(), prior, &ckpt)?;
                    let path = stage.join(format!("{}.mean.img", it.id));
                    ImageVolume::from_plane(out).write(&path)?;
                    outputs.push(path);
                    provenance.push(ItemProvenance {
                        item: it.id.clone(),
                        seed: 0,
                        mode: "unet".into(),
                        sigma_d: None,
                        checkpoint: Some(fp.clone()),
                    });
                }
            }
            m => {
                let mode = m.conditioning().expect("diffusion method");
                let ckpt = ScoreNetCheckpoint::load(&train_stage.join("checkpoint.ckpt"))?;
                let sigma_d = if m == Method::DdpmMrPetcon {
                    if self.cfg.inference.sigma_d.is_none() && !self.cfg.inference.estimate_sigma_d {
                        return Err(CliError::Config(
                            "ddpm_mr_petcon needs sigma_d or the estimator enabled".into(),
                        ));
                    }
                    self.cfg.inference.sigma_d
                } else {
                    None
                };
                for (i, it) in items.iter().enumerate() {
                    let seed = rng::derive_seed(self.cfg.seed, DENOISE_SEED_TAG, i as u64);
                    let req = DenoiseRequest {
                        mode,
                        noisy: ImageVolume::from_plane(it.pet_low.clone()),
                        prior: Some(ImageVolume::from_plane(it.mr_prior.clone())),
                        n_realizations: self.cfg.inference.n_realizations,
                        seed,
                        sigma_d,
                        guidance_sign: self.cfg.inference.guidance_sign,
                        clamp_x0: self.cfg.inference.clamp_x0,
                    };
                    let result = infer::denoise(&req, &ckpt)?;
                    let mean_path = stage.join(format!("{}.mean.img", it.id));
                    ImageVolume::from_plane(result.mean).write(&mean_path)?;
                    let unc_path = stage.join(format!("{}.uncertainty.img", it.id));
                    ImageVolume::from_plane(result.uncertainty).write(&unc_path)?;
                    outputs.push(mean_path);
                    outputs.push(unc_path);
                    provenance.push(ItemProvenance {
                        item: it.id.clone(),
                        seed,
                        mode: mode.label().to_string(),
                        sigma_d: result.provenance.sigma_d,
                        checkpoint: Some(result.provenance.checkpoint_fingerprint.clone()),
                    });
                }
            }
        }
        let meta = DenoiseMetadata { method: method.label().to_string(), items: provenance };
        let meta_path = stage.join("metadata.toml");
        let text =
            toml::to_string_pretty(&meta).map_err(|e| CliError::Config(format!("metadata: {e}")))?;
        write_atomic(&meta_path, text.as_bytes())?;
        outputs.push(meta_path);
        self.write_stage(&stage, &fingerprint, &outputs)?;
        self.note(&format!("denoise {method}"), StageOutcome::Ran);
        Ok(StageOutcome::Ran)
    }

    fn load_runs(&self, items: &[LoadedItem]) -> Result<Vec<MethodRun>> {
        let mut runs = Vec::new();
        // the raw low-dose input is reported alongside the methods
        runs.push(MethodRun {
            method: "input".into(),
            outputs: items.iter().map(|it| it.pet_low.clone()).collect(),
            uncertainty: None,
        });
        for m in &self.cfg.methods {
            let stage = self.stage_dir(&format!("denoise_{m}"));
            self.require_stage(&stage, &format!("denoised {m}"), &format!("denoise --method {m}"))?;
            let mut outputs = Vec::with_capacity(items.len());
            let mut uncertainty = Vec::new();
            for it in items {
                let mean = ImageVolume::read(&stage.join(format!("{}.mean.img", it.id)))?;
                outputs.push(mean.plane(0).to_owned());
                let unc_path = stage.join(format!("{}.uncertainty.img", it.id));
                if unc_path.exists() {
                    uncertainty.push(ImageVolume::read(&unc_path)?.plane(0).to_owned());
                }
            }
            runs.push(MethodRun {
                method: m.label().to_string(),
                outputs,
                uncertainty: (uncertainty.len() == items.len()).then_some(uncertainty),
            });
        }
        Ok(runs)
    }

    /// Compute all metrics against the shared test split.
    pub fn evaluate(&self) -> Result<StageOutcome> {
        for m in &self.cfg.methods {
            self.require_stage(
                &self.stage_dir(&format!("denoise_{m}")),
                &format!("denoised {m}"),
                &format!("denoise --method {m}"),
            )?;
        }
        let stage = self.stage_dir("evaluate");
        let fingerprint = self.evaluate_fingerprint()?;
        if self.stage_is_cached(&stage, &fingerprint) {
            self.note("evaluate", StageOutcome::Cached);
            return Ok(StageOutcome::Cached);
        }
        std::fs::create_dir_all(&stage).map_err(ddnz_core::Error::from)?;
        let dataset = self.load_dataset()?;
        let items = dataset.load_items(&self.dataset_dir(), Split::Test)?;
        let runs = self.load_runs(&items)?;
        let report = assemble_report(&runs, &items, &self.config_hash()?)?;
        let path = stage.join("evaluation.toml");
        let text = toml::to_string_pretty(&report)
            .map_err(|e| CliError::Config(format!("evaluation: {e}")))?;
        write_atomic(&path, text.as_bytes())?;
        self.write_stage(&stage, &fingerprint, &[path])?;
        self.note("evaluate", StageOutcome::Ran);
        Ok(StageOutcome::Ran)
    }

    /// Render the report tables and plots.
    pub fn report(&self) -> Result<StageOutcome> {
        let eval_stage = self.stage_dir("evaluate");
        self.require_stage(&eval_stage, "evaluation", "evaluate")?;
        let stage = self.stage_dir("report");
        let fingerprint = self.fp(&["report", &self.stage_output_hash(&eval_stage)?]);
        if self.stage_is_cached(&stage, &fingerprint) {
            self.note("report", StageOutcome::Cached);
            return Ok(StageOutcome::Cached);
        }
        std::fs::create_dir_all(&stage).map_err(ddnz_core::Error::from)?;
        let text = std::fs::read_to_string(eval_stage.join("evaluation.toml"))
            .map_err(ddnz_core::Error::from)?;
        let report: EvaluationReport =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("evaluation: {e}")))?;
        let dataset = self.load_dataset()?;
        let items = dataset.load_items(&self.dataset_dir(), Split::Test)?;
        let runs = self.load_runs(&items)?;
        report.render(&runs, &items, &stage)?;
        let mut outputs: Vec<PathBuf> = Vec::new();
        for entry in std::fs::read_dir(&stage).map_err(ddnz_core::Error::from)? {
            let path = entry.map_err(ddnz_core::Error::from)?.path();
            if path.file_name().map(|n| n != "stage.toml").unwrap_or(false) {
                outputs.push(path);
            }
        }
        outputs.sort();
        self.write_stage(&stage, &fingerprint, &outputs)?;
        self.note("report", StageOutcome::Ran);
        Ok(StageOutcome::Ran)
    }

    /// Load the assembled evaluation (after `evaluate`).
    pub fn load_evaluation(&self) -> Result<EvaluationReport> {
        let path = self.stage_dir("evaluate").join("evaluation.toml");
        if !path.exists() {
            return Err(CliError::MissingArtifact { what: "evaluation".into(), stage: "evaluate".into() });
        }
        let text = std::fs::read_to_string(&path).map_err(ddnz_core::Error::from)?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("evaluation: {e}")))
    }

    /// Convenience wrapper running every stage in order.
    pub fn run_all(&self) -> Result<()> {
        self.generate()?;
        for m in self.cfg.methods.clone() {
            self.train(m)?;
        }
        for m in self.cfg.methods.clone() {
            self.denoise(m)?;
        }
        self.evaluate()?;
        self.report()?;
        Ok(())
    }
}
