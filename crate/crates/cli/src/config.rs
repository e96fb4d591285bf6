//! Experiment configuration: one structured text file drives the whole
//! pipeline. Every key can be overridden through the environment with the
//! `DDNZ_` prefix (sections joined by double underscores, e.g.
//! `DDNZ_DATASET__N_TRAIN=16`), and the fully resolved configuration is
//! frozen next to the outputs so runs are self-describing.

use std::path::{Path, PathBuf};

use ddnz_core::baselines::GuideMode;
use ddnz_core::diffusion::GuidanceSign;
use ddnz_core::image::content_hash;
use ddnz_core::schedule::{Schedule, ScheduleKind, SigmaKind};
use ddnz_core::score::ScoreNetConfig;
use ddnz_core::train::NormKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::methods::Method;

pub const ENV_PREFIX: &str = "DDNZ_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub dose_fraction: f64,
    pub counts_per_unit: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n_train: 85, n_val: 5, n_test: 30, size: 32, dose_fraction: 0.25, counts_per_unit: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_kind: SigmaKind,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sigma_kind: SigmaKind::PosteriorVariance,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> ddnz_core::Result<Schedule> {
        Schedule::new(self.steps, self.kind, self.beta_start, self.beta_end, self.sigma_kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    pub attention_resolutions: Vec<usize>,
    pub time_embed_dim: usize,
    /// Neighbor slices per side for 2.5D conditioning (0 for 2D phantoms).
    pub slice_context: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            num_res_blocks: 2,
            attention_resolutions: vec![16],
            time_embed_dim: 64,
            slice_context: 0,
        }
    }
}

impl ModelSection {
    pub fn score_config(&self, image_size: usize, in_channels: usize) -> ScoreNetConfig {
        ScoreNetConfig {
            image_size,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            num_res_blocks: self.num_res_blocks,
            attention_resolutions: self.attention_resolutions.clone(),
            in_channels,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    /// Set false to disable parameter averaging.
    pub ema: bool,
    pub val_every: usize,
    pub normalization: NormKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            learning_rate: 1e-4,
            ema_decay: 0.999,
            ema: true,
            val_every: 200,
            normalization: NormKind::UnitRange,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> ddnz_core::train::TrainConfig {
        ddnz_core::train::TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            ema_decay: self.ema.then_some(self.ema_decay),
            seed,
            normalization: self.normalization,
            val_every: self.val_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlmSection {
    pub patch_radius: usize,
    pub search_radius: usize,
    pub guide: GuideMode,
    /// Bandwidths tried on the validation split.
    pub h_grid: Vec<f64>,
}

impl Default for NlmSection {
    fn default() -> Self {
        Self {
            patch_radius: 1,
            search_radius: 5,
            guide: GuideMode::SelfGuide,
            h_grid: vec![0.05, 0.1, 0.2, 0.4, 0.8, 1.6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnetConditioning {
    Pet,
    PetMr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetSection {
    pub conditioning: UnetConditioning,
}

impl Default for UnetSection {
    fn default() -> Self {
        Self { conditioning: UnetConditioning::Pet }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub n_realizations: usize,
    /// Measurement noise level for the guided variant (normalized domain).
    pub sigma_d: Option<f64>,
    /// Allow the robust residual estimator when sigma_d is absent.
    pub estimate_sigma_d: bool,
    pub guidance_sign: GuidanceSign,
    /// Clamp the implied x0 to the normalization range during sampling.
    pub clamp_x0: bool,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            n_realizations: 20,
            sigma_d: None,
            estimate_sigma_d: true,
            guidance_sign: GuidanceSign::Gradient,
            clamp_x0: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub nlm: NlmSection,
    pub unet: UnetSection,
    pub inference: InferenceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("ddnz-out"),
            methods: vec![Method::Nlm, Method::DdpmPet],
            dataset: DatasetSection::default(),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            nlm: NlmSection::default(),
            unet: UnetSection::default(),
            inference: InferenceSection::default(),
        }
    }
}

/// Flag overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parse a config file, apply environment and flag overrides, validate.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides, std::env::vars())
    }

    pub fn from_toml_str(
        text: &str,
        overrides: &Overrides,
        env: impl Iterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text)
            .map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
        apply_env_overrides(&mut value, env)?;
        let mut cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| CliError::Config(format!("config field error: {e}")))?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(CliError::Config("methods list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(*m) {
                return Err(CliError::Config(format!("method {m} listed twice")));
            }
        }
        if self.inference.n_realizations < 1 {
            return Err(CliError::Config("inference.n_realizations must be >= 1".into()));
        }
        if self.methods.contains(&Method::DdpmMrPetcon)
            && self.inference.sigma_d.is_none()
            && !self.inference.estimate_sigma_d
        {
            return Err(CliError::Config(
                "ddpm_mr_petcon needs inference.sigma_d or inference.estimate_sigma_d = true".into(),
            ));
        }
        if let Some(sd) = self.inference.sigma_d {
            if !sd.is_finite() || sd <= 0.0 {
                return Err(CliError::Config("inference.sigma_d must be finite and > 0".into()));
            }
        }
        if self.model.slice_context != 0 {
            return Err(CliError::Config(
                "the 2D phantom pipeline supports model.slice_context = 0 only".into(),
            ));
        }
        self.schedule.build().map_err(|e| CliError::Config(format!("schedule: {e}")))?;
        let probe = self.model.score_config(self.dataset.size, 1);
        probe.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(())
    }

    /// Serialized resolved config (all defaults expanded).
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("serialize: {e}")))
    }

    /// Hash of the resolved config with the output directory normalized
    /// out, so runs in different directories stay byte-comparable.
    pub fn config_hash(&self) -> Result<String> {
        let mut normalized = self.clone();
        normalized.out_dir = PathBuf::new();
        Ok(content_hash(normalized.resolved_toml()?.as_bytes()))
    }

    /// Write `resolved_config.toml` into the output directory.
    pub fn freeze(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(ddnz_core::Error::from)?;
        ddnz_core::image::write_atomic(
            &self.out_dir.join("resolved_config.toml"),
            self.resolved_toml()?.as_bytes(),
        )?;
        Ok(())
    }
}

/// Apply `DDNZ_SECTION__KEY=value` overrides onto the parsed tree. Values
/// are parsed as TOML scalars/arrays, falling back to strings.
fn apply_env_overrides(
    value: &mut toml::Value,
    env: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    let mut vars: Vec<(String, String)> = env
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|p| p.to_lowercase())
            .collect();
        if path.is_empty() || path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("malformed override variable {key}")));
        }
        let parsed: toml::Value = match raw.parse::<toml::Value>() {
            Ok(v) => v,
            Err(_) => toml::Value::String(raw.clone()),
        };
        let mut node = &mut *value;
        for part in &path[..path.len() - 1] {
            node = node
                .as_table_mut()
                .ok_or_else(|| CliError::Config(format!("override {key}: not a table")))?
                .entry(part.clone())
                .or_insert(toml::Value::Table(Default::default()));
        }
        node.as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key}: not a table")))?
            .insert(path.last().unwrap().clone(), parsed);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> impl Iterator<Item = (String, String)> {
        std::iter::empty()
    }

    #[test]
    fn defaults_fill_in() {
        let cfg =
            ExperimentConfig::from_toml_str("methods = [\"nlm\"]\n", &Overrides::default(), no_env())
                .unwrap();
        assert_eq!(cfg.dataset.dose_fraction, 0.25);
        assert_eq!(cfg.schedule.steps, 1000);
        assert_eq!(cfg.methods, vec![Method::Nlm]);
    }

    #[test]
    fn env_overrides_apply() {
        let env = vec![
            ("DDNZ_DATASET__N_TRAIN".to_string(), "7".to_string()),
            ("DDNZ_SEED".to_string(), "99".to_string()),
            ("DDNZ_SCHEDULE__KIND".to_string(), "\"cosine\"".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_str(
            "methods = [\"nlm\"]\n",
            &Overrides::default(),
            env.into_iter(),
        )
        .unwrap();
        assert_eq!(cfg.dataset.n_train, 7);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.schedule.kind, ScheduleKind::Cosine);
    }

    #[test]
    fn flag_overrides_beat_file() {
        let over = Overrides { seed: Some(5), out_dir: Some(PathBuf::from("/tmp/x")) };
        let cfg = ExperimentConfig::from_toml_str("methods = [\"nlm\"]\nseed = 1\n", &over, no_env())
            .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn petcon_requires_sigma_source() {
        let text = "methods = [\"ddpm_mr_petcon\"]\n[inference]\nestimate_sigma_d = false\n";
        let err = ExperimentConfig::from_toml_str(text, &Overrides::default(), no_env()).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let ok = "methods = [\"ddpm_mr_petcon\"]\n[inference]\nsigma_d = 0.4\nestimate_sigma_d = false\n";
        assert!(ExperimentConfig::from_toml_str(ok, &Overrides::default(), no_env()).is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "methods = [\"nlm\"]\n[dataset]\nn_trian = 3\n";
        assert!(ExperimentConfig::from_toml_str(text, &Overrides::default(), no_env()).is_err());
    }

    #[test]
    fn config_hash_ignores_out_dir() {
        let a = ExperimentConfig::from_toml_str(
            "methods = [\"nlm\"]\nout_dir = \"/a\"\n",
            &Overrides::default(),
            no_env(),
        )
        .unwrap();
        let b = ExperimentConfig::from_toml_str(
            "methods = [\"nlm\"]\nout_dir = \"/b\"\n",
            &Overrides::default(),
            no_env(),
        )
        .unwrap();
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        let c = ExperimentConfig::from_toml_str(
            "methods = [\"nlm\"]\nseed = 3\n",
            &Overrides::default(),
            no_env(),
        )
        .unwrap();
        assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
    }
}
