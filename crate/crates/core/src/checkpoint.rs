//! Versioned binary checkpoint container.
//!
//! Layout: a 12-byte magic ("DDNZ-CKPT-v1" for score nets, "DDNZ-UNET-v1"
//! for the supervised baseline), a u32 JSON-metadata length, the metadata
//! blob (config, conditioning mode, schedule header, normalization, training
//! metadata, array descriptors), then the raw little-endian array payloads
//! in descriptor order: schedule betas as f64, parameters as f32.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image;
use crate::nn::ParamSet;
use crate::schedule::{Schedule, ScheduleKind, SigmaKind};
use crate::score::{ConditioningMode, ScoreNet, ScoreNetConfig};

pub const SCORE_MAGIC: &[u8; 12] = b"DDNZ-CKPT-v1";
pub const UNET_MAGIC: &[u8; 12] = b"DDNZ-UNET-v1";

/// Which container (and training objective) produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// eps predictor for diffusion sampling.
    Score,
    /// Supervised regression baseline (no diffusion, no time conditioning).
    UnetBaseline,
}

impl CheckpointKind {
    fn magic(&self) -> &'static [u8; 12] {
        match self {
            CheckpointKind::Score => SCORE_MAGIC,
            CheckpointKind::UnetBaseline => UNET_MAGIC,
        }
    }
}

/// Intensity normalization the network was trained with. Constants are
/// dataset-level and stored with the checkpoint so inference reproduces the
/// training-time scaling exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Normalization {
    /// x -> 2 x / max - 1 per modality (activity is non-negative).
    UnitRange { pet_max: f64, mr_max: f64 },
    /// x -> (x - mean) / std per modality.
    Zscore { pet_mean: f64, pet_std: f64, mr_mean: f64, mr_std: f64 },
}

impl Normalization {
    pub fn normalize_pet(&self, x: f32) -> f32 {
        match self {
            Normalization::UnitRange { pet_max, .. } => (2.0 * x as f64 / pet_max - 1.0) as f32,
            Normalization::Zscore { pet_mean, pet_std, .. } => ((x as f64 - pet_mean) / pet_std) as f32,
        }
    }

    pub fn denormalize_pet(&self, x: f32) -> f32 {
        match self {
            Normalization::UnitRange { pet_max, .. } => ((x as f64 + 1.0) * pet_max / 2.0) as f32,
            Normalization::Zscore { pet_mean, pet_std, .. } => (x as f64 * pet_std + pet_mean) as f32,
        }
    }

    pub fn normalize_mr(&self, x: f32) -> f32 {
        match self {
            Normalization::UnitRange { mr_max, .. } => (2.0 * x as f64 / mr_max - 1.0) as f32,
            Normalization::Zscore { mr_mean, mr_std, .. } => ((x as f64 - mr_mean) / mr_std) as f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps_run: usize,
    pub best_val_loss: f64,
    pub best_val_step: usize,
    pub seed: u64,
    pub ema: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleHeader {
    kind: ScheduleKind,
    sigma_kind: SigmaKind,
    steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayDescriptor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaBlob {
    kind: CheckpointKind,
    config: ScoreNetConfig,
    mode: ConditioningMode,
    slice_context: usize,
    time_conditioned: bool,
    schedule: Option<ScheduleHeader>,
    normalization: Normalization,
    train: TrainMeta,
    arrays: Vec<ArrayDescriptor>,
}

/// Trained predictor parameters plus everything needed to run them: the
/// architecture, the schedule, and the normalization constants.
#[derive(Debug, Clone)]
pub struct ScoreNetCheckpoint {
    pub kind: CheckpointKind,
    pub config: ScoreNetConfig,
    pub mode: ConditioningMode,
    pub slice_context: usize,
    /// Whether the backbone carries the time-embedding pathway. The
    /// supervised baseline keeps it too (driven by a fixed timestep) so
    /// parameter counts stay comparable.
    pub time_conditioned: bool,
    /// Present for diffusion checkpoints, absent for the supervised baseline.
    pub schedule: Option<Schedule>,
    pub normalization: Normalization,
    pub train: TrainMeta,
    pub params: ParamSet<f32>,
}

impl ScoreNetCheckpoint {
    /// Rebuild the network with the stored parameters.
    pub fn instantiate(&self) -> Result<ScoreNet<f32>> {
        let mut net = ScoreNet::build(&self.config, 0, self.time_conditioned)?;
        if net.params.len() != self.params.len() {
            return Err(Error::Format {
                path: "checkpoint".into(),
                reason: format!(
                    "parameter table mismatch: net has {} arrays, checkpoint {}",
                    net.params.len(),
                    self.params.len()
                ),
            });
        }
        for (i, ((name, stored), live_name)) in
            self.params.iter().zip(net.params.names().to_vec()).enumerate()
        {
            if name != live_name || net.params.arrays()[i].shape() != stored.shape() {
                return Err(Error::Format {
                    path: "checkpoint".into(),
                    reason: format!("array {i} mismatch: {name} vs {live_name}"),
                });
            }
        }
        for (live, stored) in net.params.arrays_mut().iter_mut().zip(self.params.arrays()) {
            live.assign(stored);
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<ArrayDescriptor> = Vec::new();
        if let Some(sched) = &self.schedule {
            arrays.push(ArrayDescriptor {
                name: "schedule.beta".into(),
                shape: vec![sched.steps()],
                dtype: "f64".into(),
            });
        }
        for (name, arr) in self.params.iter() {
            arrays.push(ArrayDescriptor {
                name: name.to_string(),
                shape: arr.shape().to_vec(),
                dtype: "f32".into(),
            });
        }
        let meta = MetaBlob {
            kind: self.kind,
            config: self.config.clone(),
            mode: self.mode,
            slice_context: self.slice_context,
            time_conditioned: self.time_conditioned,
            schedule: self.schedule.as_ref().map(|s| ScheduleHeader {
                kind: s.kind(),
                sigma_kind: s.sigma_kind(),
                steps: s.steps(),
            }),
            normalization: self.normalization,
            train: self.train.clone(),
            arrays,
        };
        let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(self.kind.magic());
        buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta_json);
        if let Some(sched) = &self.schedule {
            for &b in sched.betas() {
                buf.extend_from_slice(&b.to_le_bytes());
            }
        }
        for (_, arr) in self.params.iter() {
            for &v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        image::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path)?;
        let mut magic = [0u8; 12];
        file.read_exact(&mut magic).map_err(|_| corrupt(path, "truncated magic"))?;
        let kind = if &magic == SCORE_MAGIC {
            CheckpointKind::Score
        } else if &magic == UNET_MAGIC {
            CheckpointKind::UnetBaseline
        } else {
            return Err(Error::UnsupportedVersion {
                path: path.display().to_string(),
                found: String::from_utf8_lossy(&magic).into_owned(),
                expected: format!(
                    "{} or {}",
                    String::from_utf8_lossy(SCORE_MAGIC),
                    String::from_utf8_lossy(UNET_MAGIC)
                ),
            });
        };
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes).map_err(|_| corrupt(path, "truncated metadata length"))?;
        let meta_len = u32::from_le_bytes(len_bytes) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        file.read_exact(&mut meta_bytes).map_err(|_| corrupt(path, "truncated metadata"))?;
        let meta: MetaBlob =
            serde_json::from_slice(&meta_bytes).map_err(|e| corrupt(path, &format!("bad metadata: {e}")))?;
        if meta.kind != kind {
            return Err(corrupt(path, "magic and metadata kind disagree"));
        }

        let mut betas: Vec<f64> = Vec::new();
        let mut params = ParamSet::<f32>::new();
        for (i, desc) in meta.arrays.iter().enumerate() {
            let n: usize = desc.shape.iter().product();
            match desc.dtype.as_str() {
                "f64" => {
                    let mut raw = vec![0u8; 8 * n];
                    file.read_exact(&mut raw).map_err(|_| corrupt(path, &format!("truncated array {i}")))?;
                    betas = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                }
                "f32" => {
                    let mut raw = vec![0u8; 4 * n];
                    file.read_exact(&mut raw).map_err(|_| corrupt(path, &format!("truncated array {i}")))?;
                    let values: Vec<f32> =
                        raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                    let arr = ArrayD::from_shape_vec(IxDyn(&desc.shape), values)
                        .map_err(|_| corrupt(path, &format!("bad shape for array {i}")))?;
                    params.alloc(desc.name.clone(), arr);
                }
                other => return Err(corrupt(path, &format!("unknown dtype {other}"))),
            }
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(corrupt(path, "trailing bytes"));
        }
        let schedule = match &meta.schedule {
            Some(header) => {
                if betas.len() != header.steps {
                    return Err(corrupt(path, "schedule length mismatch"));
                }
                Some(Schedule::from_betas(betas, header.kind, header.sigma_kind)?)
            }
            None => {
                if !betas.is_empty() {
                    return Err(corrupt(path, "unexpected schedule payload"));
                }
                None
            }
        };
        Ok(Self {
            kind,
            config: meta.config,
            mode: meta.mode,
            slice_context: meta.slice_context,
            time_conditioned: meta.time_conditioned,
            schedule,
            normalization: meta.normalization,
            train: meta.train,
            params,
        })
    }
}

fn corrupt(path: &Path, reason: &str) -> Error {
    Error::Format { path: path.display().to_string(), reason: reason.to_string() }
}
