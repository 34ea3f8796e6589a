//! JSON run configuration. Every field has a default and unknown fields
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{corrupt_mesh, make_pointcloud_set, normalize, synth_shape_jittered, Mesh, MeshError, ShapeKind};
use crate::model::{MPolicy, ModelConfig, ModelError, TrainSample, TrainerConfig};
use crate::tensor::LrSchedule;
use crate::tokenizer::{tokenize, Scheme, TokenError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("config: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 0,
            data: 1,
            train: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub shapes: Vec<ShapeSpec>,
    /// Fraction of faces removed before sampling (0 disables).
    pub corrupt_fraction: f64,
    /// Vertex jitter amplitude for synthesized shapes (0 disables).
    pub jitter: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            shapes: vec![
                ShapeSpec {
                    kind: ShapeKind::Cube,
                    resolution: 1,
                },
                ShapeSpec {
                    kind: ShapeKind::Cube,
                    resolution: 2,
                },
                ShapeSpec {
                    kind: ShapeKind::UvSphere,
                    resolution: 6,
                },
                ShapeSpec {
                    kind: ShapeKind::Torus,
                    resolution: 5,
                },
            ],
            corrupt_fraction: 0.0,
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub m_policy: MPolicy,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr_max: 1e-4,
            lr_min: 1e-6,
            batch_size: 1,
            checkpoint_every: 100,
            m_policy: MPolicy::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scheme: Scheme,
    pub seeds: Seeds,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            scheme: Scheme::default(),
            seeds: Seeds::default(),
            dataset: DatasetSpec::default(),
            schedule: ScheduleSpec::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        let s = &self.schedule;
        if !(s.lr_max.is_finite() && s.lr_min.is_finite() && s.lr_min >= 0.0 && s.lr_min <= s.lr_max) {
            return Err(ConfigError::Invalid(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                s.lr_min, s.lr_max
            )));
        }
        if s.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be at least 1".into()));
        }
        let f = self.dataset.corrupt_fraction;
        if !(0.0..1.0).contains(&f) {
            return Err(ConfigError::Invalid(format!("corrupt_fraction {f} outside [0, 1)")));
        }
        for sh in &self.dataset.shapes {
            let (lo, hi) = sh.kind.resolution_bounds();
            if sh.resolution < lo || sh.resolution > hi {
                return Err(ConfigError::Invalid(format!(
                    "{} resolution {} outside {lo}..={hi}",
                    sh.kind, sh.resolution
                )));
            }
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            schedule: LrSchedule::Cosine {
                lr_max: self.schedule.lr_max,
                lr_min: self.schedule.lr_min,
                total_steps: self.schedule.steps,
            },
            m_policy: self.schedule.m_policy,
            seed: self.seeds.train,
        }
    }

    /// Synthesizes the dataset. Shape `i` is jittered and sampled with seed
    /// `seeds.data + i`; with a corruption fraction the clouds come from the
    /// damaged mesh while the targets stay clean. Returns the clean
    /// normalized meshes alongside the samples.
    pub fn build_dataset(&self) -> Result<Vec<(Mesh, TrainSample)>, ConfigError> {
        let capacity = self.model.capacity();
        let mut out = Vec::with_capacity(self.dataset.shapes.len());
        for (i, sh) in self.dataset.shapes.iter().enumerate() {
            let seed = self.seeds.data.wrapping_add(i as u64);
            let mesh = normalize(&synth_shape_jittered(sh.kind, sh.resolution, seed, self.dataset.jitter)?)?;
            let tokens = tokenize(&mesh, self.scheme)?;
            if tokens.len() > capacity {
                return Err(ConfigError::Invalid(format!(
                    "{} resolution {} tokenizes to {} tokens, model capacity is {capacity}",
                    sh.kind,
                    sh.resolution,
                    tokens.len()
                )));
            }
            let source = if self.dataset.corrupt_fraction > 0.0 {
                corrupt_mesh(&mesh, self.dataset.corrupt_fraction, seed)?
            } else {
                mesh.clone()
            };
            let clouds = make_pointcloud_set(&source, self.model.counts, seed)?;
            out.push((mesh, TrainSample { clouds, tokens }));
        }
        Ok(out)
    }
}
