//! Per-sample forward/backward, gradient averaging and Adam updates.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{LaneModel, ModelConfig, ModelError, Result};
use crate::mesh::PointCloudSet;
use crate::tensor::{read_checkpoint, write_checkpoint, AdamConfig, AdamState, LrSchedule, Scope, Tape};
use crate::tokenizer::TokenSequence;

/// How the subsequence index is chosen for each sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MPolicy {
    /// Uniform over the sample's active subsequences.
    #[default]
    Uniform,
    /// Always index `m` (1-based), clamped to the active count.
    Fixed { m: usize },
    /// Cycle through the active subsequences with the step counter.
    RoundRobin,
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub clouds: PointCloudSet,
    pub tokens: TokenSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub schedule: LrSchedule,
    pub m_policy: MPolicy,
    pub seed: u64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// Mean of the per-sample losses.
    pub loss: f64,
    pub lr: f64,
    /// Subsequence index used for each sample.
    pub ms: Vec<usize>,
    pub sample_losses: Vec<f64>,
    /// Largest decoding-block activation footprint (values plus saved
    /// backward buffers) over the step's samples, in bytes.
    pub lane_bytes: usize,
    pub seconds: f64,
}

/// Loss, parameter gradients and decoding-block activation bytes of one
/// sample.
pub struct SampleGradients {
    pub loss: f64,
    pub grads: Vec<Option<Vec<f64>>>,
    pub lane_bytes: usize,
}

pub struct Trainer {
    pub model: LaneModel,
    pub adam: AdamState,
    pub config: TrainerConfig,
}

impl Trainer {
    pub fn new(model: LaneModel, config: TrainerConfig) -> Self {
        let adam = AdamState::new(&model.store, AdamConfig::new(config.schedule));
        Self { model, adam, config }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Subsequence index for sample `i` at the current step.
    pub fn draw_m(&self, i: usize, active: usize) -> usize {
        match self.config.m_policy {
            MPolicy::Uniform => {
                let label = format!("m/{}/{i}", self.adam.step);
                crate::rng::derived(self.config.seed, &label).gen_range(1..=active)
            }
            MPolicy::Fixed { m } => m.clamp(1, active),
            MPolicy::RoundRobin => (self.adam.step as usize + i) % active + 1,
        }
    }

    /// Forward and backward on every sample, average the gradients in
    /// sample order and apply one Adam update.
    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(ModelError::Invalid("empty batch".into()));
        }
        let start = Instant::now();
        let lr = self.adam.current_lr();
        let step = self.adam.step;
        let mut sum: Vec<Option<Vec<f64>>> = vec![None; self.model.store.len()];
        let mut ms = Vec::with_capacity(batch.len());
        let mut losses = Vec::with_capacity(batch.len());
        let mut lane_bytes = 0;
        for (i, sample) in batch.iter().enumerate() {
            let active = self.model.config.num_subsequences(sample.tokens.len());
            let m = self.draw_m(i, active.max(1));
            let SampleGradients {
                loss,
                grads,
                lane_bytes: bytes,
            } = self.sample_gradients(sample, m)?;
            lane_bytes = lane_bytes.max(bytes);
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { step });
            }
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                    (None, Some(g)) => *acc = Some(g),
                    (_, None) => {}
                }
            }
            ms.push(m);
            losses.push(loss);
        }
        let inv = 1.0 / batch.len() as f64;
        for g in sum.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= inv);
        }
        self.adam.step(&mut self.model.store, &sum)?;
        Ok(StepReport {
            step,
            loss: losses.iter().sum::<f64>() * inv,
            lr,
            ms,
            sample_losses: losses,
            lane_bytes,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Forward and backward for one sample at subsequence `m`.
    pub fn sample_gradients(&self, sample: &TrainSample, m: usize) -> Result<SampleGradients> {
        let model = &self.model;
        let mut tape = Tape::new();
        let out = model.loss(
            &mut tape,
            &model.store,
            &sample.clouds,
            &sample.tokens.tokens,
            sample.tokens.len(),
            m,
        )?;
        let loss = tape.value(out).item();
        let lane_bytes = tape.scope_bytes(Scope::Lane);
        let grads = tape.backward(out)?.param_grads(&tape, &model.store);
        Ok(SampleGradients {
            loss,
            grads,
            lane_bytes,
        })
    }

    /// Mean loss over every subsequence of every sample, without updating.
    pub fn evaluate(&self, batch: &[TrainSample]) -> Result<f64> {
        let model = &self.model;
        let mut total = 0.0;
        let mut n = 0usize;
        for sample in batch {
            let len = sample.tokens.len();
            for m in 1..=model.config.num_subsequences(len) {
                let mut tape = Tape::inference();
                let out = model.loss(&mut tape, &model.store, &sample.clouds, &sample.tokens.tokens, len, m)?;
                total += tape.value(out).item();
                n += 1;
            }
        }
        Ok(total / n.max(1) as f64)
    }

    /// Parameters plus optimizer moments.
    pub fn save(&self, path: &Path) -> Result<()> {
        let value = serde_json::to_value(&self.model.config).map_err(|e| ModelError::Invalid(e.to_string()))?;
        write_checkpoint(path, &self.model.store, &self.model.config.hash(), value, Some(&self.adam))?;
        Ok(())
    }

    /// Restores parameters and, when present, optimizer state.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let ck = read_checkpoint(path)?;
        ck.load_into(&mut self.model.store, &self.model.config.hash())?;
        if let Some(adam) = ck.adam {
            self.adam = AdamState {
                config: self.adam.config,
                ..adam
            };
        }
        Ok(())
    }
}

/// Builds a model whose parameters come from a checkpoint.
pub fn load_model(path: &Path, config: &ModelConfig) -> Result<LaneModel> {
    let ck = read_checkpoint(path)?;
    let mut model = LaneModel::new(config.clone(), 0)?;
    ck.load_into(&mut model.store, &config.hash())?;
    Ok(model)
}

/// Reads the model configuration stored in a checkpoint header.
pub fn checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let ck = read_checkpoint(path)?;
    serde_json::from_value(ck.header.config).map_err(|e| ModelError::Invalid(format!("checkpoint config: {e}")))
}

/// Appends one JSON object per line.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| ModelError::Invalid(e.to_string()))?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ModelError::Invalid(format!("{}: {e}", path.display())))?;
    writeln!(f, "{line}").map_err(|e| ModelError::Invalid(format!("{}: {e}", path.display())))
}
