use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use mmcap_tensor::{AdamConfig, OptimizerState, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TrainingData;
use super::mass::MASK_RATIO;
use super::schedule::{make_schedule, Schedule, StepKind, Strategy, ITERATIONS_PER_EPOCH};
use super::step::{run_training_step, Sampler, SamplerConfig};
use crate::corpus::BATCH_SIZE;
use crate::error::{Error, Result};
use crate::model::{check_params, Checkpoint, ModelConfig};

pub const HIDE_FRACTION: f64 = 0.25;

/// Named random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Masking = 1,
    Sampling = 2,
    Dropout = 3,
}

/// ChaCha stream `(epoch, name)` of `seed`. Every epoch restarts its streams,
/// so a run resumed at an epoch boundary continues bit-identically.
pub fn rng_stream(seed: u64, stream: Stream, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 2) | stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub lr_max: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr_max: a.lr_max,
            warmup: a.warmup,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl From<LrConfig> for AdamConfig {
    fn from(c: LrConfig) -> Self {
        Self {
            lr_max: c.lr_max,
            warmup: c.warmup,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_iterations")]
    pub iterations_per_epoch: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_hide_fraction")]
    pub hide_fraction: f64,
    #[serde(default)]
    pub lr: LrConfig,
}

fn default_epochs() -> usize {
    1
}
fn default_iterations() -> usize {
    ITERATIONS_PER_EPOCH
}
fn default_batch_size() -> usize {
    BATCH_SIZE
}
fn default_mask_ratio() -> f64 {
    MASK_RATIO
}
fn default_hide_fraction() -> f64 {
    HIDE_FRACTION
}

impl TrainConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            epochs: default_epochs(),
            iterations_per_epoch: default_iterations(),
            batch_size: default_batch_size(),
            seed: 0,
            mask_ratio: MASK_RATIO,
            hide_fraction: HIDE_FRACTION,
            lr: LrConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations_per_epoch == 0 {
            return bad("iterations_per_epoch must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return bad("mask_ratio must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.hide_fraction) {
            return bad("hide_fraction must lie in [0, 1]");
        }
        if !(self.lr.lr_max > 0.0) || !(0.0..1.0).contains(&self.lr.beta1) || !(0.0..1.0).contains(&self.lr.beta2) {
            return bad("lr block is out of range");
        }
        Ok(())
    }
}

/// One CSV log row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub iteration: usize,
    pub kind: StepKind,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub per_kind: Vec<(StepKind, f64)>,
    pub losses: Vec<f64>,
}

/// Appends `epoch,iteration,step_kind,loss,lr,wall_ms` rows.
pub struct TrainLog {
    out: BufWriter<File>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,iteration,step_kind,loss,lr,wall_ms";

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fresh = !path.exists() || std::fs::metadata(path).map_err(Error::io(path))?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(Error::io(path))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{}", Self::HEADER).map_err(Error::io(path))?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &LogRow) -> std::io::Result<()> {
        writeln!(self.out, "{},{},{},{},{},{}", r.epoch, r.iteration, r.kind, r.loss, r.lr, r.wall_ms)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Runs a strategy's schedule epoch by epoch over one model.
pub struct Trainer {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState<f32>,
    pub schedule: Schedule,
    /// Completed epochs.
    pub epoch: usize,
    sampler: Sampler,
}

impl Trainer {
    pub fn new(train: TrainConfig, model: ModelConfig, params: ParamStore<f32>, data: &TrainingData) -> Result<Self> {
        train.validate()?;
        model.validate()?;
        check_params(&model, &params)?;
        let mut schedule = make_schedule(train.strategy, model.multimodal)?;
        schedule.iterations_per_epoch = train.iterations_per_epoch;
        schedule.epochs = train.epochs;
        let sampler = Sampler::new(
            data,
            &schedule.steps,
            SamplerConfig {
                batch_size: train.batch_size,
                mask_ratio: train.mask_ratio,
                hide_fraction: train.hide_fraction,
            },
            model.video_dim,
        )?;
        Ok(Self {
            optimizer: OptimizerState::new(train.lr.into()),
            train,
            model,
            params,
            schedule,
            epoch: 0,
            sampler,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(train: TrainConfig, ckpt: Checkpoint, data: &TrainingData) -> Result<Self> {
        let epoch: usize = ckpt
            .meta
            .get("epoch")
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| Error::Checkpoint("checkpoint has no epoch counter".into()))?;
        let strategy = ckpt.meta.get("strategy").map(String::as_str);
        if strategy != Some(train.strategy.name()) {
            return Err(Error::Config(format!(
                "checkpoint was trained with strategy {strategy:?}, config says {}",
                train.strategy
            )));
        }
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let mut t = Self::new(train, ckpt.config, ckpt.params, data)?;
        t.optimizer = optimizer;
        t.epoch = epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.model.clone(), self.params.clone());
        c.meta.insert("epoch".into(), self.epoch.to_string());
        c.meta.insert("seed".into(), self.train.seed.to_string());
        c.meta.insert("strategy".into(), self.train.strategy.name().into());
        c.optimizer = Some(self.optimizer.clone());
        c
    }

    /// Runs one epoch: every iteration executes each scheduled step once,
    /// as separate updates, in schedule order.
    pub fn run_epoch(&mut self, data: &TrainingData, mut log: impl FnMut(&LogRow)) -> Result<EpochSummary> {
        let e = self.epoch;
        let seed = self.train.seed;
        let mut sampling = rng_stream(seed, Stream::Sampling, e);
        let mut masking = rng_stream(seed, Stream::Masking, e);
        let mut dropout = rng_stream(seed, Stream::Dropout, e);
        self.sampler.reset();
        let steps = self.schedule.steps.clone();
        let mut sums = vec![0.0; steps.len()];
        let mut losses = Vec::with_capacity(steps.len() * self.schedule.iterations_per_epoch);
        let clock = Instant::now();
        for it in 0..self.schedule.iterations_per_epoch {
            for (k, &kind) in steps.iter().enumerate() {
                let batch = self.sampler.sample(kind, data, &mut sampling, &mut masking)?;
                let r = run_training_step(&batch, &self.model, &mut self.params, &mut self.optimizer, &mut dropout)?;
                sums[k] += r.loss;
                losses.push(r.loss);
                log(&LogRow {
                    epoch: e + 1,
                    iteration: it + 1,
                    kind,
                    loss: r.loss,
                    lr: r.lr,
                    wall_ms: clock.elapsed().as_millis(),
                });
            }
        }
        self.epoch += 1;
        let iters = self.schedule.iterations_per_epoch as f64;
        Ok(EpochSummary {
            epoch: self.epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            per_kind: steps.iter().copied().zip(sums.iter().map(|s| s / iters)).collect(),
            losses,
        })
    }
}
