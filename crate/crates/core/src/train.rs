//! Multi-task training: one task per iteration, Adam updates on the single
//! shared parameter set, CSV logging and checkpoints.

use std::io::Write;
use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, DenoiserParameters};
use crate::error::{Error, Result};
use crate::latent::TaskId;
use crate::schedule::NoiseSchedule;
use crate::tasks::{make_training_example, sample_task, TaskSpec, TrainingExample};
use crate::toy_data::{sample_pair, GeneratorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Keep every `log_every`-th step in the log.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            warmup_steps: 1000,
            total_steps: 20_000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.log_every == 0 {
            return fail("batch_size and log_every must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("need 0 <= beta1, beta2 < 1 and eps > 0".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Linear warmup to the base rate, then constant. `step` is 1-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// First and second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One bias-corrected Adam update at 1-based `step`. Returns the learning
/// rate used.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(&[params.len()], &[grads.len()]));
    }
    if step == 0 {
        return Err(Error::InvalidConfig("optimizer steps are 1-based".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} at step {step}")));
    }
    let scale = match cfg.clip_norm {
        Some(max) => {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let lr = cfg.lr_at(step);
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g * scale;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
    Ok(lr)
}

/// A stored training pair. Records without a class train the null row only.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub audio: Array4<f64>,
    pub video: Array4<f64>,
    pub class: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// Fresh pairs with uniformly drawn classes.
    Generator(&'a GeneratorSpec),
    /// Uniform draws with replacement.
    Dataset(&'a [Record]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub task: TaskId,
    pub loss: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,task,loss,lr";

impl LogRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.9e},{:.9e}", self.step, self.task.name(), self.loss, self.lr)
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    params: DenoiserParameters,
    adam: AdamState,
    step: usize,
    rng: ChaCha8Rng,
    log: Vec<LogRecord>,
}

impl Trainer {
    /// Parameters are initialized from `cfg.seed`; batches draw from stream 1
    /// of the same seed.
    pub fn new(cfg: TrainConfig, model: &DenoiserConfig, schedule: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        if model.diffusion_steps != schedule.len() {
            return Err(Error::ConfigMismatch(format!(
                "denoiser expects {} steps, schedule has {}",
                model.diffusion_steps,
                schedule.len()
            )));
        }
        let params = DenoiserParameters::init(model, cfg.seed)?;
        let adam = AdamState::new(params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self { cfg, schedule, params, adam, step: 0, rng, log: Vec::new() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &DenoiserParameters {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn into_params(self) -> DenoiserParameters {
        self.params
    }

    /// One iteration: draw a task, build a batch for it, take a gradient step.
    pub fn step(&mut self, source: DataSource<'_>) -> Result<LogRecord> {
        let task = sample_task(&mut self.rng);
        let batch = build_batch(task, self.cfg.batch_size, source, self.params.config(), &self.schedule, &mut self.rng)?;
        let (loss, grads) = self.params.gradients(&self.schedule, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
        }
        let lr = optimizer_step(self.params.values_mut(), grads.values(), &mut self.adam, &self.cfg, self.step + 1)?;
        self.step += 1;
        let record = LogRecord { step: self.step, task, loss, lr };
        if self.step % self.cfg.log_every == 0 {
            self.log.push(record);
        }
        Ok(record)
    }

    /// Runs until `total_steps`, calling `on_step` after every iteration.
    pub fn run<F>(&mut self, source: DataSource<'_>, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &LogRecord) -> Result<()>,
    {
        while self.step < self.cfg.total_steps {
            let record = self.step(source)?;
            on_step(self, &record)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, run_config: &str) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: self.params.config().clone(),
                train: self.cfg.clone(),
                run_config: run_config.to_string(),
            },
            step: self.step as u64,
            params: self.params.values().to_vec(),
            adam: self.adam.clone(),
        }
    }

    /// Mean loss of the current parameters per task over `batches` fresh
    /// batches drawn from a separate stream.
    pub fn baseline_losses(&self, source: DataSource<'_>, batches: usize) -> Result<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(2);
        let mut out = [0.0; 3];
        for task in TaskId::ALL {
            let mut total = 0.0;
            for _ in 0..batches {
                let batch = build_batch(task, self.cfg.batch_size, source, self.params.config(), &self.schedule, &mut rng)?;
                total += self.params.gradients(&self.schedule, &batch)?.0;
            }
            out[task.code() as usize] = total / batches.max(1) as f64;
        }
        Ok(out)
    }
}

fn build_batch<R: Rng + ?Sized>(
    task: TaskId,
    batch_size: usize,
    source: DataSource<'_>,
    model: &DenoiserConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    let spec = TaskSpec::for_task(task);
    let k = model.num_classes;
    let layout = model.layout;
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let example = match source {
            DataSource::Generator(g) => {
                if g.layout != layout || g.num_classes != k {
                    return Err(Error::ConfigMismatch("generator does not match the denoiser layout".into()));
                }
                let class = rng.random_range(0..k);
                let (a, v) = sample_pair(g, class, rng)?;
                make_training_example(&spec, a.view(), v.view(), class, k, &layout, schedule, rng)?
            }
            DataSource::Dataset(records) => {
                if records.is_empty() {
                    return Err(Error::InvalidConfig("training dataset is empty".into()));
                }
                let r = &records[rng.random_range(0..records.len())];
                let mut ex = make_training_example(
                    &spec,
                    r.audio.view(),
                    r.video.view(),
                    r.class.unwrap_or(0),
                    k,
                    &layout,
                    schedule,
                    rng,
                )?;
                if r.class.is_none() {
                    ex.class = None;
                    ex.drop_text = true;
                }
                ex
            }
        };
        batch.push(example);
    }
    Ok(batch)
}

/// Trains from scratch. Returns the final trainer (parameters, log, state).
pub fn train(
    cfg: TrainConfig,
    model: &DenoiserConfig,
    schedule: NoiseSchedule,
    source: DataSource<'_>,
) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg, model, schedule)?;
    trainer.run(source, |_, _| Ok(()))?;
    Ok(trainer)
}

pub fn write_log<W: Write>(log: &[LogRecord], mut out: W) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in log {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "UDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    /// Resolved run configuration text, stored verbatim.
    pub run_config: String,
}

/// Parameters plus optimizer state.
///
/// Layout: `UDCK <version>\n`, a u32 length and that many bytes of JSON
/// metadata, the u64 step, the u64 parameter count, then parameters, first
/// and second moments as f64, all little-endian, and finally the SHA-256 of
/// everything before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub params: Vec<f64>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn parameters(&self) -> Result<DenoiserParameters> {
        DenoiserParameters::from_values(&self.meta.model, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("checkpoint metadata serializes");
        let n = self.params.len();
        let mut out = Vec::with_capacity(64 + meta.len() + 24 * n);
        out.extend_from_slice(format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n").as_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for xs in [&self.params, &self.adam.m, &self.adam.v] {
            for x in xs.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .take(32)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header is missing".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Format("checkpoint header is not text".into()))?;
        let version = match header.split_once(' ') {
            Some((CHECKPOINT_MAGIC, v)) => v
                .parse::<u32>()
                .map_err(|_| Error::Format(format!("bad checkpoint version '{v}'")))?,
            _ => return Err(Error::Format("not a checkpoint file".into())),
        };
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < newline + 1 + 32 {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (body, stored) = bytes.split_at(bytes.len() - 32);
        let mut cur = Cursor { bytes: body, pos: newline + 1 };
        let meta_len = cur.u32()? as usize;
        let meta_bytes = cur.take(meta_len)?;
        let step = cur.u64()?;
        let n = cur.u64()? as usize;
        let expected_rest = n.checked_mul(24).ok_or_else(|| Error::Format("bad parameter count".into()))?;
        if body.len() - cur.pos != expected_rest {
            return Err(Error::Format(format!(
                "checkpoint is truncated or padded: expected {} payload bytes, found {}",
                expected_rest,
                body.len() - cur.pos
            )));
        }
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(Error::DigestMismatch { stored: hex::encode(stored), computed: hex::encode(computed) });
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let params = cur.reals(n)?;
        let m = cur.reals(n)?;
        let v = cur.reals(n)?;
        let ckpt = Self { meta, step, params, adam: AdamState { m, v } };
        // Validates the parameter count against the stored config.
        ckpt.parameters()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rejects checkpoints whose denoiser differs from `expected`.
    pub fn check_model(&self, expected: &DenoiserConfig) -> Result<()> {
        if &self.meta.model != expected {
            let what = if self.meta.model.layout != expected.layout {
                format!(
                    "checkpoint layout {} differs from {}",
                    self.meta.model.layout.describe(),
                    expected.layout.describe()
                )
            } else {
                "checkpoint denoiser configuration differs".to_string()
            };
            return Err(Error::ConfigMismatch(what));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
