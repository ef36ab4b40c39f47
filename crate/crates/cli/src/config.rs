//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file overrides any subset. Unknown
//! keys, repeated keys and unparsable values are rejected. The canonical
//! rendering lists every key in a fixed order and its digest identifies the
//! run in all emitted artifacts.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use unidiff_core::digest;
use unidiff_core::latent::{parse_shape, shape_str};
use unidiff_core::toy_data::{make_generator, GeneratorSpec};
use unidiff_core::train::TrainConfig;
use unidiff_core::{DenoiserConfig, Error, ModalityLayout, NoiseSchedule, Result, SamplerConfig, SamplerMode};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub model_dim: usize,
    pub model_blocks: usize,
    pub model_heads: usize,
    pub model_cond_dim: usize,
    pub model_ffn_mult: usize,
    pub model_self_attention: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub train_steps: usize,
    pub log_every: usize,
    pub clip_norm: Option<f64>,
    pub sampler_steps: usize,
    pub guidance: f64,
    pub sampler_mode: SamplerMode,
    pub data_d: usize,
    pub data_k: usize,
    pub separation: f64,
    pub sigma_a: f64,
    pub sigma_v: f64,
    pub audio_shape: [usize; 4],
    pub video_shape: [usize; 4],
    pub data_n: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sampler = SamplerConfig::default();
        Self {
            seed: 0,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            model_dim: 32,
            model_blocks: 2,
            model_heads: 4,
            model_cond_dim: 32,
            model_ffn_mult: 4,
            model_self_attention: true,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            warmup_steps: train.warmup_steps,
            train_steps: train.total_steps,
            log_every: train.log_every,
            clip_norm: train.clip_norm,
            sampler_steps: sampler.steps,
            guidance: sampler.guidance,
            sampler_mode: sampler.mode,
            data_d: 2,
            data_k: 3,
            separation: 4.0,
            sigma_a: 0.5,
            sigma_v: 0.5,
            audio_shape: [1, 4, 2, 1],
            video_shape: [1, 2, 2, 2],
            data_n: 10_000,
        }
    }
}

/// Every recognised key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "schedule.T",
    "schedule.beta_start",
    "schedule.beta_end",
    "model.dim",
    "model.blocks",
    "model.heads",
    "model.cond_dim",
    "model.ffn_mult",
    "model.self_attention",
    "train.batch_size",
    "train.lr",
    "train.warmup",
    "train.steps",
    "train.log_every",
    "train.clip_norm",
    "sampler.steps",
    "sampler.guidance",
    "sampler.mode",
    "data.d",
    "data.K",
    "data.separation",
    "data.sigma_a",
    "data.sigma_v",
    "data.audio_shape",
    "data.video_shape",
    "data.n",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value '{value}' for {key}")))
}

fn shape(key: &str, value: &str) -> Result<[usize; 4]> {
    parse_shape(value).map_err(|_| Error::InvalidConfig(format!("bad value '{value}' for {key}")))
}

fn optional(value: &Option<f64>) -> String {
    value.map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected 'key = value'", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("line {}: '{key}' given twice", n + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "schedule.T" => self.schedule_steps = parse(key, value)?,
            "schedule.beta_start" => self.beta_start = parse(key, value)?,
            "schedule.beta_end" => self.beta_end = parse(key, value)?,
            "model.dim" => self.model_dim = parse(key, value)?,
            "model.blocks" => self.model_blocks = parse(key, value)?,
            "model.heads" => self.model_heads = parse(key, value)?,
            "model.cond_dim" => self.model_cond_dim = parse(key, value)?,
            "model.ffn_mult" => self.model_ffn_mult = parse(key, value)?,
            "model.self_attention" => self.model_self_attention = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.lr" => self.learning_rate = parse(key, value)?,
            "train.warmup" => self.warmup_steps = parse(key, value)?,
            "train.steps" => self.train_steps = parse(key, value)?,
            "train.log_every" => self.log_every = parse(key, value)?,
            "train.clip_norm" => {
                self.clip_norm = if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "sampler.steps" => self.sampler_steps = parse(key, value)?,
            "sampler.guidance" => self.guidance = parse(key, value)?,
            "sampler.mode" => self.sampler_mode = SamplerMode::parse(value)?,
            "data.d" => self.data_d = parse(key, value)?,
            "data.K" => self.data_k = parse(key, value)?,
            "data.separation" => self.separation = parse(key, value)?,
            "data.sigma_a" => self.sigma_a = parse(key, value)?,
            "data.sigma_v" => self.sigma_v = parse(key, value)?,
            "data.audio_shape" => self.audio_shape = shape(key, value)?,
            "data.video_shape" => self.video_shape = shape(key, value)?,
            "data.n" => self.data_n = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides and revalidates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let layout = self.layout()?;
        self.model_config(&layout).validate()?;
        self.train_config().validate()?;
        self.sampler_config().validate(&self.schedule()?)?;
        self.generator()?;
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        fn s<T: Display>(x: T) -> String {
            x.to_string()
        }
        match key {
            "seed" => s(self.seed),
            "schedule.T" => s(self.schedule_steps),
            "schedule.beta_start" => s(self.beta_start),
            "schedule.beta_end" => s(self.beta_end),
            "model.dim" => s(self.model_dim),
            "model.blocks" => s(self.model_blocks),
            "model.heads" => s(self.model_heads),
            "model.cond_dim" => s(self.model_cond_dim),
            "model.ffn_mult" => s(self.model_ffn_mult),
            "model.self_attention" => s(self.model_self_attention),
            "train.batch_size" => s(self.batch_size),
            "train.lr" => s(self.learning_rate),
            "train.warmup" => s(self.warmup_steps),
            "train.steps" => s(self.train_steps),
            "train.log_every" => s(self.log_every),
            "train.clip_norm" => optional(&self.clip_norm),
            "sampler.steps" => s(self.sampler_steps),
            "sampler.guidance" => s(self.guidance),
            "sampler.mode" => s(self.sampler_mode.name()),
            "data.d" => s(self.data_d),
            "data.K" => s(self.data_k),
            "data.separation" => s(self.separation),
            "data.sigma_a" => s(self.sigma_a),
            "data.sigma_v" => s(self.sigma_v),
            "data.audio_shape" => shape_str(&self.audio_shape),
            "data.video_shape" => shape_str(&self.video_shape),
            "data.n" => s(self.data_n),
            _ => unreachable!("key list and renderer agree"),
        }
    }

    /// All keys with resolved values, one `key = value` per line.
    pub fn canonical(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value(k))).collect()
    }

    pub fn digest(&self) -> String {
        digest::short(self.canonical().as_bytes())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn layout(&self) -> Result<ModalityLayout> {
        ModalityLayout::new(self.audio_shape, self.video_shape)
    }

    pub fn model_config(&self, layout: &ModalityLayout) -> DenoiserConfig {
        let mut cfg = DenoiserConfig::new(*layout, self.data_k, self.schedule_steps);
        cfg.model_dim = self.model_dim;
        cfg.num_blocks = self.model_blocks;
        cfg.num_heads = self.model_heads;
        cfg.cond_dim = self.model_cond_dim;
        cfg.ffn_mult = self.model_ffn_mult;
        cfg.self_attention = self.model_self_attention;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            total_steps: self.train_steps,
            seed: self.seed,
            clip_norm: self.clip_norm,
            log_every: self.log_every,
            ..TrainConfig::default()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler_steps,
            guidance: self.guidance,
            mode: self.sampler_mode,
            seed: self.seed,
        }
    }

    pub fn generator(&self) -> Result<GeneratorSpec> {
        make_generator(
            self.data_d,
            self.layout()?,
            self.data_k,
            self.separation,
            self.sigma_a,
            self.sigma_v,
            self.seed,
        )
    }
}
