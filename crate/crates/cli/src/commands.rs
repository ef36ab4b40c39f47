//! The subcommands. Each returns the paths it wrote.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DVector;
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use unidiff_core::digest;
use unidiff_core::metrics::{
    alignment_score, frechet_distance, gaussian_fit, gaussian_kl, inception_score_analog, modality_fit,
    GaussianFit,
};
use unidiff_core::sampler::{generate_batch, SampleRequest};
use unidiff_core::toy_data::{bayes_posterior, flatten, sample_pair, GeneratorSpec};
use unidiff_core::train::{Checkpoint, DataSource, LogRecord, Record, Trainer};
use unidiff_core::{Error, Modality, Result, TaskId};

use crate::config::RunConfig;
use crate::container::{sidecar, Container, Meta};

pub const TRAIN_LOG_HEADER: &str = "step,task,loss,lr,config_digest";
pub const EVAL_HEADER: &str = "source,task,guidance,metric,value,n,config_digest,parameter_digest";

fn write_spec(spec: &GeneratorSpec, artifact: &Path) -> Result<PathBuf> {
    let path = sidecar(artifact, "spec.json");
    let json = serde_json::to_string_pretty(spec).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, json + "\n")?;
    Ok(path)
}

pub fn read_spec(path: &Path) -> Result<GeneratorSpec> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn base_meta(cfg: &RunConfig, kind: &str) -> Meta {
    let mut m = Meta::default();
    m.set("kind", kind).set("config_digest", cfg.digest()).set("seed", cfg.seed);
    m
}

/// Draws `n` labelled pairs with uniformly chosen classes.
///
/// The generator itself comes from the config seed; `sample_seed` only
/// selects which pairs are drawn, so held-out sets share one distribution.
pub fn gen_data(cfg: &RunConfig, n: usize, sample_seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let spec = cfg.generator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    rng.set_stream(3);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..spec.num_classes);
        let (audio, video) = sample_pair(&spec, class, &mut rng)?;
        records.push(Record { audio, video, class: Some(class) });
    }
    Container::new(spec.layout, spec.num_classes, records)?.write(out)?;
    let spec_path = write_spec(&spec, out)?;
    let mut meta = base_meta(cfg, "data");
    meta.set("n", n).set("sample_seed", sample_seed).set("spec_digest", spec.digest());
    meta.write_for(out)?;
    info!("wrote {n} pairs to {}", out.display());
    Ok(vec![out.to_path_buf(), spec_path, sidecar(out, "meta")])
}

pub struct TrainArgs<'a> {
    pub data: Option<&'a Path>,
    pub out: &'a Path,
    pub log: Option<&'a Path>,
    pub checkpoint_every: Option<usize>,
}

/// Trains on a container or, without one, on fresh draws from the generator.
///
/// On a non-finite loss the current state is written to `<out>.failed`
/// before the error is returned.
pub fn train(cfg: &RunConfig, args: &TrainArgs<'_>) -> Result<Vec<PathBuf>> {
    let layout = cfg.layout()?;
    let model = cfg.model_config(&layout);
    let spec = cfg.generator()?;
    let dataset = match args.data {
        Some(path) => {
            let c = Container::read(path)?;
            if c.layout != layout || c.num_classes != cfg.data_k {
                return Err(Error::ConfigMismatch(format!(
                    "{} holds {} with K = {}, config expects {} with K = {}",
                    path.display(),
                    c.layout.describe(),
                    c.num_classes,
                    layout.describe(),
                    cfg.data_k
                )));
            }
            Some(c.records)
        }
        None => None,
    };
    let source = match &dataset {
        Some(records) => DataSource::Dataset(records),
        None => DataSource::Generator(&spec),
    };
    let canonical = cfg.canonical();
    let digest = cfg.digest();
    let log_path = args.log.map(Path::to_path_buf).unwrap_or_else(|| sidecar(args.out, "log.csv"));
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{TRAIN_LOG_HEADER}")?;

    let mut trainer = Trainer::new(cfg.train_config(), &model, cfg.schedule()?)?;
    let every = cfg.log_every;
    let result = trainer.run(source, |t, r: &LogRecord| {
        if r.step % every == 0 {
            writeln!(log, "{},{digest}", r.csv_row())?;
        }
        if let Some(k) = args.checkpoint_every {
            if k > 0 && r.step % k == 0 && r.step < cfg.train_steps {
                t.checkpoint(&canonical).save(args.out)?;
                info!("step {}: checkpoint written", r.step);
            }
        }
        Ok(())
    });
    log.flush()?;
    if let Err(e) = result {
        if matches!(e, Error::NonFinite(_) | Error::Numerical(_)) {
            let dump = sidecar(args.out, "failed");
            trainer.checkpoint(&canonical).save(&dump)?;
            warn!("training failed at step {}; state dumped to {}", trainer.step_count() + 1, dump.display());
        }
        return Err(e);
    }
    trainer.checkpoint(&canonical).save(args.out)?;
    let mut meta = base_meta(cfg, "checkpoint");
    meta.set("step", trainer.step_count())
        .set("parameter_digest", trainer.params().digest())
        .set("spec_digest", spec.digest())
        .set("data", args.data.map_or_else(|| "generator".to_string(), |p| p.display().to_string()));
    meta.write_for(args.out)?;
    Ok(vec![args.out.to_path_buf(), log_path, sidecar(args.out, "meta")])
}

/// Class assignment for generated samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassChoice {
    Null,
    Fixed(usize),
    /// Sample `i` gets class `i mod K`.
    Cycle,
}

impl ClassChoice {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "null" => Ok(Self::Null),
            "cycle" => Ok(Self::Cycle),
            k => k
                .parse()
                .map(Self::Fixed)
                .map_err(|_| Error::InvalidConfig(format!("class must be an id, 'null' or 'cycle', got '{k}'"))),
        }
    }

    fn name(self) -> String {
        match self {
            Self::Null => "null".into(),
            Self::Cycle => "cycle".into(),
            Self::Fixed(k) => k.to_string(),
        }
    }

    fn class(self, i: usize, k: usize) -> Option<usize> {
        match self {
            Self::Null => None,
            Self::Fixed(c) => Some(c),
            Self::Cycle => Some(i % k),
        }
    }
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub task: TaskId,
    pub class: ClassChoice,
    pub condition: Option<&'a Path>,
    /// Defaults to the conditioning count, else to `data.n` of the run config.
    pub n: Option<usize>,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
    pub mode: Option<&'a str>,
    pub seed: Option<u64>,
    pub out: &'a Path,
}

/// Loads a checkpoint together with the run config stored inside it.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.meta.run_config)
        .map_err(|e| Error::Format(format!("{}: stored run config: {e}", path.display())))?;
    ckpt.check_model(&cfg.model_config(&cfg.layout()?))?;
    Ok((ckpt, cfg))
}

pub fn sample(args: &SampleArgs<'_>) -> Result<Vec<PathBuf>> {
    let (ckpt, run_cfg) = load_checkpoint(args.checkpoint)?;
    let mut cfg = run_cfg.clone();
    if let Some(s) = args.steps {
        cfg.sampler_steps = s;
    }
    if let Some(w) = args.guidance {
        cfg.guidance = w;
    }
    if let Some(m) = args.mode {
        cfg.set("sampler.mode", m)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let schedule = cfg.schedule()?;
    let scfg = cfg.sampler_config();
    scfg.validate(&schedule)?;
    let params = ckpt.parameters()?;
    let layout = params.config().layout;
    let k = params.config().num_classes;

    let condition = match (args.task, args.condition) {
        (TaskId::T2AV, Some(_)) => {
            return Err(Error::InvalidConfig("t2av does not take a conditioning file".into()));
        }
        (TaskId::T2AV, None) => None,
        (_, None) => {
            return Err(Error::MissingConditioning(match args.task {
                TaskId::A2V => "a2v needs an audio conditioning file",
                _ => "v2a needs a video conditioning file",
            }))
        }
        (_, Some(path)) => {
            let c = Container::read(path)?;
            if c.layout != layout {
                return Err(Error::ConfigMismatch(format!(
                    "conditioning layout {} differs from checkpoint layout {}",
                    c.layout.describe(),
                    layout.describe()
                )));
            }
            if c.is_empty() {
                return Err(Error::MissingConditioning("conditioning file is empty"));
            }
            Some((c, digest::short(&std::fs::read(path)?)))
        }
    };
    let n = args
        .n
        .or_else(|| condition.as_ref().map(|(c, _)| c.len()))
        .unwrap_or(cfg.data_n);
    let clean_of = |i: usize| -> Option<&Array4<f64>> {
        let (c, _) = condition.as_ref()?;
        let r = &c.records[i % c.len()];
        Some(if args.task == TaskId::A2V { &r.audio } else { &r.video })
    };
    let requests: Vec<SampleRequest<'_>> = (0..n)
        .map(|i| SampleRequest { class: args.class.class(i, k), clean: clean_of(i).map(|a| a.view()) })
        .collect();
    let generation = generate_batch(&params, &schedule, args.task, &requests, &scfg)?;
    let records = generation
        .pairs
        .into_iter()
        .zip(&requests)
        .map(|((audio, video), r)| Record { audio, video, class: r.class })
        .collect();
    Container::new(layout, k, records)?.write(args.out)?;

    // Sampler overrides are recorded but keep the digest of the training run.
    let mut meta = base_meta(&run_cfg, "samples");
    meta.set("seed", scfg.seed)
        .set("task", args.task.name())
        .set("class", args.class.name())
        .set("n", n)
        .set("guidance", scfg.guidance)
        .set("steps", scfg.steps)
        .set("mode", scfg.mode.name())
        .set("parameter_digest", &generation.parameter_digest)
        .set("checkpoint_step", ckpt.step)
        .set("evaluations", generation.evaluations.iter().sum::<usize>());
    if let Some((_, d)) = &condition {
        meta.set("condition_digest", d);
    }
    meta.write_for(args.out)?;
    info!("wrote {n} {} samples to {}", args.task.name(), args.out.display());
    Ok(vec![args.out.to_path_buf(), sidecar(args.out, "meta")])
}

/// Which metric families `eval` computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Frechet,
    Kl,
    InceptionScore,
    Accuracy,
    Alignment,
}

impl Metric {
    pub const ALL: [Metric; 5] =
        [Metric::Frechet, Metric::Kl, Metric::InceptionScore, Metric::Accuracy, Metric::Alignment];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "frechet" => Ok(Self::Frechet),
            "kl" => Ok(Self::Kl),
            "is" => Ok(Self::InceptionScore),
            "accuracy" => Ok(Self::Accuracy),
            "alignment" => Ok(Self::Alignment),
            other => Err(Error::InvalidConfig(format!("unknown metric '{other}'"))),
        }
    }
}

pub struct EvalArgs<'a> {
    pub generated: &'a [PathBuf],
    pub reference: Option<&'a Path>,
    pub spec: Option<&'a Path>,
    pub metrics: &'a [Metric],
    pub allow_mismatch: bool,
    pub seed: u64,
    pub out: &'a Path,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub source: String,
    pub task: String,
    pub guidance: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub config_digest: String,
    pub parameter_digest: String,
}

impl EvalRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.source,
            self.task,
            self.guidance,
            self.metric,
            self.value,
            self.n,
            self.config_digest,
            self.parameter_digest
        )
    }
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n'], "_")
}

struct Reference {
    audio: GaussianFit,
    video: GaussianFit,
    config_digest: Option<String>,
}

fn exact_fit(spec: &GeneratorSpec, m: Modality, n: usize) -> Result<GaussianFit> {
    let (mean, cov) = spec.modality_moments(m);
    GaussianFit::new(mean, cov, n)
}

/// Fits of `n` draws from the N(0, I) prior of each modality.
fn prior_fits(spec_dims: (usize, usize), n: usize, seed: u64) -> Result<(GaussianFit, GaussianFit)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut draw = |d: usize| {
        let m = nalgebra::DMatrix::from_fn(n.max(2), d, |_, _| rng.sample::<f64, _>(StandardNormal));
        gaussian_fit(&m)
    };
    Ok((draw(spec_dims.0)?, draw(spec_dims.1)?))
}

/// Computes metrics for each generated file and writes the CSV.
///
/// Every sampled file must carry the same parameter digest and all inputs
/// the same config digest unless `allow_mismatch` is set.
pub fn eval(args: &EvalArgs<'_>) -> Result<Vec<EvalRow>> {
    if args.generated.is_empty() {
        return Err(Error::InvalidConfig("eval needs at least one --generated file".into()));
    }
    let spec = args.spec.map(read_spec).transpose()?;
    let reference = match (args.reference, &spec) {
        (Some(path), _) => {
            let c = Container::read(path)?;
            let pairs = c.pairs();
            Some(Reference {
                audio: modality_fit(&pairs, Modality::Audio)?,
                video: modality_fit(&pairs, Modality::Video)?,
                config_digest: Meta::read_for(path).ok().and_then(|m| m.get("config_digest").map(String::from)),
            })
        }
        (None, Some(s)) => Some(Reference {
            audio: exact_fit(s, Modality::Audio, 0)?,
            video: exact_fit(s, Modality::Video, 0)?,
            config_digest: None,
        }),
        (None, None) => None,
    };

    let mut inputs = Vec::new();
    for path in args.generated {
        let c = Container::read(path)?;
        let meta = Meta::read_for(path).unwrap_or_default();
        if let Some(s) = &spec {
            if s.layout != c.layout {
                return Err(Error::ConfigMismatch(format!(
                    "{} has layout {}, spec has {}",
                    path.display(),
                    c.layout.describe(),
                    s.layout.describe()
                )));
            }
        }
        inputs.push((path, c, meta));
    }
    check_digests(&inputs, reference.as_ref().and_then(|r| r.config_digest.as_deref()), args.allow_mismatch)?;

    let wants = |m: Metric| args.metrics.contains(&m);
    let mut rows = Vec::new();
    for (i, (path, c, meta)) in inputs.iter().enumerate() {
        let n = c.len();
        let pairs = c.pairs();
        let row = |metric: &str, value: f64, n: usize| EvalRow {
            source: csv_field(&path.display().to_string()),
            task: meta.get("task").unwrap_or("data").to_string(),
            guidance: meta.get("guidance").unwrap_or("").to_string(),
            metric: metric.to_string(),
            value,
            n,
            config_digest: meta.get("config_digest").unwrap_or("").to_string(),
            parameter_digest: meta.get("parameter_digest").unwrap_or("").to_string(),
        };
        if let Some(r) = &reference {
            if n < 2 {
                warn!("{}: too few samples for distribution metrics", path.display());
            } else {
                let fits = [
                    ("audio", modality_fit(&pairs, Modality::Audio)?, &r.audio),
                    ("video", modality_fit(&pairs, Modality::Video)?, &r.video),
                ];
                let (pa, pv) = prior_fits((c.layout.audio_flat_dim(), c.layout.video_flat_dim()), n, args.seed)?;
                let priors = [pa, pv];
                for ((name, fit, reference), prior) in fits.iter().zip(&priors) {
                    if wants(Metric::Frechet) {
                        let fd = frechet_distance(fit, reference)?;
                        let base = frechet_distance(prior, reference)?;
                        rows.push(row(&format!("frechet_{name}"), fd, n));
                        rows.push(row(&format!("prior_frechet_{name}"), base, n));
                        rows.push(row(&format!("frechet_ratio_{name}"), fd / base, n));
                    }
                    if wants(Metric::Kl) {
                        rows.push(row(&format!("kl_{name}"), gaussian_kl(fit, reference)?, n));
                    }
                }
            }
        }
        let Some(spec) = &spec else { continue };
        if n == 0 {
            continue;
        }
        if wants(Metric::InceptionScore) || wants(Metric::Accuracy) {
            let posteriors = c
                .records
                .iter()
                .map(|r| bayes_posterior(spec, Some(r.audio.view()), Some(r.video.view())))
                .collect::<Result<Vec<_>>>()?;
            if wants(Metric::InceptionScore) {
                rows.push(row("is_analog", inception_score_analog(&posteriors)?, n));
            }
            let labelled: Vec<_> = c.records.iter().zip(&posteriors).filter_map(|(r, p)| Some((r.class?, p))).collect();
            if wants(Metric::Accuracy) && !labelled.is_empty() {
                let hits = labelled.iter().filter(|(k, p)| argmax(p) == *k).count();
                rows.push(row("class_accuracy", hits as f64 / labelled.len() as f64, labelled.len()));
            }
        }
        if wants(Metric::Alignment) {
            let flat: Vec<(DVector<f64>, DVector<f64>)> =
                pairs.iter().map(|(a, v)| (flatten(a.view()), flatten(v.view()))).collect();
            let joint = alignment_score(&flat, spec)?;
            rows.push(row("alignment", joint.score, joint.used));
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            rng.set_stream(5 + i as u64);
            order.shuffle(&mut rng);
            let shuffled: Vec<_> = order.iter().enumerate().map(|(j, &o)| (flat[j].0.clone(), flat[o].1.clone())).collect();
            let s = alignment_score(&shuffled, spec)?;
            rows.push(row("alignment_shuffled", s.score, s.used));
        }
    }
    let mut out = BufWriter::new(File::create(args.out)?);
    writeln!(out, "{EVAL_HEADER}")?;
    for r in &rows {
        writeln!(out, "{}", r.csv())?;
    }
    out.flush()?;
    Ok(rows)
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn check_digests(inputs: &[(&PathBuf, Container, Meta)], reference: Option<&str>, allow: bool) -> Result<()> {
    let mismatch = |what: String| {
        if allow {
            warn!("{what} (allowed by --allow-mismatch)");
            Ok(())
        } else {
            Err(Error::ConfigMismatch(format!("{what}; pass --allow-mismatch to evaluate anyway")))
        }
    };
    let mut params: Option<(&Path, &str)> = None;
    let mut configs: Option<(&Path, &str)> = reference.map(|d| (Path::new("reference"), d));
    for (path, _, meta) in inputs {
        if let Some(p) = meta.get("parameter_digest") {
            match params {
                Some((first, q)) if q != p => mismatch(format!(
                    "parameter digest of {} ({p}) differs from {} ({q})",
                    path.display(),
                    first.display()
                ))?,
                None => params = Some((path, p)),
                _ => {}
            }
        }
        if let Some(d) = meta.get("config_digest") {
            match configs {
                Some((first, q)) if q != d => mismatch(format!(
                    "config digest of {} ({d}) differs from {} ({q})",
                    path.display(),
                    first.display()
                ))?,
                None => configs = Some((path, d)),
                _ => {}
            }
        }
    }
    Ok(())
}
