//! Command-line front end: data generation, training, sampling, evaluation
//! and plotting over the file formats defined here.

pub mod commands;
pub mod config;
pub mod container;
pub mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use unidiff_core::{Error, TaskId};

use crate::commands::{ClassChoice, EvalArgs, Metric, SampleArgs, TrainArgs};
use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::MissingConditioning(_)
        | Error::InvalidClass { .. }
        | Error::StepOutOfRange { .. } => EXIT_USAGE,
        Error::NonFinite(_) | Error::Numerical(_) | Error::EmptyMask => EXIT_NUMERICAL,
        Error::ShapeMismatch { .. }
        | Error::Format(_)
        | Error::DigestMismatch { .. }
        | Error::VersionMismatch { .. }
        | Error::ConfigMismatch(_)
        | Error::Io(_) => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "unidiff",
    version,
    about = "Joint audio-video latent diffusion on synthetic data",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run config file (`key = value` lines); defaults apply to absent keys.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> unidiff_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw labelled pairs from the toy generator into a container.
    ///
    /// Also writes `<out>.spec.json` (the generator) and `<out>.meta`.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of pairs [default: data.n]
        #[arg(long)]
        n: Option<usize>,
        /// Seed selecting which pairs are drawn [default: seed]
        #[arg(long)]
        sample_seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train the denoiser on a container, or on fresh generator draws.
    ///
    /// Writes the checkpoint, `<out>.log.csv` (step,task,loss,lr,config_digest)
    /// and `<out>.meta`. A non-finite loss dumps `<out>.failed` and exits 3.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Training log path [default: <out>.log.csv]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write the checkpoint every this many steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Generate latents with a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// t2av, a2v or v2a
        #[arg(long)]
        task: String,
        /// Class id, `null`, or `cycle` (sample i gets class i mod K)
        #[arg(long, default_value = "null")]
        class: String,
        /// Container holding the clean modality for a2v and v2a.
        #[arg(long)]
        condition: Option<PathBuf>,
        /// Number of samples [default: conditioning count, else data.n]
        #[arg(long)]
        n: Option<usize>,
        /// Strided sampling steps [default: sampler.steps]
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale w [default: sampler.guidance]
        #[arg(long)]
        guidance: Option<f64>,
        /// `strided` or `ancestral` [default: sampler.mode]
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score generated containers and write one CSV row per metric.
    ///
    /// Columns: source,task,guidance,metric,value,n,config_digest,parameter_digest.
    /// Metrics: frechet_{audio,video}, prior_frechet_*, frechet_ratio_* and
    /// kl_* against the reference; is_analog, class_accuracy, alignment and
    /// alignment_shuffled from the generator spec.
    Eval {
        /// Generated container; repeat for several.
        #[arg(long, required = true)]
        generated: Vec<PathBuf>,
        /// Real data to compare against.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Generator spec JSON; also the reference when --reference is absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Comma-separated subset of frechet,kl,is,accuracy,alignment
        #[arg(long, value_delimiter = ',', default_value = "frechet,kl,is,accuracy,alignment")]
        metrics: Vec<String>,
        /// Evaluate even when parameter or config digests differ.
        #[arg(long)]
        allow_mismatch: bool,
        /// Seed for prior draws and shuffled pairings.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Render a training log or eval CSV as SVG.
    Plot {
        #[arg(long, short)]
        input: PathBuf,
        /// Only plot this eval metric.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn opt(p: &Option<PathBuf>) -> Option<&Path> {
    p.as_deref()
}

pub fn execute(cmd: &Command) -> unidiff_core::Result<()> {
    match cmd {
        Command::GenData { config, n, sample_seed, out } => {
            let cfg = config.resolve()?;
            commands::gen_data(&cfg, n.unwrap_or(cfg.data_n), sample_seed.unwrap_or(cfg.seed), out)?;
        }
        Command::Train { config, data, out, log, checkpoint_every } => {
            let cfg = config.resolve()?;
            let args = TrainArgs { data: opt(data), out, log: opt(log), checkpoint_every: *checkpoint_every };
            commands::train(&cfg, &args)?;
        }
        Command::Sample { checkpoint, task, class, condition, n, steps, guidance, mode, seed, out } => {
            let args = SampleArgs {
                checkpoint,
                task: TaskId::parse(task)?,
                class: ClassChoice::parse(class)?,
                condition: opt(condition),
                n: *n,
                steps: *steps,
                guidance: *guidance,
                mode: mode.as_deref(),
                seed: *seed,
                out,
            };
            commands::sample(&args)?;
        }
        Command::Eval { generated, reference, spec, metrics, allow_mismatch, seed, out } => {
            let metrics = metrics.iter().map(|m| Metric::parse(m)).collect::<unidiff_core::Result<Vec<_>>>()?;
            let args = EvalArgs {
                generated,
                reference: opt(reference),
                spec: opt(spec),
                metrics: &metrics,
                allow_mismatch: *allow_mismatch,
                seed: *seed,
                out,
            };
            commands::eval(&args)?;
        }
        Command::Plot { input, metric, out } => {
            let text = std::fs::read_to_string(input)?;
            let fig = plot::figure_from_csv(&text, metric.as_deref())?;
            std::fs::write(out, plot::render(&fig))?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
