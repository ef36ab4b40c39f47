//! The nine acceptance criteria. Each test writes one `PASS`/`FAIL` line to
//! stderr and then asserts.
//!
//! Criteria 4 to 7 share a 20000-step training run (several minutes on one
//! core) and are ignored by default:
//!
//! ```text
//! cargo test --release -p unidiff-cli --test acceptance -- --include-ignored --test-threads=1
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use unidiff_core::metrics::{alignment_score, frechet_distance, gaussian_fit, modality_fit, GaussianFit};
use unidiff_core::sampler::{generate_batch, SampleRequest};
use unidiff_core::tasks::{make_training_example, sample_task, TaskSpec, TrainingExample};
use unidiff_core::toy_data::{bayes_posterior, conditional_oracle, flatten, make_generator, sample_pair, Given};
use unidiff_core::train::{DataSource, Trainer, TrainConfig};
use unidiff_core::{
    DenoiserConfig, DenoiserParameters, GaussianScoreOracle, GeneratorSpec, Modality, ModalityLayout, NoiseSchedule,
    SamplerConfig, SamplerMode, TaskId,
};

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    writeln!(std::io::stderr(), "{verdict} criterion {id} ({name}): {detail}").unwrap();
}

fn layout() -> ModalityLayout {
    ModalityLayout::new([1, 4, 2, 1], [1, 2, 2, 2]).unwrap()
}

fn spec() -> GeneratorSpec {
    make_generator(2, layout(), 3, 4.0, 0.5, 0.5, 7).unwrap()
}

fn strided(guidance: f64, seed: u64) -> SamplerConfig {
    SamplerConfig { steps: 30, guidance, mode: SamplerMode::StridedDeterministic, seed }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn close(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-12
}

#[test]
fn criterion_1_diffusion_math() {
    let start = Instant::now();
    let mut ok = true;

    let s = NoiseSchedule::default();
    ok &= s.alpha_bar(0) == 1.0;
    ok &= (1..=s.len()).all(|t| s.alpha_bar(t) == s.alpha_bar(t - 1) * (1.0 - s.beta(t)));

    let two = NoiseSchedule::from_betas(vec![0.1, 0.1]).unwrap();
    let one = Array1::from_elem(1, 1.0);
    let zt = two.q_sample(one.view(), 2, one.view()).unwrap()[0];
    ok &= close(zt, 0.9 + 0.19f64.sqrt());
    let half = Array1::from_elem(1, 0.5);
    let mean = two.posterior_mean(one.view(), 2, half.view()).unwrap()[0];
    ok &= close(mean, (1.0 / 0.9f64.sqrt()) * (1.0 - (0.1 / 0.19f64.sqrt()) * 0.5));
    ok &= close(two.posterior_var(2), (1.0 - 0.9) / (1.0 - 0.81) * 0.1);
    let z = Array1::from_elem(1, zt);
    let jump = two.strided_step(z.view(), 2, 1, one.view()).unwrap()[0];
    ok &= close(jump, 0.9f64.sqrt() + 0.1f64.sqrt());

    let n = 10_000;
    let z0 = 1.7;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut chain = Array1::from_elem(n, z0);
    let mut worst: f64 = 0.0;
    for t in 1..=s.len() {
        let e = Array1::from_shape_fn(n, |_| StandardNormal.sample(&mut rng));
        chain = s.q_step(chain.view(), t, e.view()).unwrap();
        if [10, 100, 400, s.len()].contains(&t) {
            let ab = s.alpha_bar(t);
            let m = chain.sum() / n as f64;
            let v = chain.mapv(|x| (x - m).powi(2)).sum() / (n - 1) as f64;
            let var = 1.0 - ab;
            worst = worst
                .max((m - ab.sqrt() * z0).abs() / (var / n as f64).sqrt())
                .max((v - var).abs() / (var * (2.0 / (n - 1) as f64).sqrt()));
        }
    }
    let elapsed = start.elapsed();
    ok &= worst < 4.0 && elapsed < Duration::from_secs(10);
    report(1, "diffusion math", ok, format!("hand values to 1e-12, chain vs closed form worst {worst:.2} SE, {}", secs(elapsed)));
    assert!(ok);
}

fn tiny_denoiser() -> (DenoiserConfig, NoiseSchedule) {
    let layout = ModalityLayout::new([1, 2, 2, 1], [1, 2, 1, 2]).unwrap();
    let schedule = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
    let mut cfg = DenoiserConfig::new(layout, 3, schedule.len());
    cfg.model_dim = 8;
    cfg.cond_dim = 6;
    cfg.num_blocks = 1;
    cfg.num_heads = 2;
    cfg.ffn_mult = 2;
    (cfg, schedule)
}

fn random_batch(cfg: &DenoiserConfig, schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Vec<TrainingExample> {
    let layout = cfg.layout;
    (0..6)
        .map(|_| {
            let a = Array4::from_shape_fn(layout.audio_shape(), |_| rng.random_range(-1.5..1.5));
            let v = Array4::from_shape_fn(layout.video_shape(), |_| rng.random_range(-1.5..1.5));
            let task = sample_task(rng);
            let class = rng.random_range(0..cfg.num_classes);
            make_training_example(&TaskSpec::for_task(task), a.view(), v.view(), class, cfg.num_classes, &layout, schedule, rng)
                .unwrap()
        })
        .collect()
}

#[test]
fn criterion_2_gradients() {
    let start = Instant::now();
    let (cfg, schedule) = tiny_denoiser();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut p = DenoiserParameters::init(&cfg, 31).unwrap();
    for v in p.values_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let batch = random_batch(&cfg, &schedule, &mut rng);
    let (_, grads) = p.gradients(&schedule, &batch).unwrap();
    let loss = |q: &DenoiserParameters| q.gradients(&schedule, &batch).unwrap().0;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let i = rng.random_range(0..p.len());
        let (mut plus, mut minus) = (p.clone(), p.clone());
        plus.values_mut()[i] += h;
        minus.values_mut()[i] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let g = grads.values()[i];
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-4 && elapsed < Duration::from_secs(60);
    report(2, "gradient check", ok, format!("max relative error {worst:.2e} over 200 coordinates, {}", secs(elapsed)));
    assert!(ok);
}

#[test]
fn criterion_3_oracle_sampler() {
    let start = Instant::now();
    let spec = spec();
    let schedule = NoiseSchedule::default();
    let oracle = GaussianScoreOracle::new(&spec, &schedule).unwrap();
    let reqs = vec![SampleRequest { class: None, clean: None }; 5000];
    let mut ok = true;
    let mut detail = Vec::new();
    for (mode, steps, bound) in [(SamplerMode::AncestralFull, 1000, 0.05), (SamplerMode::StridedDeterministic, 30, 0.1)] {
        let cfg = SamplerConfig { steps, guidance: 5.0, mode, seed: 1 };
        let g = generate_batch(&oracle, &schedule, TaskId::T2AV, &reqs, &cfg).unwrap();
        for m in [Modality::Audio, Modality::Video] {
            let (mean, cov) = spec.modality_moments(m);
            let truth = GaussianFit::new(mean, cov, usize::MAX).unwrap();
            let fd = frechet_distance(&modality_fit(&g.pairs, m).unwrap(), &truth).unwrap();
            ok &= fd <= bound;
            detail.push(format!("{} {m:?} {fd:.4} (<= {bound})", mode.name()));
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    report(3, "analytic-score sampler", ok, format!("{}, {}", detail.join(", "), secs(elapsed)));
    assert!(ok);
}

struct Trained {
    params: DenoiserParameters,
    baseline: [f64; 3],
    tail_medians: [f64; 3],
    train_time: Duration,
}

/// The criterion 4 model: default training settings on the acceptance problem.
fn trained() -> &'static Trained {
    static MODEL: OnceLock<Trained> = OnceLock::new();
    MODEL.get_or_init(|| {
        let start = Instant::now();
        let spec = spec();
        let cfg = TrainConfig { total_steps: 20_000, ..TrainConfig::default() };
        let mut trainer = Trainer::new(cfg, &DenoiserConfig::new(layout(), 3, 1000), NoiseSchedule::default()).unwrap();
        let baseline = trainer.baseline_losses(DataSource::Generator(&spec), 20).unwrap();
        trainer.run(DataSource::Generator(&spec), |_, _| Ok(())).unwrap();
        let log = trainer.log();
        let tail = &log[log.len() - 500..];
        let tail_medians = TaskId::ALL.map(|task| {
            let mut losses: Vec<f64> = tail.iter().filter(|r| r.task == task).map(|r| r.loss).collect();
            losses.sort_by(f64::total_cmp);
            losses[losses.len() / 2]
        });
        Trained { params: trainer.into_params(), baseline, tail_medians, train_time: start.elapsed() }
    })
}

fn real_pairs(spec: &GeneratorSpec, n: usize, seed: u64) -> Vec<(Array4<f64>, Array4<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..spec.num_classes);
            let (a, v) = sample_pair(spec, k, &mut rng).unwrap();
            (a, v, k)
        })
        .collect()
}

fn unconditional_samples(model: &DenoiserParameters) -> Vec<(Array4<f64>, Array4<f64>)> {
    let reqs = vec![SampleRequest { class: None, clean: None }; 2000];
    generate_batch(model, &NoiseSchedule::default(), TaskId::T2AV, &reqs, &strided(5.0, 41)).unwrap().pairs
}

#[test]
#[ignore = "trains for 20000 steps"]
fn criterion_4_end_to_end() {
    let spec = spec();
    let model = trained();
    let start = Instant::now();
    let generated = unconditional_samples(&model.params);
    let held_out: Vec<_> = real_pairs(&spec, 2000, 4242).into_iter().map(|(a, v, _)| (a, v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut ok = true;
    let mut detail = Vec::new();
    for m in [Modality::Audio, Modality::Video] {
        let real = modality_fit(&held_out, m).unwrap();
        let fd = frechet_distance(&modality_fit(&generated, m).unwrap(), &real).unwrap();
        let prior = DMatrix::from_fn(2000, real.dim(), |_, _| StandardNormal.sample(&mut rng));
        let prior_fd = frechet_distance(&gaussian_fit(&prior).unwrap(), &real).unwrap();
        ok &= fd <= 0.15 * prior_fd;
        detail.push(format!("{m:?} FD {fd:.4} vs prior {prior_fd:.4} (ratio {:.3})", fd / prior_fd));
    }
    let elapsed = model.train_time + start.elapsed();
    ok &= elapsed < Duration::from_secs(600);
    report(4, "end-to-end T2AV", ok, format!("{}, {} including training", detail.join(", "), secs(elapsed)));
    assert!(ok);
}

#[test]
#[ignore = "trains for 20000 steps"]
fn training_loss_halves() {
    let model = trained();
    let ok = (0..3).all(|i| model.tail_medians[i] < 0.5 * model.baseline[i]);
    let verdict = if ok { "PASS" } else { "FAIL" };
    writeln!(
        std::io::stderr(),
        "{verdict} training loss: last-500 medians {:.4?} vs untrained {:.4?} (t2av, a2v, v2a)",
        model.tail_medians,
        model.baseline
    )
    .unwrap();
    assert!(ok);
}

#[test]
#[ignore = "trains for 20000 steps"]
fn criterion_5_conditional_correctness() {
    let start = Instant::now();
    let spec = spec();
    let model = trained();
    let schedule = NoiseSchedule::default();
    let conditions = real_pairs(&spec, 20, 4343);
    let mut ok = true;
    let mut detail = Vec::new();
    for task in [TaskId::V2A, TaskId::A2V] {
        let (mut worst, mut exact): (f64, bool) = (0.0, true);
        for (i, (a, v, _)) in conditions.iter().enumerate() {
            let (clean, given, target) = match task {
                TaskId::V2A => (v, Given::Video(v.view()), Modality::Audio),
                _ => (a, Given::Audio(a.view()), Modality::Video),
            };
            let (want, _) = conditional_oracle(&spec, given, None).unwrap();
            let reqs = vec![SampleRequest { class: None, clean: Some(clean.view()) }; 500];
            let g = generate_batch(&model.params, &schedule, task, &reqs, &strided(5.0, 100 + i as u64)).unwrap();
            exact &= g.pairs.iter().all(|(ga, gv)| if task == TaskId::V2A { gv == clean } else { ga == clean });
            worst = worst.max((modality_fit(&g.pairs, target).unwrap().mean - &want).amax());
        }
        ok &= worst <= 0.15 && exact;
        detail.push(format!("{task} worst mean error {worst:.3} (<= 0.15), clean modality exact: {exact}"));
    }
    report(5, "conditional correctness", ok, format!("{}, {}", detail.join(", "), secs(start.elapsed())));
    assert!(ok);
}

#[test]
#[ignore = "trains for 20000 steps"]
fn criterion_6_guidance_effect() {
    let spec = spec();
    let model = trained();
    let accuracy = |w: f64| {
        let reqs: Vec<_> = (0..900).map(|i| SampleRequest { class: Some(i % 3), clean: None }).collect();
        let g = generate_batch(&model.params, &NoiseSchedule::default(), TaskId::T2AV, &reqs, &strided(w, 61)).unwrap();
        let hits = g
            .pairs
            .iter()
            .enumerate()
            .filter(|(i, (a, v))| {
                let post = bayes_posterior(&spec, Some(a.view()), Some(v.view())).unwrap();
                (0..3).max_by(|&x, &y| post[x].total_cmp(&post[y])).unwrap() == i % 3
            })
            .count();
        hits as f64 / reqs.len() as f64
    };
    let (plain, guided) = (accuracy(0.0), accuracy(5.0));
    let ok = guided >= 0.9 && guided > plain;
    report(6, "guidance effect", ok, format!("Bayes accuracy {guided:.3} at w = 5, {plain:.3} at w = 0"));
    assert!(ok);
}

#[test]
#[ignore = "trains for 20000 steps"]
fn criterion_7_joint_alignment() {
    let spec = spec();
    let model = trained();
    let pairs: Vec<(DVector<f64>, DVector<f64>)> =
        unconditional_samples(&model.params).iter().map(|(a, v)| (flatten(a.view()), flatten(v.view()))).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(71));
    let shuffled: Vec<_> = order.iter().enumerate().map(|(i, &j)| (pairs[i].0.clone(), pairs[j].1.clone())).collect();
    let joint = alignment_score(&pairs, &spec).unwrap().score;
    let independent = alignment_score(&shuffled, &spec).unwrap().score;
    let ok = joint - independent >= 0.2;
    report(7, "joint alignment", ok, format!("joint {joint:.4}, re-paired {independent:.4}, gap {:.4}", joint - independent));
    assert!(ok);
}

const SMALL: &str = "\
seed = 5
schedule.T = 100
model.dim = 8
model.blocks = 1
model.heads = 2
model.cond_dim = 8
train.steps = 40
train.warmup = 5
train.log_every = 5
sampler.steps = 5
data.n = 48
";

fn unidiff(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_unidiff")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "unidiff {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// gen-data, train, and a sample for every task, all with relative paths.
fn pipeline(dir: &Path) -> Vec<PathBuf> {
    std::fs::write(dir.join("run.cfg"), SMALL).unwrap();
    unidiff(dir, &["gen-data", "--config", "run.cfg", "--out", "data.udif"]);
    unidiff(dir, &["train", "--config", "run.cfg", "--data", "data.udif", "--out", "model.ck"]);
    unidiff(dir, &["sample", "--checkpoint", "model.ck", "--task", "t2av", "--class", "cycle", "--out", "t2av.udif"]);
    for task in ["a2v", "v2a"] {
        let out = format!("{task}.udif");
        unidiff(dir, &["sample", "--checkpoint", "model.ck", "--task", task, "--condition", "data.udif", "--out", &out]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

#[test]
fn criterion_8_single_parameter_set() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    unidiff(
        dir.path(),
        &[
            "eval", "--generated", "t2av.udif", "--generated", "a2v.udif", "--generated", "v2a.udif", "--spec",
            "data.udif.spec.json", "--out", "eval.csv",
        ],
    );
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let column = csv.lines().next().unwrap().split(',').position(|c| c == "parameter_digest").unwrap();
    let digests: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[1].to_string(), c[column].to_string())
        })
        .collect();
    let checkpoint = std::fs::read_to_string(dir.path().join("model.ck.meta")).unwrap();
    let tasks: std::collections::BTreeSet<&str> = digests.iter().map(|(t, _)| t.as_str()).collect();
    let ok = tasks.len() == 3
        && digests.iter().all(|(_, d)| *d == digests[0].1)
        && checkpoint.contains(&format!("parameter_digest = {}", digests[0].1));
    report(8, "single parameter set", ok, format!("tasks {tasks:?} evaluated with parameter digest {}", digests[0].1));
    assert!(ok);
}

#[test]
fn criterion_9_determinism() {
    let (first, second) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = pipeline(first.path());
    let b = pipeline(second.path());
    let names = |files: &[PathBuf]| -> Vec<_> { files.iter().map(|f| f.file_name().unwrap().to_owned()).collect() };
    let mut differing = Vec::new();
    for (x, y) in a.iter().zip(&b) {
        if std::fs::read(x).unwrap() != std::fs::read(y).unwrap() {
            differing.push(x.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    let ok = names(&a) == names(&b) && differing.is_empty();
    report(9, "determinism", ok, format!("{} gen-data/train/sample outputs compared, differing: {differing:?}", a.len()));
    assert!(ok);
}
