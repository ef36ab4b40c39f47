//! Guided reverse diffusion for all three tasks.
//!
//! Noised modalities start from a standard normal draw. A clean modality is
//! written back after every step, so it leaves the sampler untouched.

use ndarray::{s, Array, Array2, Array4, ArrayView, ArrayView4, Dimension, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiseInput, DenoiserParameters};
use crate::error::{Error, Result};
use crate::latent::{pack, unpack, Modality, ModalityLayout, TaskId, UnifiedLatent};
use crate::schedule::NoiseSchedule;
use crate::tasks::TaskSpec;
use crate::toy_data::GaussianScoreOracle;

pub const DEFAULT_STEPS: usize = 30;
pub const DEFAULT_GUIDANCE: f64 = 5.0;

/// Samples are advanced together in chunks of this many latents.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerMode {
    /// Every step of the training chain, with posterior noise.
    AncestralFull,
    /// Noise-free update over a uniform subsequence of steps.
    StridedDeterministic,
}

impl SamplerMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::AncestralFull => "ancestral",
            SamplerMode::StridedDeterministic => "strided",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ancestral" => Ok(SamplerMode::AncestralFull),
            "strided" => Ok(SamplerMode::StridedDeterministic),
            other => Err(Error::InvalidConfig(format!("unknown sampler mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of strided steps. Ancestral mode always walks the full chain.
    pub steps: usize,
    pub guidance: f64,
    pub mode: SamplerMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            mode: SamplerMode::StridedDeterministic,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.len() {
            return Err(Error::InvalidConfig(format!(
                "sampler steps must be in 1..={}, got {}",
                schedule.len(),
                self.steps
            )));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::InvalidConfig(format!("guidance must be >= 0, got {}", self.guidance)));
        }
        Ok(())
    }
}

/// Anything that predicts noise for a batch of packed latents.
pub trait NoisePredictor {
    fn layout(&self) -> ModalityLayout;
    fn num_classes(&self) -> usize;
    /// Stacked `(batch * packed_len, token_dim)` predictions.
    fn predict(&self, inputs: &[DenoiseInput<'_>]) -> Result<Array2<f64>>;
    /// Identifies the parameters behind the predictions.
    fn fingerprint(&self) -> String;
}

impl NoisePredictor for DenoiserParameters {
    fn layout(&self) -> ModalityLayout {
        self.config().layout
    }

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict(&self, inputs: &[DenoiseInput<'_>]) -> Result<Array2<f64>> {
        self.forward_batch(inputs)
    }

    fn fingerprint(&self) -> String {
        self.digest()
    }
}

impl NoisePredictor for GaussianScoreOracle {
    fn layout(&self) -> ModalityLayout {
        self.spec().layout
    }

    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn predict(&self, inputs: &[DenoiseInput<'_>]) -> Result<Array2<f64>> {
        GaussianScoreOracle::predict(self, inputs)
    }

    fn fingerprint(&self) -> String {
        format!("oracle-{}", self.spec().digest())
    }
}

/// `eps_uncond + w (eps_cond - eps_uncond)`.
pub fn cfg_combine<D: Dimension>(
    eps_uncond: ArrayView<'_, f64, D>,
    eps_cond: ArrayView<'_, f64, D>,
    w: f64,
) -> Result<Array<f64, D>> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::shape(eps_uncond.shape(), eps_cond.shape()));
    }
    Ok(Zip::from(&eps_uncond)
        .and(&eps_cond)
        .map_collect(|&u, &c| u + w * (c - u)))
}

/// Uniformly spaced descending steps from `total` down to 1.
///
/// A single step returns `[total]`.
pub fn stride_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidConfig(format!("need 1 <= steps <= {total}, got {steps}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| (total as f64 - span * i as f64).round() as usize)
        .collect())
}

/// One latent to generate.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub class: Option<usize>,
    /// The conditioning modality for A2V (audio) or V2A (video).
    pub clean: Option<ArrayView4<'a, f64>>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub pairs: Vec<(Array4<f64>, Array4<f64>)>,
    /// [`NoisePredictor::fingerprint`] of the model that produced `pairs`.
    pub parameter_digest: String,
    /// Denoiser evaluations spent on each sample.
    pub evaluations: Vec<usize>,
}

/// Generate one pair. Equivalent to the first request of [`generate_batch`].
pub fn generate<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    task: TaskId,
    class: Option<usize>,
    clean: Option<ArrayView4<'_, f64>>,
    cfg: &SamplerConfig,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let mut out = generate_batch(model, schedule, task, &[SampleRequest { class, clean }], cfg)?;
    Ok(out.pairs.pop().expect("one request gives one pair"))
}

/// Generate one pair per request.
///
/// Request `i` draws from its own random stream (`cfg.seed`, stream `i`),
/// so results do not depend on how requests are chunked.
pub fn generate_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    task: TaskId,
    requests: &[SampleRequest<'_>],
    cfg: &SamplerConfig,
) -> Result<Generation> {
    cfg.validate(schedule)?;
    let layout = model.layout();
    let spec = TaskSpec::for_task(task);
    let clean_modality = spec.clean.first().copied();
    for r in requests {
        check_request(r, clean_modality, &layout, model.num_classes())?;
    }
    let mut pairs = Vec::with_capacity(requests.len());
    let mut evaluations = Vec::with_capacity(requests.len());
    for (c, chunk) in requests.chunks(CHUNK).enumerate() {
        let (mut got, evals) = run_chunk(model, schedule, &spec, chunk, c * CHUNK, cfg)?;
        pairs.append(&mut got);
        evaluations.extend(evals);
    }
    Ok(Generation { pairs, parameter_digest: model.fingerprint(), evaluations })
}

fn check_request(
    r: &SampleRequest<'_>,
    clean_modality: Option<Modality>,
    layout: &ModalityLayout,
    num_classes: usize,
) -> Result<()> {
    if let Some(k) = r.class {
        if k >= num_classes {
            return Err(Error::InvalidClass { class: k, num_classes });
        }
    }
    match (clean_modality, r.clean) {
        (Some(Modality::Audio), None) => Err(Error::MissingConditioning("A2V needs a clean audio latent")),
        (Some(Modality::Video), None) => Err(Error::MissingConditioning("V2A needs a clean video latent")),
        (Some(m), Some(x)) => {
            let want = match m {
                Modality::Audio => layout.audio_shape(),
                Modality::Video => layout.video_shape(),
            };
            if x.shape() != want {
                return Err(Error::shape(&want, x.shape()));
            }
            Ok(())
        }
        (None, _) => Ok(()),
    }
}

fn run_chunk<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    spec: &TaskSpec,
    requests: &[SampleRequest<'_>],
    first_index: usize,
    cfg: &SamplerConfig,
) -> Result<(Vec<(Array4<f64>, Array4<f64>)>, Vec<usize>)> {
    let layout = model.layout();
    let len = layout.packed_len();
    let n = requests.len();
    let mask = spec.noise_mask(&layout);
    let clean_modality = spec.clean.first().copied();

    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((first_index + i) as u64);
            rng
        })
        .collect();

    // Clean tokens of each request, packed once.
    let anchors: Vec<Option<UnifiedLatent>> = requests
        .iter()
        .map(|r| clean_anchor(r, clean_modality, &layout))
        .collect::<Result<_>>()?;

    let mut z = Array2::zeros((n * len, layout.token_dim()));
    for (i, rng) in rngs.iter_mut().enumerate() {
        let mut block = z.slice_mut(s![i * len..(i + 1) * len, ..]);
        fill_noise(&mut block, &mask, rng);
    }
    restore_clean(&mut z, &anchors, clean_modality, &layout);

    let guided: Vec<bool> = requests
        .iter()
        .map(|r| r.class.is_some() && cfg.guidance != 1.0)
        .collect();
    let mut evaluations = vec![0usize; n];

    let schedule_steps: Vec<(usize, usize)> = match cfg.mode {
        SamplerMode::AncestralFull => (1..=schedule.len()).rev().map(|t| (t, t - 1)).collect(),
        SamplerMode::StridedDeterministic => {
            let ts = stride_timesteps(schedule.len(), cfg.steps)?;
            ts.iter()
                .enumerate()
                .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
                .collect()
        }
    };

    for &(t, t_prev) in &schedule_steps {
        let eps = guided_prediction(model, spec.task, &z, t, requests, &guided, cfg.guidance, &mut evaluations)?;
        z = match cfg.mode {
            SamplerMode::AncestralFull => {
                let mut noise = Array2::zeros(z.raw_dim());
                if t > 1 {
                    for (i, rng) in rngs.iter_mut().enumerate() {
                        let mut block = noise.slice_mut(s![i * len..(i + 1) * len, ..]);
                        fill_noise(&mut block, &mask, rng);
                    }
                }
                schedule.posterior_step(z.view(), t, eps.view(), noise.view())?
            }
            SamplerMode::StridedDeterministic => schedule.strided_step(z.view(), t, t_prev, eps.view())?,
        };
        // Padding and clean elements never carry diffusion state.
        for i in 0..n {
            let mut block = z.slice_mut(s![i * len..(i + 1) * len, ..]);
            block *= &mask;
        }
        restore_clean(&mut z, &anchors, clean_modality, &layout);
    }

    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let latent = UnifiedLatent::from_data(z.slice(s![i * len..(i + 1) * len, ..]).to_owned(), layout)?;
        let (mut a, mut v) = unpack(&latent)?;
        // Hand back the caller's clean latent itself.
        match (clean_modality, requests[i].clean) {
            (Some(Modality::Audio), Some(x)) => a.assign(&x),
            (Some(Modality::Video), Some(x)) => v.assign(&x),
            _ => {}
        }
        pairs.push((a, v));
    }
    Ok((pairs, evaluations))
}

fn clean_anchor(
    r: &SampleRequest<'_>,
    clean_modality: Option<Modality>,
    layout: &ModalityLayout,
) -> Result<Option<UnifiedLatent>> {
    let (Some(m), Some(x)) = (clean_modality, r.clean) else {
        return Ok(None);
    };
    let audio = Array4::zeros(layout.audio_shape());
    let video = Array4::zeros(layout.video_shape());
    let packed = match m {
        Modality::Audio => pack(x, video.view(), layout)?,
        Modality::Video => pack(audio.view(), x, layout)?,
    };
    Ok(Some(packed))
}

fn restore_clean(
    z: &mut Array2<f64>,
    anchors: &[Option<UnifiedLatent>],
    clean_modality: Option<Modality>,
    layout: &ModalityLayout,
) {
    let Some(m) = clean_modality else { return };
    let len = layout.packed_len();
    let r = layout.token_range(m);
    for (i, anchor) in anchors.iter().enumerate() {
        if let Some(a) = anchor {
            z.slice_mut(s![i * len + r.start..i * len + r.end, ..])
                .assign(&a.data().slice(s![r.clone(), ..]));
        }
    }
}

fn fill_noise(block: &mut ndarray::ArrayViewMut2<'_, f64>, mask: &Array2<f64>, rng: &mut ChaCha8Rng) {
    Zip::from(block).and(mask).for_each(|x, &m| {
        let draw: f64 = StandardNormal.sample(rng);
        *x = draw * m;
    });
}

#[allow(clippy::too_many_arguments)]
fn guided_prediction<P: NoisePredictor + ?Sized>(
    model: &P,
    task: TaskId,
    z: &Array2<f64>,
    t: usize,
    requests: &[SampleRequest<'_>],
    guided: &[bool],
    w: f64,
    evaluations: &mut [usize],
) -> Result<Array2<f64>> {
    let len = model.layout().packed_len();
    let mut inputs = Vec::with_capacity(requests.len() * 2);
    for (i, r) in requests.iter().enumerate() {
        inputs.push(DenoiseInput {
            z_t: z.slice(s![i * len..(i + 1) * len, ..]),
            t,
            task,
            class: r.class,
            drop_text: false,
        });
        evaluations[i] += 1;
    }
    // Unconditional twins of the guided requests follow in order.
    let mut twins = Vec::new();
    for (i, _) in requests.iter().enumerate().filter(|(i, _)| guided[*i]) {
        inputs.push(DenoiseInput {
            z_t: z.slice(s![i * len..(i + 1) * len, ..]),
            t,
            task,
            class: None,
            drop_text: true,
        });
        evaluations[i] += 1;
        twins.push(i);
    }
    let out = model.predict(&inputs)?;
    let mut eps = out.slice(s![..requests.len() * len, ..]).to_owned();
    for (j, &i) in twins.iter().enumerate() {
        let row = (requests.len() + j) * len;
        let uncond = out.slice(s![row..row + len, ..]);
        let mut block = eps.slice_mut(s![i * len..(i + 1) * len, ..]);
        let combined = cfg_combine(uncond, block.view(), w)?;
        block.assign(&combined);
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use ndarray::{arr1, Array1};

    use super::*;
    use crate::denoiser::DenoiserConfig;

    #[test]
    fn cfg_combine_values() {
        let u = arr1(&[0.0, 2.0]);
        let c = arr1(&[1.0, -1.0]);
        assert_eq!(cfg_combine(u.view(), c.view(), 0.0).unwrap(), u);
        assert_eq!(cfg_combine(u.view(), c.view(), 1.0).unwrap(), c);
        assert_eq!(cfg_combine(u.view(), c.view(), 5.0).unwrap(), arr1(&[5.0, -13.0]));
        let short = Array1::<f64>::zeros(1);
        assert!(cfg_combine(u.view(), short.view(), 2.0).is_err());
    }

    #[test]
    fn stride_examples() {
        assert_eq!(stride_timesteps(10, 2).unwrap(), vec![10, 1]);
        let full = stride_timesteps(1000, 1000).unwrap();
        assert_eq!(full, (1..=1000).rev().collect::<Vec<_>>());
        for steps in [1, 2, 3, 7, 30, 999] {
            let ts = stride_timesteps(1000, steps).unwrap();
            assert_eq!(ts.len(), steps);
            assert_eq!(ts[0], 1000);
            assert!(ts.windows(2).all(|w| w[0] > w[1]));
            assert!(ts.iter().all(|t| (1..=1000).contains(t)));
            if steps > 1 {
                assert_eq!(*ts.last().unwrap(), 1);
            }
        }
        assert!(stride_timesteps(10, 11).is_err());
        assert!(stride_timesteps(10, 0).is_err());
    }

    fn tiny() -> (DenoiserParameters, NoiseSchedule) {
        let layout = ModalityLayout::new([1, 2, 2, 1], [1, 2, 1, 2]).unwrap();
        let mut cfg = DenoiserConfig::new(layout, 3, 20);
        cfg.model_dim = 8;
        cfg.cond_dim = 4;
        cfg.num_heads = 2;
        cfg.num_blocks = 1;
        let mut p = DenoiserParameters::init(&cfg, 3).unwrap();
        // Give the zero-initialised output map something to say.
        for (i, v) in p.values_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i * 7 % 13) as f64 - 6.0);
        }
        (p, NoiseSchedule::linear(20, 1e-3, 0.2).unwrap())
    }

    #[test]
    fn clean_modality_is_returned_exactly() {
        let (p, s) = tiny();
        let audio = Array4::from_shape_fn((1, 2, 2, 1), |(_, t, f, _)| 0.3 * t as f64 - 0.7 * f as f64 + 0.123);
        let video = Array4::from_shape_fn((1, 2, 1, 2), |(_, t, _, x)| 1.1 * t as f64 + 0.37 * x as f64);
        for mode in [SamplerMode::AncestralFull, SamplerMode::StridedDeterministic] {
            let cfg = SamplerConfig { steps: 5, mode, ..Default::default() };
            let (a, v) = generate(&p, &s, TaskId::A2V, Some(1), Some(audio.view()), &cfg).unwrap();
            assert_eq!(a, audio);
            assert!(v.iter().all(|x| x.is_finite()));
            let (a, v) = generate(&p, &s, TaskId::V2A, None, Some(video.view()), &cfg).unwrap();
            assert_eq!(v, video);
            assert!(a.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn missing_conditioning_and_bad_class() {
        let (p, s) = tiny();
        let cfg = SamplerConfig { steps: 3, ..Default::default() };
        assert!(matches!(
            generate(&p, &s, TaskId::A2V, None, None, &cfg),
            Err(Error::MissingConditioning(_))
        ));
        assert!(matches!(
            generate(&p, &s, TaskId::V2A, None, None, &cfg),
            Err(Error::MissingConditioning(_))
        ));
        assert!(matches!(
            generate(&p, &s, TaskId::T2AV, Some(3), None, &cfg),
            Err(Error::InvalidClass { .. })
        ));
        let bad = SamplerConfig { steps: 21, ..Default::default() };
        assert!(generate(&p, &s, TaskId::T2AV, None, None, &bad).is_err());
    }

    #[test]
    fn evaluation_counts() {
        let (p, s) = tiny();
        let cfg = SamplerConfig { steps: 4, guidance: 5.0, ..Default::default() };
        let reqs = [
            SampleRequest { class: None, clean: None },
            SampleRequest { class: Some(2), clean: None },
        ];
        let g = generate_batch(&p, &s, TaskId::T2AV, &reqs, &cfg).unwrap();
        assert_eq!(g.evaluations, vec![4, 8]);
        assert_eq!(g.parameter_digest, p.digest());
        let one = SamplerConfig { guidance: 1.0, ..cfg };
        let g = generate_batch(&p, &s, TaskId::T2AV, &reqs, &one).unwrap();
        assert_eq!(g.evaluations, vec![4, 4]);
    }

    #[test]
    fn seeded_and_chunk_independent() {
        let (p, s) = tiny();
        for mode in [SamplerMode::AncestralFull, SamplerMode::StridedDeterministic] {
            let cfg = SamplerConfig { steps: 6, mode, seed: 11, ..Default::default() };
            let reqs: Vec<_> = (0..5).map(|i| SampleRequest { class: Some(i % 3), clean: None }).collect();
            let all = generate_batch(&p, &s, TaskId::T2AV, &reqs, &cfg).unwrap();
            let again = generate_batch(&p, &s, TaskId::T2AV, &reqs, &cfg).unwrap();
            assert_eq!(all.pairs, again.pairs);
            let first = generate(&p, &s, TaskId::T2AV, Some(0), None, &cfg).unwrap();
            assert_eq!(first, all.pairs[0]);
            let other = SamplerConfig { seed: 12, ..cfg };
            let diff = generate(&p, &s, TaskId::T2AV, Some(0), None, &other).unwrap();
            assert_ne!(diff, first);
        }
    }
}
