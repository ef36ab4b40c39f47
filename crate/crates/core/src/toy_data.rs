//! Synthetic coupled audio/video latents with closed-form ground truth.
//!
//! A shared factor `s ~ N(mu_k, I_d)` drives both modalities linearly:
//! `audio = W_a s + sigma_a xi_a`, `video = W_v s + sigma_v xi_v`. Classes
//! share one covariance, so every conditional and the class posterior are
//! Gaussian (or Gaussian mixtures) in closed form.
//!
//! Flat vectors follow the row-major element order of each modality grid,
//! and the joint vector is `[audio; video]`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array2, Array4, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiseInput;
use crate::error::{Error, Result};
use crate::latent::{pack, unpack, Modality, ModalityLayout, TaskId, UnifiedLatent};
use crate::schedule::NoiseSchedule;
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub d: usize,
    pub num_classes: usize,
    #[serde(with = "rows")]
    pub class_means: DMatrix<f64>,
    #[serde(with = "rows")]
    pub w_a: DMatrix<f64>,
    #[serde(with = "rows")]
    pub w_v: DMatrix<f64>,
    pub sigma_a: f64,
    pub sigma_v: f64,
    pub layout: ModalityLayout,
    pub min_separation: f64,
}

impl GeneratorSpec {
    /// `class_means` is `K x d`; `w_a` is `audio_flat_dim x d`, `w_v` is
    /// `video_flat_dim x d`.
    pub fn new(
        class_means: DMatrix<f64>,
        w_a: DMatrix<f64>,
        w_v: DMatrix<f64>,
        sigma_a: f64,
        sigma_v: f64,
        layout: ModalityLayout,
    ) -> Result<Self> {
        let d = class_means.ncols();
        let k = class_means.nrows();
        if d == 0 || k == 0 {
            return Err(Error::InvalidConfig("need d >= 1 and K >= 1".into()));
        }
        if w_a.shape() != (layout.audio_flat_dim(), d) {
            return Err(Error::shape(&[layout.audio_flat_dim(), d], &[w_a.nrows(), w_a.ncols()]));
        }
        if w_v.shape() != (layout.video_flat_dim(), d) {
            return Err(Error::shape(&[layout.video_flat_dim(), d], &[w_v.nrows(), w_v.ncols()]));
        }
        if !(sigma_a >= 0.0 && sigma_v >= 0.0) {
            return Err(Error::InvalidConfig("noise scales must be nonnegative".into()));
        }
        if column_rank(&w_a) < d || column_rank(&w_v) < d {
            return Err(Error::InvalidConfig("mixing matrices must have full column rank".into()));
        }
        let min_separation = min_pairwise_distance(&class_means);
        Ok(Self { d, num_classes: k, class_means, w_a, w_v, sigma_a, sigma_v, layout, min_separation })
    }

    pub fn audio_dim(&self) -> usize {
        self.w_a.nrows()
    }

    pub fn video_dim(&self) -> usize {
        self.w_v.nrows()
    }

    pub fn joint_dim(&self) -> usize {
        self.audio_dim() + self.video_dim()
    }

    pub fn mean(&self, class: usize) -> DVector<f64> {
        self.class_means.row(class).transpose()
    }

    /// Joint mixing matrix `[W_a; W_v]`.
    pub fn joint_mixing(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.joint_dim(), self.d);
        w.rows_mut(0, self.audio_dim()).copy_from(&self.w_a);
        w.rows_mut(self.audio_dim(), self.video_dim()).copy_from(&self.w_v);
        w
    }

    pub fn joint_class_mean(&self, class: usize) -> DVector<f64> {
        self.joint_mixing() * self.mean(class)
    }

    /// Within-class joint covariance `W W^T + diag(sigma^2)`.
    pub fn joint_cov(&self) -> DMatrix<f64> {
        let w = self.joint_mixing();
        let mut cov = &w * w.transpose();
        for i in 0..self.joint_dim() {
            let sigma = if i < self.audio_dim() { self.sigma_a } else { self.sigma_v };
            cov[(i, i)] += sigma * sigma;
        }
        cov
    }

    /// Mean and covariance of the class mixture (uniform prior).
    pub fn joint_mixture_moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let means: Vec<_> = (0..self.num_classes).map(|k| self.joint_class_mean(k)).collect();
        let weights = vec![1.0 / self.num_classes as f64; self.num_classes];
        mixture_moments(&means, &weights, &self.joint_cov())
    }

    /// Mixture moments of one modality.
    pub fn modality_moments(&self, modality: Modality) -> (DVector<f64>, DMatrix<f64>) {
        let (mean, cov) = self.joint_mixture_moments();
        let r = self.flat_range(modality);
        (
            mean.rows(r.start, r.len()).into_owned(),
            cov.view((r.start, r.start), (r.len(), r.len())).into_owned(),
        )
    }

    /// Class-conditional moments of one modality.
    pub fn class_moments(&self, modality: Modality, class: usize) -> (DVector<f64>, DMatrix<f64>) {
        let r = self.flat_range(modality);
        let mean = self.joint_class_mean(class);
        let cov = self.joint_cov();
        (
            mean.rows(r.start, r.len()).into_owned(),
            cov.view((r.start, r.start), (r.len(), r.len())).into_owned(),
        )
    }

    pub fn flat_range(&self, modality: Modality) -> std::ops::Range<usize> {
        match modality {
            Modality::Audio => 0..self.audio_dim(),
            Modality::Video => self.audio_dim()..self.joint_dim(),
        }
    }

    pub fn digest(&self) -> String {
        crate::digest::short(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

/// Class means on a regular simplex with the given edge length, mixing
/// matrices with unit-norm Gaussian columns, then each modality rescaled so
/// its marginal variance averages 1 (the stored `sigma_*` are post-scaling).
#[allow(clippy::too_many_arguments)]
pub fn make_generator(
    d: usize,
    layout: ModalityLayout,
    num_classes: usize,
    separation: f64,
    sigma_a: f64,
    sigma_v: f64,
    seed: u64,
) -> Result<GeneratorSpec> {
    if d == 0 || num_classes == 0 {
        return Err(Error::InvalidConfig("need d >= 1 and K >= 1".into()));
    }
    if !(separation > 0.0) {
        return Err(Error::InvalidConfig("separation must be positive".into()));
    }
    if num_classes - 1 > d {
        return Err(Error::InvalidConfig(format!(
            "cannot place {num_classes} equidistant means in {d} dimensions"
        )));
    }
    if !(sigma_a > 0.0 && sigma_v > 0.0) {
        return Err(Error::InvalidConfig("noise scales must be positive".into()));
    }
    let means = simplex_means(num_classes, d, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_a = unit_columns(layout.audio_flat_dim(), d, &mut rng)?;
    let mut w_v = unit_columns(layout.video_flat_dim(), d, &mut rng)?;

    // Factor covariance including the spread of the class means.
    let mut factor_cov = DMatrix::<f64>::identity(d, d);
    for k in 0..num_classes {
        let m = means.row(k).transpose();
        factor_cov += &m * m.transpose() / num_classes as f64;
    }
    let scale = |w: &DMatrix<f64>, sigma: f64| {
        let n = w.nrows() as f64;
        let avg = ((w * &factor_cov * w.transpose()).trace() + n * sigma * sigma) / n;
        1.0 / avg.sqrt()
    };
    let ca = scale(&w_a, sigma_a);
    let cv = scale(&w_v, sigma_v);
    w_a *= ca;
    w_v *= cv;
    GeneratorSpec::new(means, w_a, w_v, sigma_a * ca, sigma_v * cv, layout)
}

fn simplex_means(k: usize, d: usize, separation: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k, d);
    if k == 1 {
        return out;
    }
    // Centered basis vectors of R^k have pairwise distance sqrt(2); express
    // them in an orthonormal basis of their (k-1)-dim span.
    let centered: Vec<DVector<f64>> = (0..k)
        .map(|i| DVector::from_fn(k, |j, _| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64))
        .collect();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k - 1);
    for v in centered.iter().take(k - 1) {
        let mut u = v.clone();
        for b in &basis {
            u -= b * b.dot(v);
        }
        basis.push(u.normalize());
    }
    let scale = separation / 2f64.sqrt();
    for (i, v) in centered.iter().enumerate() {
        for (j, b) in basis.iter().enumerate() {
            out[(i, j)] = scale * b.dot(v);
        }
    }
    out
}

fn unit_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    for _ in 0..16 {
        let mut w = DMatrix::from_fn(rows, cols, |_, _| normal(rng));
        for mut c in w.column_iter_mut() {
            let n = c.norm();
            c /= n;
        }
        if column_rank(&w) == cols {
            return Ok(w);
        }
    }
    Err(Error::Numerical("could not draw a full-rank mixing matrix".into()))
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn column_rank(w: &DMatrix<f64>) -> usize {
    if w.nrows() < w.ncols() {
        return w.nrows();
    }
    let gram = w.transpose() * w;
    let eig = gram.symmetric_eigen();
    let max = eig.eigenvalues.max().max(0.0);
    eig.eigenvalues.iter().filter(|&&e| e > 1e-12 * max.max(1.0)).count()
}

fn min_pairwise_distance(means: &DMatrix<f64>) -> f64 {
    let k = means.nrows();
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            best = best.min((means.row(i) - means.row(j)).norm());
        }
    }
    best
}

pub fn flatten(x: ArrayView4<'_, f64>) -> DVector<f64> {
    DVector::from_iterator(x.len(), x.iter().copied())
}

pub fn unflatten(v: &DVector<f64>, shape: [usize; 4]) -> Result<Array4<f64>> {
    Array4::from_shape_vec(shape, v.iter().copied().collect())
        .map_err(|_| Error::shape(&shape, &[v.len()]))
}

/// Draws the factor, then audio noise, then video noise.
pub fn sample_pair<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    class: usize,
    rng: &mut R,
) -> Result<(Array4<f64>, Array4<f64>)> {
    if class >= spec.num_classes {
        return Err(Error::InvalidClass { class, num_classes: spec.num_classes });
    }
    let mut factor = spec.mean(class);
    for v in factor.iter_mut() {
        *v += normal(rng);
    }
    let mut audio = &spec.w_a * &factor;
    for v in audio.iter_mut() {
        *v += spec.sigma_a * normal(rng);
    }
    let mut video = &spec.w_v * &factor;
    for v in video.iter_mut() {
        *v += spec.sigma_v * normal(rng);
    }
    Ok((
        unflatten(&audio, spec.layout.audio_shape())?,
        unflatten(&video, spec.layout.video_shape())?,
    ))
}

/// Observed value of one modality.
#[derive(Debug, Clone, Copy)]
pub enum Given<'a> {
    Audio(ArrayView4<'a, f64>),
    Video(ArrayView4<'a, f64>),
}

/// Exact conditional mean and covariance of the other modality.
///
/// With `class = None` the result is the moment-matched mixture over classes
/// weighted by their posterior given the observation.
pub fn conditional_oracle(
    spec: &GeneratorSpec,
    given: Given<'_>,
    class: Option<usize>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (observed, value, shape) = match given {
        Given::Audio(a) => (Modality::Audio, flatten(a), spec.layout.audio_shape()),
        Given::Video(v) => (Modality::Video, flatten(v), spec.layout.video_shape()),
    };
    if value.len() != shape.iter().product::<usize>() {
        return Err(Error::shape(&shape, &[value.len()]));
    }
    let model = ConditionalModel::new(spec, Some(observed))?;
    let weights = match class {
        Some(k) => {
            if k >= spec.num_classes {
                return Err(Error::InvalidClass { class: k, num_classes: spec.num_classes });
            }
            one_hot(k, spec.num_classes)
        }
        None => model.class_posterior(&value),
    };
    let means: Vec<_> = (0..spec.num_classes).map(|k| model.target_mean(k, &value)).collect();
    Ok(mixture_moments(&means, &weights, &model.target_cov))
}

/// Class posterior under a uniform prior given one or both modalities.
pub fn bayes_posterior(
    spec: &GeneratorSpec,
    audio: Option<ArrayView4<'_, f64>>,
    video: Option<ArrayView4<'_, f64>>,
) -> Result<Vec<f64>> {
    let (idx, value): (Vec<usize>, DVector<f64>) = match (audio, video) {
        (Some(a), Some(v)) => {
            let fa = flatten(a);
            let fv = flatten(v);
            let mut joined = DVector::zeros(fa.len() + fv.len());
            joined.rows_mut(0, fa.len()).copy_from(&fa);
            joined.rows_mut(fa.len(), fv.len()).copy_from(&fv);
            ((0..spec.joint_dim()).collect(), joined)
        }
        (Some(a), None) => (spec.flat_range(Modality::Audio).collect(), flatten(a)),
        (None, Some(v)) => (spec.flat_range(Modality::Video).collect(), flatten(v)),
        (None, None) => return Err(Error::InvalidConfig("posterior needs at least one modality".into())),
    };
    if value.len() != idx.len() {
        return Err(Error::shape(&[idx.len()], &[value.len()]));
    }
    let cov = submatrix(&spec.joint_cov(), &idx, &idx);
    let chol = cholesky(cov)?;
    let means: Vec<DVector<f64>> = (0..spec.num_classes)
        .map(|k| subvector(&spec.joint_class_mean(k), &idx))
        .collect();
    let logits: Vec<f64> = means
        .iter()
        .map(|m| {
            let diff = &value - m;
            -0.5 * diff.dot(&chol.solve(&diff))
        })
        .collect();
    Ok(softmax(&logits))
}

/// Gaussian conditioning of the target block on an observed block for every
/// class. With no observation the target is the full joint vector.
#[derive(Debug, Clone)]
struct ConditionalModel {
    observed_idx: Vec<usize>,
    target_idx: Vec<usize>,
    /// `Sigma_TO Sigma_OO^{-1}`.
    gain: DMatrix<f64>,
    target_cov: DMatrix<f64>,
    observed_chol: Option<Cholesky<f64, Dyn>>,
    class_means: Vec<DVector<f64>>,
}

impl ConditionalModel {
    fn new(spec: &GeneratorSpec, observed: Option<Modality>) -> Result<Self> {
        let all: Vec<usize> = (0..spec.joint_dim()).collect();
        let (observed_idx, target_idx): (Vec<usize>, Vec<usize>) = match observed {
            None => (Vec::new(), all),
            Some(m) => {
                let r = spec.flat_range(m);
                all.into_iter().partition(|i| r.contains(i))
            }
        };
        let cov = spec.joint_cov();
        let class_means = (0..spec.num_classes).map(|k| spec.joint_class_mean(k)).collect();
        if observed_idx.is_empty() {
            return Ok(Self {
                gain: DMatrix::zeros(target_idx.len(), 0),
                target_cov: cov,
                observed_idx,
                target_idx,
                observed_chol: None,
                class_means,
            });
        }
        let s_oo = submatrix(&cov, &observed_idx, &observed_idx);
        let s_to = submatrix(&cov, &target_idx, &observed_idx);
        let s_tt = submatrix(&cov, &target_idx, &target_idx);
        let chol = cholesky(s_oo)?;
        let gain = chol.solve(&s_to.transpose()).transpose();
        let mut target_cov = s_tt - &gain * s_to.transpose();
        symmetrize(&mut target_cov);
        Ok(Self { observed_idx, target_idx, gain, target_cov, observed_chol: Some(chol), class_means })
    }

    fn target_mean(&self, class: usize, observed: &DVector<f64>) -> DVector<f64> {
        let m = &self.class_means[class];
        let mut mean = subvector(m, &self.target_idx);
        if !self.observed_idx.is_empty() {
            mean += &self.gain * (observed - subvector(m, &self.observed_idx));
        }
        mean
    }

    fn class_posterior(&self, observed: &DVector<f64>) -> Vec<f64> {
        let k = self.class_means.len();
        match &self.observed_chol {
            None => vec![1.0 / k as f64; k],
            Some(chol) => {
                let logits: Vec<f64> = self
                    .class_means
                    .iter()
                    .map(|m| {
                        let diff = observed - subvector(m, &self.observed_idx);
                        -0.5 * diff.dot(&chol.solve(&diff))
                    })
                    .collect();
                softmax(&logits)
            }
        }
    }
}

/// Exact noise prediction for the toy data, usable in place of the learned
/// denoiser. For each query, the clean modality of its task is read from
/// `z_t` and the noised part is scored under the Gaussian-mixture marginal
/// of `sqrt(abar) x0 + sqrt(1 - abar) eps`.
#[derive(Debug, Clone)]
pub struct GaussianScoreOracle {
    spec: GeneratorSpec,
    schedule: NoiseSchedule,
    models: [ConditionalModel; 3],
}

impl GaussianScoreOracle {
    pub fn new(spec: &GeneratorSpec, schedule: &NoiseSchedule) -> Result<Self> {
        let model = |task: TaskId| {
            let clean = TaskSpec::for_task(task).clean.first().copied();
            ConditionalModel::new(spec, clean)
        };
        Ok(Self {
            spec: spec.clone(),
            schedule: schedule.clone(),
            models: [model(TaskId::T2AV)?, model(TaskId::A2V)?, model(TaskId::V2A)?],
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn predict(&self, queries: &[DenoiseInput<'_>]) -> Result<Array2<f64>> {
        let layout = self.spec.layout;
        let len = layout.packed_len();
        let mut out = Array2::zeros((queries.len() * len, layout.token_dim()));
        // Queries sharing (task, t) reuse one factorization.
        let mut cache: Option<(usize, usize, Cholesky<f64, Dyn>)> = None;
        for (e, q) in queries.iter().enumerate() {
            self.schedule.check_step(q.t)?;
            let task = q.task.code() as usize;
            let model = &self.models[task];
            let ab = self.schedule.alpha_bar(q.t);
            let reuse = matches!(&cache, Some((tk, t, _)) if *tk == task && *t == q.t);
            if !reuse {
                let mut cov = &model.target_cov * ab;
                for i in 0..cov.nrows() {
                    cov[(i, i)] += 1.0 - ab;
                }
                cache = Some((task, q.t, cholesky(cov)?));
            }
            let chol = &cache.as_ref().expect("factorization cached").2;

            let latent = UnifiedLatent::from_data(q.z_t.to_owned(), layout)?;
            let (a, v) = unpack(&latent)?;
            let mut joint = DVector::zeros(self.spec.joint_dim());
            joint.rows_mut(0, self.spec.audio_dim()).copy_from(&flatten(a.view()));
            joint.rows_mut(self.spec.audio_dim(), self.spec.video_dim()).copy_from(&flatten(v.view()));
            let observed = subvector(&joint, &model.observed_idx);
            let z = subvector(&joint, &model.target_idx);

            let prior = match q.condition_row(self.spec.num_classes) {
                k if k < self.spec.num_classes => one_hot(k, self.spec.num_classes),
                _ => model.class_posterior(&observed),
            };
            let mut logits = Vec::with_capacity(prior.len());
            let mut solved = Vec::with_capacity(prior.len());
            for (k, p) in prior.iter().enumerate() {
                let diff = &z - model.target_mean(k, &observed) * ab.sqrt();
                let y = chol.solve(&diff);
                logits.push(if *p > 0.0 { p.ln() - 0.5 * diff.dot(&y) } else { f64::NEG_INFINITY });
                solved.push(y);
            }
            let resp = softmax(&logits);
            let mut eps = DVector::zeros(z.len());
            for (r, y) in resp.iter().zip(&solved) {
                eps += y * *r;
            }
            eps *= (1.0 - ab).sqrt();

            let mut full = DVector::zeros(self.spec.joint_dim());
            for (i, &j) in model.target_idx.iter().enumerate() {
                full[j] = eps[i];
            }
            let a_hat = unflatten(&full.rows(0, self.spec.audio_dim()).into_owned(), layout.audio_shape())?;
            let v_hat = unflatten(
                &full.rows(self.spec.audio_dim(), self.spec.video_dim()).into_owned(),
                layout.video_shape(),
            )?;
            let packed = pack(a_hat.view(), v_hat.view(), &layout)?;
            out.slice_mut(ndarray::s![e * len..(e + 1) * len, ..]).assign(packed.data());
        }
        Ok(out)
    }
}

pub(crate) fn mixture_moments(
    means: &[DVector<f64>],
    weights: &[f64],
    shared_cov: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = shared_cov.nrows();
    let mut mean = DVector::zeros(n);
    for (m, w) in means.iter().zip(weights) {
        mean += m * *w;
    }
    let mut cov = shared_cov.clone();
    for (m, w) in means.iter().zip(weights) {
        let d = m - &mean;
        cov += &d * d.transpose() * *w;
    }
    (mean, cov)
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn cholesky(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Numerical("conditioning covariance is singular".into()))
}

/// Serde helper writing matrices as row-major nested arrays.
mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ModalityLayout {
        ModalityLayout::new([1, 4, 2, 1], [1, 2, 2, 2]).unwrap()
    }

    #[test]
    fn single_class_sits_at_origin() {
        let g = make_generator(2, layout(), 1, 4.0, 0.5, 0.5, 1).unwrap();
        assert!(g.class_means.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn equilateral_means() {
        let g = make_generator(2, layout(), 3, 4.0, 0.5, 0.5, 1).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                let dist = (g.class_means.row(i) - g.class_means.row(j)).norm();
                assert!((dist - 4.0).abs() < 1e-12);
            }
        }
        assert!((g.min_separation - 4.0).abs() < 1e-12);
        let centroid = g.class_means.row_sum() / 3.0;
        assert!(centroid.norm() < 1e-12);
        assert!(make_generator(2, layout(), 4, 4.0, 0.5, 0.5, 1).is_err());
        assert!(make_generator(2, layout(), 3, 0.0, 0.5, 0.5, 1).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let a = make_generator(2, layout(), 3, 4.0, 0.5, 0.5, 42).unwrap();
        let b = make_generator(2, layout(), 3, 4.0, 0.5, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let c = make_generator(2, layout(), 3, 4.0, 0.5, 0.5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn standardized_marginals() {
        let g = make_generator(2, layout(), 3, 4.0, 0.5, 0.5, 7).unwrap();
        for m in [Modality::Audio, Modality::Video] {
            let (mean, cov) = g.modality_moments(m);
            assert!(mean.norm() < 1e-12);
            assert!((cov.trace() / cov.nrows() as f64 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_coupling() {
        let layout = ModalityLayout::new([1, 2, 1, 1], [1, 1, 2, 1]).unwrap();
        let eye = DMatrix::identity(2, 2);
        let means = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let g = GeneratorSpec::new(means, eye.clone(), eye, 0.0, 0.0, layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let (a, v) = sample_pair(&g, 0, &mut rng).unwrap();
            assert_eq!(flatten(a.view()), flatten(v.view()));
        }
        assert!(sample_pair(&g, 1, &mut rng).is_err());
    }

    #[test]
    fn deterministic_limit_of_conditional() {
        let layout = ModalityLayout::new([1, 2, 1, 1], [1, 1, 2, 1]).unwrap();
        let w_a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -1.0, 1.0]);
        let w_v = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]);
        let means = DMatrix::from_row_slice(1, 2, &[0.3, 0.1]);
        let g = GeneratorSpec::new(means, w_a.clone(), w_v.clone(), 1e-7, 1e-7, layout).unwrap();
        let audio = Array4::from_shape_vec((1, 2, 1, 1), vec![0.7, -0.4]).unwrap();
        let (mean, cov) = conditional_oracle(&g, Given::Audio(audio.view()), Some(0)).unwrap();
        let expect = &w_v * w_a.try_inverse().unwrap() * DVector::from_vec(vec![0.7, -0.4]);
        assert!((mean - expect).norm() < 1e-8);
        assert!(cov.norm() < 1e-8);
    }

    #[test]
    fn conditional_covariance_is_homoscedastic() {
        let g = make_generator(2, layout(), 3, 4.0, 0.5, 0.5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a1, _) = sample_pair(&g, 0, &mut rng).unwrap();
        let (a2, _) = sample_pair(&g, 2, &mut rng).unwrap();
        let (_, c1) = conditional_oracle(&g, Given::Audio(a1.view()), Some(1)).unwrap();
        let (_, c2) = conditional_oracle(&g, Given::Audio(a2.view()), Some(1)).unwrap();
        assert!((c1 - c2).norm() < 1e-12);
    }

    #[test]
    fn posterior_edge_cases() {
        let g = make_generator(2, layout(), 1, 4.0, 0.5, 0.5, 1).unwrap();
        let a = Array4::zeros((1, 4, 2, 1));
        assert_eq!(bayes_posterior(&g, Some(a.view()), None).unwrap(), vec![1.0]);
        assert!(bayes_posterior(&g, None, None).is_err());

        let layout = ModalityLayout::new([1, 1, 1, 1], [1, 1, 1, 1]).unwrap();
        let one = DMatrix::from_element(1, 1, 1.0);
        let means = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let g = GeneratorSpec::new(means, one.clone(), one, 0.5, 0.5, layout).unwrap();
        let zero = Array4::zeros((1, 1, 1, 1));
        let p = bayes_posterior(&g, Some(zero.view()), Some(zero.view())).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let g = make_generator(2, layout(), 3, 4.0, 0.5, 0.5, 5).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: GeneratorSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
    }
}
