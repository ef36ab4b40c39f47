//! Distribution-level scores on Gaussian fits and oracle features.

use log::warn;
use nalgebra::{DMatrix, DVector};
use ndarray::Array4;

use crate::error::{Error, Result};
use crate::latent::Modality;
use crate::toy_data::{flatten, GeneratorSpec};

const KL_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianFit {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape(&[mean.len(), mean.len()], &[cov.nrows(), cov.ncols()]));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-10 * cov.abs().max().max(1.0) {
            return Err(Error::Numerical(format!("covariance is not symmetric (max gap {asym:e})")));
        }
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `samples`.
pub fn gaussian_fit(samples: &DMatrix<f64>) -> Result<GaussianFit> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 samples, got {n}")));
    }
    let mean = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    let t = cov.transpose();
    cov += t;
    cov *= 0.5;
    GaussianFit::new(mean, cov, n)
}

/// Gaussian fit of one modality over generated or real pairs.
pub fn modality_fit(pairs: &[(Array4<f64>, Array4<f64>)], modality: Modality) -> Result<GaussianFit> {
    gaussian_fit(&modality_rows(pairs, modality))
}

/// Flattened latents of one modality, one row per pair.
pub fn modality_rows(pairs: &[(Array4<f64>, Array4<f64>)], modality: Modality) -> DMatrix<f64> {
    let pick = |p: &(Array4<f64>, Array4<f64>)| match modality {
        Modality::Audio => flatten(p.0.view()),
        Modality::Video => flatten(p.1.view()),
    };
    let dim = pairs.first().map(|p| pick(p).len()).unwrap_or(0);
    let mut rows = DMatrix::zeros(pairs.len(), dim);
    for (i, p) in pairs.iter().enumerate() {
        rows.row_mut(i).copy_from(&pick(p).transpose());
    }
    rows
}

/// Symmetric PSD square root; negative eigenvalues are clipped to zero.
///
/// Returns the root and the clipped (negative) eigenvalue mass.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let mut sym = m.clone();
    let t = sym.transpose();
    sym += t;
    sym *= 0.5;
    let eig = sym.symmetric_eigen();
    let mut clipped = 0.0;
    let roots = eig.eigenvalues.map(|e| {
        if e < 0.0 {
            clipped += -e;
            0.0
        } else {
            e.sqrt()
        }
    });
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clipped)
}

/// Squared Wasserstein-2 distance between two Gaussians.
pub fn frechet_distance(f1: &GaussianFit, f2: &GaussianFit) -> Result<f64> {
    if f1.dim() != f2.dim() {
        return Err(Error::shape(&[f1.dim()], &[f2.dim()]));
    }
    let mean_term = (&f1.mean - &f2.mean).norm_squared();
    let (root1, c1) = sqrtm_psd(&f1.cov);
    let inner = &root1 * &f2.cov * &root1;
    let (cross, c2) = sqrtm_psd(&inner);
    let trace_mass = f1.cov.trace() + f2.cov.trace();
    let clipped = c1 + c2;
    if clipped > 1e-6 * trace_mass.max(f64::MIN_POSITIVE) {
        warn!("frechet distance clipped {clipped:e} of negative eigenvalue mass");
    }
    let value = mean_term + trace_mass - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// KL(f1 || f2) in closed form. Also reports whether a ridge had to be
/// added to make a covariance invertible.
pub fn gaussian_kl_flagged(f1: &GaussianFit, f2: &GaussianFit) -> Result<(f64, bool)> {
    if f1.dim() != f2.dim() {
        return Err(Error::shape(&[f1.dim()], &[f2.dim()]));
    }
    let k = f1.dim();
    let factor = |ridge: f64| {
        let s1 = &f1.cov + DMatrix::identity(k, k) * ridge;
        let s2 = &f2.cov + DMatrix::identity(k, k) * ridge;
        let c1 = nalgebra::Cholesky::new(s1.clone())?;
        let c2 = nalgebra::Cholesky::new(s2)?;
        Some((c1, c2, s1))
    };
    let (regularized, (c1, c2, sigma1)) = match factor(0.0) {
        Some(f) => (false, f),
        None => (true, factor(KL_RIDGE).ok_or_else(|| Error::Numerical("covariance not PSD".into()))?),
    };
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().map(f64::ln).sum();
    let trace = c2.solve(&sigma1).trace();
    let diff = &f2.mean - &f1.mean;
    let maha = diff.dot(&c2.solve(&diff));
    let kl = 0.5 * (trace + maha - k as f64 + logdet(&c2) - logdet(&c1));
    if regularized {
        warn!("gaussian kl: covariance regularized by {KL_RIDGE:e} I");
    }
    Ok((kl.max(0.0), regularized))
}

pub fn gaussian_kl(f1: &GaussianFit, f2: &GaussianFit) -> Result<f64> {
    gaussian_kl_flagged(f1, f2).map(|(kl, _)| kl)
}

/// `exp(E_x KL(p(y|x) || p(y)))` with the marginal taken over the inputs.
pub fn inception_score_analog(posteriors: &[Vec<f64>]) -> Result<f64> {
    let first = posteriors.first().ok_or_else(|| Error::InvalidConfig("no posteriors".into()))?;
    let k = first.len();
    let mut marginal = vec![0.0; k];
    for p in posteriors {
        if p.len() != k {
            return Err(Error::shape(&[k], &[p.len()]));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-6 || p.iter().any(|x| *x < 0.0) {
            return Err(Error::InvalidConfig(format!("posterior does not sum to 1 (sum {total})")));
        }
        for (m, x) in marginal.iter_mut().zip(p) {
            *m += x / posteriors.len() as f64;
        }
    }
    let mean_kl = posteriors
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(x, _)| **x > 0.0)
                .map(|(x, m)| x * (x.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / posteriors.len() as f64;
    Ok(mean_kl.exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub score: f64,
    pub used: usize,
    /// Pairs where either centered factor vanished.
    pub skipped: usize,
}

/// Mean cosine similarity between the centered shared factors recovered
/// from each modality by least squares.
pub fn alignment_score(
    pairs: &[(DVector<f64>, DVector<f64>)],
    spec: &GeneratorSpec,
) -> Result<Alignment> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("alignment needs at least one pair".into()));
    }
    let pinv_a = pseudo_inverse(&spec.w_a)?;
    let pinv_v = pseudo_inverse(&spec.w_v)?;
    let mut sa = Vec::with_capacity(pairs.len());
    let mut sv = Vec::with_capacity(pairs.len());
    for (a, v) in pairs {
        if a.len() != spec.audio_dim() || v.len() != spec.video_dim() {
            return Err(Error::shape(&[spec.audio_dim(), spec.video_dim()], &[a.len(), v.len()]));
        }
        sa.push(&pinv_a * a);
        sv.push(&pinv_v * v);
    }
    Ok(alignment_from_factors(&sa, &sv))
}

pub fn alignment_from_factors(sa: &[DVector<f64>], sv: &[DVector<f64>]) -> Alignment {
    let center = |xs: &[DVector<f64>]| {
        let mut m = DVector::zeros(xs[0].len());
        for x in xs {
            m += x;
        }
        m / xs.len() as f64
    };
    let (ma, mv) = (center(sa), center(sv));
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (a, v) in sa.iter().zip(sv) {
        let (a, v) = (a - &ma, v - &mv);
        let denom = a.norm() * v.norm();
        if denom < 1e-12 {
            skipped += 1;
            continue;
        }
        total += a.dot(&v) / denom;
        used += 1;
    }
    if skipped > 0 {
        warn!("alignment: skipped {skipped} degenerate pairs");
    }
    let score = if used == 0 { 0.0 } else { total / used as f64 };
    Alignment { score, used, skipped }
}

fn pseudo_inverse(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = w.transpose() * w;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Numerical("mixing matrix lacks full column rank".into()))?;
    Ok(inv * w.transpose())
}
