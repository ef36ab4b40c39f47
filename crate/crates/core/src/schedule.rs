//! Closed-form forward noising, reverse-step statistics and the weighted
//! noise-prediction loss. Everything here is model independent.
//!
//! Step indices are 1-based: `t` ranges over `1..=T`, and `alpha_bar(0)` is
//! the convention value 1.

use ndarray::{Array, ArrayView, Dimension, Zip};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
    loss_weights: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule with both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) {
            return Err(Error::InvalidConfig(format!(
                "beta endpoints must lie in (0, 1), got {beta_start} and {beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::InvalidConfig(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps)
                .map(|i| if i + 1 == steps { beta_end } else { beta_start + span * i as f64 })
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidConfig(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        // The first reverse step is deterministic, so its variance is 0.
        let posterior_vars = (0..betas.len())
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * betas[i]
                }
            })
            .collect();
        let loss_weights = vec![1.0; betas.len()];
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
            loss_weights,
        })
    }

    /// Replace the per-step loss weights (all 1 by default).
    pub fn with_loss_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::shape(&[self.len()], &[weights.len()]));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and positive".into()));
        }
        self.loss_weights = weights;
        Ok(self)
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::StepOutOfRange { t, min: 1, max: self.len() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn loss_weight(&self, t: usize) -> f64 {
        self.loss_weights[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    pub fn loss_weights(&self) -> &[f64] {
        &self.loss_weights
    }

    /// Sample `z_t` given `z_0` in closed form.
    pub fn q_sample<D: Dimension>(
        &self,
        z0: ArrayView<'_, f64, D>,
        t: usize,
        eps: ArrayView<'_, f64, D>,
    ) -> Result<Array<f64, D>> {
        self.check_step(t)?;
        same_shape(z0.shape(), eps.shape())?;
        let ab = self.alpha_bar(t);
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Zip::from(&z0).and(&eps).map_collect(|&x, &e| signal * x + noise * e))
    }

    /// One forward Markov step from `z_{t-1}` to `z_t`.
    pub fn q_step<D: Dimension>(
        &self,
        z_prev: ArrayView<'_, f64, D>,
        t: usize,
        eps: ArrayView<'_, f64, D>,
    ) -> Result<Array<f64, D>> {
        self.check_step(t)?;
        same_shape(z_prev.shape(), eps.shape())?;
        let b = self.beta(t);
        let (keep, noise) = ((1.0 - b).sqrt(), b.sqrt());
        Ok(Zip::from(&z_prev).and(&eps).map_collect(|&x, &e| keep * x + noise * e))
    }

    /// Mean of the reverse transition given a noise prediction.
    pub fn posterior_mean<D: Dimension>(
        &self,
        z_t: ArrayView<'_, f64, D>,
        t: usize,
        eps_hat: ArrayView<'_, f64, D>,
    ) -> Result<Array<f64, D>> {
        self.check_step(t)?;
        same_shape(z_t.shape(), eps_hat.shape())?;
        let a = self.alpha(t);
        let coef = (1.0 - a) / (1.0 - self.alpha_bar(t)).sqrt();
        let scale = 1.0 / a.sqrt();
        Ok(Zip::from(&z_t).and(&eps_hat).map_collect(|&z, &e| scale * (z - coef * e)))
    }

    /// Ancestral reverse step. `noise` is ignored at `t == 1`.
    pub fn posterior_step<D: Dimension>(
        &self,
        z_t: ArrayView<'_, f64, D>,
        t: usize,
        eps_hat: ArrayView<'_, f64, D>,
        noise: ArrayView<'_, f64, D>,
    ) -> Result<Array<f64, D>> {
        let mut mean = self.posterior_mean(z_t, t, eps_hat)?;
        same_shape(mean.shape(), noise.shape())?;
        if t > 1 {
            let sd = self.posterior_var(t).sqrt();
            Zip::from(&mut mean).and(&noise).for_each(|m, &n| *m += sd * n);
        }
        Ok(mean)
    }

    /// Deterministic strided update from `t` to `t_prev` (`t_prev == 0` gives
    /// the clean estimate).
    pub fn strided_step<D: Dimension>(
        &self,
        z_t: ArrayView<'_, f64, D>,
        t: usize,
        t_prev: usize,
        eps_hat: ArrayView<'_, f64, D>,
    ) -> Result<Array<f64, D>> {
        self.check_step(t)?;
        if t_prev >= t {
            return Err(Error::InvalidConfig(format!(
                "strided step must move backwards, got {t} -> {t_prev}"
            )));
        }
        same_shape(z_t.shape(), eps_hat.shape())?;
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (s_prev, n_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Ok(Zip::from(&z_t).and(&eps_hat).map_collect(|&z, &e| {
            let x0 = (z - n * e) / s;
            s_prev * x0 + n_prev * e
        }))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// `gamma_t` times the mean squared error over mask-selected elements.
///
/// The mean divides by the number of selected elements, not the total.
pub fn weighted_noise_loss<D: Dimension>(
    eps: ArrayView<'_, f64, D>,
    eps_hat: ArrayView<'_, f64, D>,
    t: usize,
    schedule: &NoiseSchedule,
    mask: ArrayView<'_, f64, D>,
) -> Result<f64> {
    schedule.check_step(t)?;
    same_shape(eps.shape(), eps_hat.shape())?;
    same_shape(eps.shape(), mask.shape())?;
    let mut selected = 0usize;
    let mut sum = 0.0;
    Zip::from(&eps).and(&eps_hat).and(&mask).for_each(|&e, &h, &m| {
        if m != 0.0 {
            selected += 1;
            sum += (e - h) * (e - h);
        }
    });
    if selected == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(schedule.loss_weight(t) * sum / selected as f64)
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(a, b))
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{arr1, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        close(s.alpha_bar(1), 0.9, 1e-15);
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn four_step_tables_by_hand() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        for (b, e) in s.betas().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            close(*b, e, 1e-15);
        }
        for (ab, e) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            close(*ab, e, 1e-12);
        }
        close(s.posterior_var(2), (1.0 - 0.9) / (1.0 - 0.72) * 0.2, 1e-12);
        close(s.posterior_var(2), 0.071_428_571_428_571_43, 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(4, 0.3, 0.2).is_err());
    }

    #[test]
    fn default_tables_satisfy_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        close(s.beta(1), 1e-4, 1e-18);
        close(s.beta(1000), 0.02, 1e-18);
        for t in 1..=s.len() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!(s.posterior_var(t) <= s.beta(t));
            assert!(s.loss_weight(t) > 0.0);
        }
    }

    #[test]
    fn q_sample_hand_values() {
        let s = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let z0 = arr1(&[1.0, -2.0]);
        let zero = Array1::zeros(2);
        let out = s.q_sample(z0.view(), 1, zero.view()).unwrap();
        close(out[0], 0.9, 1e-15);
        close(out[1], -1.8, 1e-15);
        let ones = arr1(&[1.0, 1.0]);
        let out = s.q_sample(ones.view(), 1, ones.view()).unwrap();
        close(out[0], 0.9 + 0.19f64.sqrt(), 1e-12);
        close(out[0], 1.335_889_894_354_067, 1e-12);
    }

    #[test]
    fn q_sample_reaches_standard_normal() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let z0 = arr1(&[3.0]);
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e = arr1(&[StandardNormal.sample(&mut rng)]);
                s.q_sample(z0.view(), s.len(), e.view()).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (1.0 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se + 3.0 * s.alpha_bar(s.len()).sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn q_step_hand_values_and_errors() {
        let s = NoiseSchedule::from_betas(vec![0.19, 0.2]).unwrap();
        let z = arr1(&[2.0]);
        let zero = arr1(&[0.0]);
        close(s.q_step(z.view(), 1, zero.view()).unwrap()[0], 1.8, 1e-15);
        let e = arr1(&[0.7]);
        close(s.q_step(zero.view(), 2, e.view()).unwrap()[0], 0.2f64.sqrt() * 0.7, 1e-15);
        assert!(s.q_step(z.view(), 3, e.view()).is_err());
        assert!(s.q_step(z.view(), 0, e.view()).is_err());
        let wrong = arr1(&[0.0, 1.0]);
        assert!(matches!(
            s.q_step(z.view(), 1, wrong.view()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn posterior_mean_hand_values() {
        let s = NoiseSchedule::from_betas(vec![0.1]).unwrap();
        let z = arr1(&[1.0]);
        let zero = arr1(&[0.0]);
        close(s.posterior_mean(z.view(), 1, zero.view()).unwrap()[0], 1.0 / 0.9f64.sqrt(), 1e-15);

        // alpha_t = 0.9 and alpha_bar_t = 0.81 at t = 2 of a constant 0.1 schedule.
        let s = NoiseSchedule::from_betas(vec![0.1, 0.1]).unwrap();
        close(s.alpha_bar(2), 0.81, 1e-15);
        let half = arr1(&[0.5]);
        let got = s.posterior_mean(z.view(), 2, half.view()).unwrap()[0];
        let want = (1.0 / 0.9f64.sqrt()) * (1.0 - (0.1 / 0.19f64.sqrt()) * 0.5);
        close(got, want, 1e-12);
        close(got, 0.933_18, 1e-5);
    }

    #[test]
    fn posterior_mean_inverts_first_step() {
        let s = NoiseSchedule::from_betas(vec![0.05, 0.1]).unwrap();
        let z0 = arr1(&[0.3, -1.2, 2.0]);
        let eps = arr1(&[1.1, 0.4, -0.7]);
        let z1 = s.q_sample(z0.view(), 1, eps.view()).unwrap();
        let back = s.posterior_mean(z1.view(), 1, eps.view()).unwrap();
        for (a, b) in back.iter().zip(z0.iter()) {
            close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn posterior_step_variance() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let z = arr1(&[0.4]);
        let e = arr1(&[0.2]);
        let mean = s.posterior_mean(z.view(), 1, e.view()).unwrap()[0];
        let big = arr1(&[5.0]);
        assert_eq!(s.posterior_step(z.view(), 1, e.view(), big.view()).unwrap()[0], mean);
        let zero = arr1(&[0.0]);
        let mean3 = s.posterior_mean(z.view(), 3, e.view()).unwrap()[0];
        assert_eq!(s.posterior_step(z.view(), 3, e.view(), zero.view()).unwrap()[0], mean3);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let noise = arr1(&[StandardNormal.sample(&mut rng)]);
                s.posterior_step(z.view(), 3, e.view(), noise.view()).unwrap()[0]
            })
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = s.posterior_var(3);
        assert!((var - target).abs() < 4.0 * target * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn masked_loss_values() {
        let s = NoiseSchedule::from_betas(vec![0.1]).unwrap();
        let eps = arr1(&[1.0, 1.0]);
        let hat = arr1(&[0.0, 0.0]);
        let mask = arr1(&[1.0, 0.0]);
        close(weighted_noise_loss(eps.view(), hat.view(), 1, &s, mask.view()).unwrap(), 1.0, 0.0);
        assert_eq!(weighted_noise_loss(eps.view(), eps.view(), 1, &s, mask.view()).unwrap(), 0.0);
        let other = arr1(&[1.0, -40.0]);
        close(weighted_noise_loss(eps.view(), other.view(), 1, &s, mask.view()).unwrap(), 0.0, 0.0);
        let empty = arr1(&[0.0, 0.0]);
        assert!(matches!(
            weighted_noise_loss(eps.view(), hat.view(), 1, &s, empty.view()),
            Err(Error::EmptyMask)
        ));
        let s = s.with_loss_weights(vec![2.5]).unwrap();
        close(weighted_noise_loss(eps.view(), hat.view(), 1, &s, mask.view()).unwrap(), 2.5, 0.0);
    }
}
