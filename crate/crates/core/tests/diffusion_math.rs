use ndarray::{Array1, Zip};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use unidiff_core::schedule::weighted_noise_loss;
use unidiff_core::NoiseSchedule;

fn noise(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| StandardNormal.sample(rng))
}

fn moments(x: &Array1<f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.sum() / n;
    (m, x.mapv(|v| (v - m).powi(2)).sum() / (n - 1.0))
}

/// Composing single forward steps matches the closed-form marginal.
#[test]
fn chain_matches_closed_form() {
    let s = NoiseSchedule::default();
    let n = 10_000;
    let z0 = 1.7;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut z = Array1::from_elem(n, z0);
    for t in 1..=s.len() {
        z = s.q_step(z.view(), t, noise(n, &mut rng).view()).unwrap();
        if [10, 100, 400, s.len()].contains(&t) {
            let ab = s.alpha_bar(t);
            let (mean, var) = moments(&z);
            let (want_mean, want_var) = (ab.sqrt() * z0, 1.0 - ab);
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - want_mean).abs() < 4.0 * se_mean, "t={t}: mean {mean} vs {want_mean}");
            assert!((var - want_var).abs() < 4.0 * se_var, "t={t}: var {var} vs {want_var}");
        }
    }
}

#[test]
fn closed_form_sample_moments() {
    let s = NoiseSchedule::default();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0 = Array1::from_elem(n, -0.8);
    for t in [1, 250, 1000] {
        let z = s.q_sample(z0.view(), t, noise(n, &mut rng).view()).unwrap();
        let ab = s.alpha_bar(t);
        let (mean, var) = moments(&z);
        assert!((mean + 0.8 * ab.sqrt()).abs() < 4.0 * ((1.0 - ab) / n as f64).sqrt());
        assert!((var - (1.0 - ab)).abs() < 4.0 * (1.0 - ab) * (2.0 / n as f64).sqrt());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_invariants(steps in 1usize..400, start in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let end = (start + span).min(0.999);
        let s = NoiseSchedule::linear(steps, start, end).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prop_assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            prop_assert!(s.posterior_var(t) <= s.beta(t));
            prop_assert!(s.loss_weight(t) > 0.0);
            if t > 1 {
                prop_assert!(s.beta(t) >= s.beta(t - 1));
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        prop_assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn strided_step_with_true_noise_recovers_the_marginal(
        z0 in -3.0f64..3.0, e in -3.0f64..3.0, t in 2usize..1000, frac in 0.0f64..1.0,
    ) {
        let s = NoiseSchedule::default();
        let t_prev = ((t as f64 - 1.0) * frac) as usize;
        let zt = s.q_sample(Array1::from_elem(1, z0).view(), t, Array1::from_elem(1, e).view()).unwrap();
        let got = s.strided_step(zt.view(), t, t_prev, Array1::from_elem(1, e).view()).unwrap()[0];
        let ab = s.alpha_bar(t_prev);
        let want = ab.sqrt() * z0 + (1.0 - ab).sqrt() * e;
        prop_assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()) / s.alpha_bar(t).sqrt());
    }

    #[test]
    fn loss_is_nonnegative_and_masked(
        eps in prop::collection::vec(-3.0f64..3.0, 6),
        hat in prop::collection::vec(-3.0f64..3.0, 6),
        junk in prop::collection::vec(-9.0f64..9.0, 6),
        mask_bits in prop::collection::vec(any::<bool>(), 6),
    ) {
        let s = NoiseSchedule::default();
        let mask = Array1::from_iter(mask_bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        prop_assume!(mask.sum() > 0.0);
        let (eps, hat) = (Array1::from(eps), Array1::from(hat));
        let loss = weighted_noise_loss(eps.view(), hat.view(), 7, &s, mask.view()).unwrap();
        prop_assert!(loss >= 0.0);
        // Masked-out entries do not matter.
        let mut hat2 = hat.clone();
        Zip::from(&mut hat2).and(&mask).and(&Array1::from(junk)).for_each(|h, &m, &j| if m == 0.0 { *h = j });
        let loss2 = weighted_noise_loss(eps.view(), hat2.view(), 7, &s, mask.view()).unwrap();
        prop_assert_eq!(loss, loss2);
        let exact = weighted_noise_loss(eps.view(), eps.view(), 7, &s, mask.view()).unwrap();
        prop_assert_eq!(exact, 0.0);
    }
}
