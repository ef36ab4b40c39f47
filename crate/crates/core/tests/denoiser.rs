use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unidiff_core::{DenoiseInput, DenoiserConfig, DenoiserParameters, Error, ModalityLayout, TaskId};

fn acceptance_config() -> DenoiserConfig {
    let layout = ModalityLayout::new([1, 4, 2, 1], [1, 2, 2, 2]).unwrap();
    DenoiserConfig::new(layout, 3, 1000)
}

fn randomized(cfg: &DenoiserConfig, seed: u64) -> DenoiserParameters {
    let mut p = DenoiserParameters::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for v in p.values_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    p
}

fn latent(cfg: &DenoiserConfig, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = &cfg.layout;
    Array2::from_shape_fn((l.packed_len(), l.token_dim()), |_| rng.random_range(-2.0..2.0))
}

fn predict(p: &DenoiserParameters, z: &Array2<f64>, task: TaskId, class: Option<usize>, drop_text: bool) -> Array2<f64> {
    p.forward_batch(&[DenoiseInput { z_t: z.view(), t: 321, task, class, drop_text }]).unwrap()
}

#[test]
fn parameter_count_is_pinned() {
    let p = DenoiserParameters::init(&acceptance_config(), 0).unwrap();
    assert_eq!(p.len(), 45_537);
    assert_eq!(p.index().total(), p.len());
    let covered: usize = p.index().entries().iter().map(|(_, s)| s.len()).sum();
    assert_eq!(covered, p.len());
}

#[test]
fn init_is_seeded() {
    let cfg = acceptance_config();
    let a = DenoiserParameters::init(&cfg, 4).unwrap();
    let b = DenoiserParameters::init(&cfg, 4).unwrap();
    let c = DenoiserParameters::init(&cfg, 5).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), c.digest());
    assert!(a.values().iter().all(|v| v.is_finite()));
}

#[test]
fn zero_output_map_predicts_zero() {
    let cfg = acceptance_config();
    let p = DenoiserParameters::init(&cfg, 1).unwrap();
    let z = latent(&cfg, 2);
    for task in TaskId::ALL {
        for class in [None, Some(0), Some(2)] {
            let out = predict(&p, &z, task, class, false);
            assert_eq!(out.dim(), z.dim());
            assert!(out.iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn forward_is_deterministic_and_batch_consistent() {
    let cfg = acceptance_config();
    let p = randomized(&cfg, 3);
    let (z1, z2) = (latent(&cfg, 4), latent(&cfg, 5));
    let digest = p.digest();
    let single = predict(&p, &z2, TaskId::V2A, Some(1), false);
    assert_eq!(single, predict(&p, &z2, TaskId::V2A, Some(1), false));
    let both = p
        .forward_batch(&[
            DenoiseInput { z_t: z1.view(), t: 321, task: TaskId::T2AV, class: None, drop_text: false },
            DenoiseInput { z_t: z2.view(), t: 321, task: TaskId::V2A, class: Some(1), drop_text: false },
        ])
        .unwrap();
    let n = cfg.layout.packed_len();
    let gap = (&both.slice(ndarray::s![n.., ..]) - &single).mapv(f64::abs).fold(0.0, |m: f64, &x| m.max(x));
    assert!(gap < 1e-12, "batched and single outputs differ by {gap}");
    // Every task reads the same store.
    for task in TaskId::ALL {
        predict(&p, &z1, task, None, false);
    }
    assert_eq!(p.digest(), digest);
}

#[test]
fn task_and_step_change_the_output() {
    let cfg = acceptance_config();
    let p = randomized(&cfg, 6);
    let z = latent(&cfg, 7);
    let a = predict(&p, &z, TaskId::A2V, None, false);
    assert_ne!(a, predict(&p, &z, TaskId::V2A, None, false));
    let later = p.forward_batch(&[DenoiseInput { z_t: z.view(), t: 900, task: TaskId::A2V, class: None, drop_text: false }]).unwrap();
    assert_ne!(a, later);
}

#[test]
fn dropped_text_routes_to_null_row() {
    let cfg = acceptance_config();
    let p = randomized(&cfg, 8);
    let z = latent(&cfg, 9);
    let null = predict(&p, &z, TaskId::T2AV, None, false);
    for class in [None, Some(0), Some(2)] {
        assert_eq!(predict(&p, &z, TaskId::T2AV, class, true), null);
    }
    assert_ne!(predict(&p, &z, TaskId::T2AV, Some(2), false), null);
}

/// Swap the contents and positional embeddings of video tokens `i` and `j`.
fn swap_video(p: &DenoiserParameters, z: &Array2<f64>, i: usize, j: usize) -> (DenoiserParameters, Array2<f64>) {
    let cfg = p.config();
    let (ri, rj) = (cfg.layout.audio_token_count() + i, cfg.layout.audio_token_count() + j);
    let mut z2 = z.clone();
    for c in 0..z.ncols() {
        z2.swap([ri, c], [rj, c]);
    }
    let slot = p.index().find("positions").unwrap();
    let mut values = p.values().to_vec();
    for c in 0..slot.cols {
        values.swap(slot.offset + ri * slot.cols + c, slot.offset + rj * slot.cols + c);
    }
    (DenoiserParameters::from_values(cfg, values).unwrap(), z2)
}

#[test]
fn token_permutation_equivariance_needs_attention_free_blocks() {
    let mut cfg = acceptance_config();
    cfg.num_blocks = 1;
    cfg.self_attention = false;
    let audio = cfg.layout.token_range(unidiff_core::Modality::Audio);
    let z = latent(&cfg, 10);
    // Video tokens 1 and 6 sit in different frames.
    let p = randomized(&cfg, 11);
    let (q, z2) = swap_video(&p, &z, 1, 6);
    let before = predict(&p, &z, TaskId::V2A, Some(0), false);
    let after = predict(&q, &z2, TaskId::V2A, Some(0), false);
    assert_eq!(before.slice(ndarray::s![audio.clone(), ..]), after.slice(ndarray::s![audio.clone(), ..]));

    cfg.self_attention = true;
    let p = randomized(&cfg, 11);
    let (q, z2) = swap_video(&p, &z, 1, 6);
    let before = predict(&p, &z, TaskId::V2A, Some(0), false);
    let after = predict(&q, &z2, TaskId::V2A, Some(0), false);
    let gap = (&before.slice(ndarray::s![audio.clone(), ..]) - &after.slice(ndarray::s![audio, ..]))
        .mapv(f64::abs)
        .sum();
    assert!(gap > 1e-6, "attention should see the frame change (gap {gap})");
}

#[test]
fn rejects_bad_inputs() {
    let cfg = acceptance_config();
    let p = DenoiserParameters::init(&cfg, 0).unwrap();
    let z = latent(&cfg, 1);
    let q = |t, class| p.forward_batch(&[DenoiseInput { z_t: z.view(), t, task: TaskId::T2AV, class, drop_text: false }]);
    assert!(matches!(q(0, None), Err(Error::StepOutOfRange { .. })));
    assert!(matches!(q(1001, None), Err(Error::StepOutOfRange { .. })));
    assert!(matches!(q(1, Some(3)), Err(Error::InvalidClass { .. })));
    let short = Array2::zeros((5, 1));
    let bad = p.forward_batch(&[DenoiseInput { z_t: short.view(), t: 1, task: TaskId::T2AV, class: None, drop_text: false }]);
    assert!(matches!(bad, Err(Error::ShapeMismatch { .. })));
    let mut odd = cfg.clone();
    odd.num_heads = 5;
    assert!(DenoiserParameters::init(&odd, 0).is_err());
    let mut values = p.values().to_vec();
    values[3] = f64::NAN;
    assert!(matches!(DenoiserParameters::from_values(&cfg, values), Err(Error::NonFinite(_))));
}
