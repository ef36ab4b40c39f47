//! Shared fixtures for the benchmarks: the acceptance-sized model and data.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unidiff_core::tasks::{make_training_example, sample_task, TaskSpec, TrainingExample};
use unidiff_core::toy_data::{make_generator, sample_pair};
use unidiff_core::{DenoiserConfig, DenoiserParameters, GeneratorSpec, ModalityLayout, NoiseSchedule};

pub fn layout() -> ModalityLayout {
    ModalityLayout::new([1, 4, 2, 1], [1, 2, 2, 2]).expect("valid layout")
}

pub fn spec() -> GeneratorSpec {
    make_generator(2, layout(), 3, 4.0, 0.5, 0.5, 7).expect("valid generator")
}

/// Default-sized denoiser with a nonzero output map.
pub fn model() -> DenoiserParameters {
    let cfg = DenoiserConfig::new(layout(), 3, NoiseSchedule::default().len());
    let mut p = DenoiserParameters::init(&cfg, 0).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in p.values_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    p
}

pub fn batch(size: usize, seed: u64) -> Vec<TrainingExample> {
    let (spec, schedule, layout) = (spec(), NoiseSchedule::default(), layout());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|i| {
            let (a, v): (Array4<f64>, Array4<f64>) = sample_pair(&spec, i % 3, &mut rng).expect("valid class");
            let task = sample_task(&mut rng);
            make_training_example(&TaskSpec::for_task(task), a.view(), v.view(), i % 3, 3, &layout, &schedule, &mut rng)
                .expect("valid example")
        })
        .collect()
}
