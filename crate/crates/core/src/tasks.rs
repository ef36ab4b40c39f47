//! Task-specific noise schemes and loss masks.
//!
//! T2AV noises both modalities, A2V holds audio clean and noises video, V2A
//! holds video clean and noises audio. A clean modality is fed to the
//! denoiser as its exact data latent at every step and never contributes to
//! the loss.

use ndarray::{Array2, ArrayView2, ArrayView4, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::DenoiseInput;
use crate::error::{Error, Result};
use crate::latent::{element_mask, pack, Modality, ModalityLayout, TaskId, UnifiedLatent};
use crate::schedule::{weighted_noise_loss, NoiseSchedule};

/// Probability of replacing the class condition with the null embedding.
pub const CONDITION_DROP_PROB: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub task: TaskId,
    pub noised: Vec<Modality>,
    pub clean: Vec<Modality>,
}

impl TaskSpec {
    pub fn for_task(task: TaskId) -> Self {
        use Modality::{Audio, Video};
        let (noised, clean) = match task {
            TaskId::T2AV => (vec![Audio, Video], vec![]),
            TaskId::A2V => (vec![Video], vec![Audio]),
            TaskId::V2A => (vec![Audio], vec![Video]),
        };
        Self { task, noised, clean }
    }

    /// Modalities whose noise prediction is scored; one masked mean each.
    pub fn loss_modalities(&self) -> &[Modality] {
        &self.noised
    }

    pub fn is_noised(&self, modality: Modality) -> bool {
        self.noised.contains(&modality)
    }

    /// Union of the scored modalities' element masks.
    pub fn loss_mask(&self, layout: &ModalityLayout) -> Array2<f64> {
        self.noise_mask(layout)
    }

    pub fn loss_masks(&self, layout: &ModalityLayout) -> Vec<Array2<f64>> {
        self.noised.iter().map(|m| element_mask(layout, *m)).collect()
    }

    /// Elements that receive diffusion noise.
    pub fn noise_mask(&self, layout: &ModalityLayout) -> Array2<f64> {
        let mut mask = Array2::zeros((layout.packed_len(), layout.token_dim()));
        for m in &self.noised {
            mask += &element_mask(layout, *m);
        }
        mask
    }
}

pub fn sample_task<R: Rng + ?Sized>(rng: &mut R) -> TaskId {
    TaskId::ALL[rng.random_range(0..TaskId::ALL.len())]
}

/// One noised training pair with its regression target.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub z_t: UnifiedLatent,
    pub t: usize,
    pub task: TaskId,
    pub class: Option<usize>,
    pub drop_text: bool,
    /// Injected noise; zero on clean and padding elements.
    pub target: UnifiedLatent,
    pub loss_mask: Array2<f64>,
    pub loss_masks: Vec<Array2<f64>>,
}

impl TrainingExample {
    /// The class actually presented to the denoiser.
    pub fn cond(&self) -> Option<usize> {
        if self.drop_text {
            None
        } else {
            self.class
        }
    }

    pub fn input(&self) -> DenoiseInput<'_> {
        DenoiseInput {
            z_t: self.z_t.data().view(),
            t: self.t,
            task: self.task,
            class: self.class,
            drop_text: self.drop_text,
        }
    }
}

/// Draws `t`, the noise and the condition-drop flag (in that order) and
/// applies the task's noise scheme.
#[allow(clippy::too_many_arguments)]
pub fn make_training_example<R: Rng + ?Sized>(
    spec: &TaskSpec,
    z_a0: ArrayView4<'_, f64>,
    z_v0: ArrayView4<'_, f64>,
    class_id: usize,
    num_classes: usize,
    layout: &ModalityLayout,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrainingExample> {
    if class_id >= num_classes {
        return Err(Error::InvalidClass { class: class_id, num_classes });
    }
    let z0 = pack(z_a0, z_v0, layout)?;
    let t = rng.random_range(1..=schedule.len());
    let noise_mask = spec.noise_mask(layout);
    let mut eps = Array2::zeros(noise_mask.raw_dim());
    for (e, m) in eps.iter_mut().zip(noise_mask.iter()) {
        let draw: f64 = StandardNormal.sample(rng);
        *e = draw * m;
    }
    let drop_text = rng.random_bool(CONDITION_DROP_PROB);
    let noised = schedule.q_sample(z0.data().view(), t, eps.view())?;
    let mut z_t = z0.data().clone();
    Zip::from(&mut z_t)
        .and(&noised)
        .and(&noise_mask)
        .for_each(|z, &n, &m| {
            if m != 0.0 {
                *z = n;
            }
        });
    Ok(TrainingExample {
        z_t: UnifiedLatent::from_data(z_t, *layout)?,
        t,
        task: spec.task,
        class: Some(class_id),
        drop_text,
        target: UnifiedLatent::from_data(eps, *layout)?,
        loss_mask: spec.loss_mask(layout),
        loss_masks: spec.loss_masks(layout),
    })
}

/// Sum over the task's scored modalities of the weighted masked noise loss.
pub fn loss_for_task(
    spec: &TaskSpec,
    eps_hat: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
    t: usize,
    layout: &ModalityLayout,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    spec.loss_modalities()
        .iter()
        .map(|m| weighted_noise_loss(eps, eps_hat, t, schedule, element_mask(layout, *m).view()))
        .sum()
}
