//! Latent-aligned training of the noise predictor.
//!
//! Each example picks a step t in the trained range, blends the clean target
//! between the upsampled LR image and the HR image according to how close t
//! is to the alignment cutoff, diffuses the blend, and asks the network for
//! the injected noise. All randomness is drawn from streams labelled by
//! (seed, purpose, step, slot), so a resumed run replays the exact batches
//! an uninterrupted run would have seen.

use ndarray::Zip;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, ImagePair};
use crate::error::{Error, Result};
use crate::forward::{diffuse, interpolate_clean, lambda_weight};
use crate::nn::{Denoiser, DenoiserConfig, LossNorm, ParamStore, TrainingExample};
use crate::rng::{derive_rng, stream};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::ImageTensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Noise schedule trained against.
    pub schedule: ScheduleSpec,
    /// Fraction of the schedule used as the alignment cutoff: examples draw
    /// t from 1..=round(k_fraction * T). 1.0 trains the full step range.
    pub k_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub loss: LossNorm,
    pub seed: u64,
    /// LR-branch Gaussian blur sigma is drawn uniformly from this range.
    pub blur_sigma_range: (f64, f64),
    pub upsample_factor: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "k_fraction must lie in (0,1], got {}",
                self.k_fraction
            )));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
            return Err(Error::Config(format!(
                "blur_sigma_range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if self.upsample_factor < 1 {
            return Err(Error::Config("upsample_factor must be at least 1".into()));
        }
        self.schedule.build().map(|_| ())
    }

    /// Largest step index the alignment draws visit:
    /// round(k_fraction * T), clamped into 1..=T.
    pub fn alignment_cutoff(&self, total_steps: usize) -> usize {
        ((self.k_fraction * total_steps as f64).round() as usize).clamp(1, total_steps)
    }
}

/// Mutable state of an optimization run: the network plus first/second
/// gradient moments and the step counter. Moments mirror the parameter
/// shapes exactly.
#[derive(Debug)]
pub struct TrainState {
    pub net: Denoiser,
    pub moment1: ParamStore,
    pub moment2: ParamStore,
    pub step: u64,
}

impl TrainState {
    /// Fresh state: seeded parameter draw, zero moments, step 0.
    pub fn new(arch: DenoiserConfig, seed: u64) -> Result<Self> {
        let net = Denoiser::init(arch.clone(), &mut derive_rng(seed, &[stream::PARAM_INIT]))?;
        Ok(Self {
            moment1: crate::nn::zeros_like_plan(&arch)?,
            moment2: crate::nn::zeros_like_plan(&arch)?,
            net,
            step: 0,
        })
    }

    /// Reassemble state from deserialized parts, re-checking every shape.
    pub fn from_parts(
        arch: DenoiserConfig,
        params: ParamStore,
        moment1: ParamStore,
        moment2: ParamStore,
        step: u64,
    ) -> Result<Self> {
        let net = Denoiser::new(arch, params)?;
        for (label, moments) in [("first", &moment1), ("second", &moment2)] {
            for (name, param) in net.params() {
                let m = moments.get(name).ok_or_else(|| {
                    Error::Checkpoint(format!("missing {label}-moment tensor for `{name}`"))
                })?;
                if m.shape() != param.shape() {
                    return Err(Error::Shape(format!(
                        "{label}-moment shape {:?} for `{name}` does not match parameter {:?}",
                        m.shape(),
                        param.shape()
                    )));
                }
            }
            if moments.len() != net.params().len() {
                return Err(Error::Checkpoint(format!(
                    "{label}-moment store has {} tensors, parameters have {}",
                    moments.len(),
                    net.params().len()
                )));
            }
        }
        Ok(Self {
            net,
            moment1,
            moment2,
            step,
        })
    }
}

/// Build one latent-alignment example from an image pair.
///
/// Draws t uniformly from 1..=cutoff, a continuous noise scale inside step
/// t's band, and a standard-normal noise field; the clean image that gets
/// diffused is the blend `lambda * hr + (1 - lambda) * lr_up` with
/// `lambda = (cutoff - t) / cutoff`. At t = cutoff the example is a pure
/// diffusion of the upsampled LR image; toward t = 1 it approaches the HR
/// target.
pub fn make_training_example(
    pair: &ImagePair,
    schedule: &NoiseSchedule,
    cutoff: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    if cutoff < 1 || cutoff > schedule.len() {
        return Err(Error::Range(format!(
            "alignment cutoff {cutoff} outside 1..={}",
            schedule.len()
        )));
    }
    pair.lr_up.ensure_same_shape(&pair.hr)?;

    let t = rng.gen_range(1..=cutoff);
    let noise_scale = schedule.noise_scale_in_step(t, rng)?;
    let lambda = lambda_weight(t, cutoff)?;
    let blended = interpolate_clean(&pair.lr_up, &pair.hr, lambda)?;
    let eps = ImageTensor::standard_normal(pair.hr.shape(), rng);
    let x_t = diffuse(&blended, noise_scale, &eps)?;
    Ok(TrainingExample {
        x_t,
        lr_cond: pair.lr_up.clone(),
        noise_scale,
        eps_target: eps,
    })
}

/// One optimization step: assemble a batch of examples (augmentation and
/// example draws use streams keyed by the step number and batch slot),
/// evaluate loss and gradients, apply an adaptive-moment update, and round
/// parameters and moments through f32 so serialized state reloads exactly.
/// Returns the pre-update loss.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&ImagePair],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("training batch is empty".into()));
    }
    let step_index = state.step + 1;
    let cutoff = config.alignment_cutoff(schedule.len());

    let mut examples = Vec::with_capacity(batch.len());
    for (slot, pair) in batch.iter().enumerate() {
        let mut arng = derive_rng(config.seed, &[stream::AUGMENT, step_index, slot as u64]);
        let augmented = augment(pair, config.blur_sigma_range, &mut arng)?;
        let mut erng = derive_rng(config.seed, &[stream::EXAMPLE, step_index, slot as u64]);
        examples.push(make_training_example(&augmented, schedule, cutoff, &mut erng)?);
    }

    let (loss, grads) = state
        .net
        .loss_and_grad(&examples, config.loss)
        .map_err(|e| match e {
            Error::NonFinite(msg) => {
                Error::NonFinite(format!("training step {step_index}: {msg}"))
            }
            other => other,
        })?;

    let bias1 = 1.0 - ADAM_BETA1.powi(step_index as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(step_index as i32);
    let lr = config.learning_rate;
    for (name, grad) in &grads {
        let param = state.net.params_mut().get_mut(name).expect("planned name");
        let m = state.moment1.get_mut(name).expect("planned name");
        let v = state.moment2.get_mut(name).expect("planned name");
        Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                // Carry only f32-representable values so checkpointing is
                // lossless.
                *p = *p as f32 as f64;
                *m = *m as f32 as f64;
                *v = *v as f32 as f64;
            });
        let finite = state.net.params()[name].iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!(
                "training step {step_index}: parameter `{name}` became non-finite"
            )));
        }
    }

    state.step = step_index;
    Ok(loss)
}

/// Run (or continue) training until `config.total_steps`, invoking
/// `on_step(state, loss)` after every step. Batches are drawn with
/// replacement from `dataset` using a per-step stream, so a run resumed
/// from any step matches the uninterrupted run bit for bit.
pub fn resume(
    mut state: TrainState,
    config: &TrainConfig,
    dataset: &[ImagePair],
    mut on_step: impl FnMut(&TrainState, f64),
) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let schedule = config.schedule.build()?;
    while state.step < config.total_steps as u64 {
        let step_index = state.step + 1;
        let mut brng = derive_rng(config.seed, &[stream::BATCH, step_index]);
        let batch: Vec<&ImagePair> = (0..config.batch_size)
            .map(|_| &dataset[brng.gen_range(0..dataset.len())])
            .collect();
        let loss = train_step(&mut state, &batch, config, &schedule)?;
        on_step(&state, loss);
    }
    Ok(state)
}

/// Train a fresh network. See [`resume`] for the loop contract.
pub fn train(
    config: &TrainConfig,
    arch: &DenoiserConfig,
    dataset: &[ImagePair],
    on_step: impl FnMut(&TrainState, f64),
) -> Result<TrainState> {
    let state = TrainState::new(arch.clone(), config.seed)?;
    resume(state, config, dataset, on_step)
}
