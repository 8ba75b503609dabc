//! Reverse-process generation.
//!
//! Two entry points share the same denoising loop: `sample_full` starts
//! from pure noise at step T, while `sample_partial` starts at a cutoff
//! step K from a diffusion of the upsampled LR input — the LR latent
//! standing in for the unknown HR latent, which is what makes the K-step
//! run (instead of T) possible. Per-step cost is one network evaluation,
//! tracked by an instrumented counter.

use rand_chacha::ChaCha8Rng;

use crate::data::upsample_bicubic;
use crate::error::{Error, Result};
use crate::forward::{diffuse, LatentState};
use crate::nn::{mu_from_eps, Denoiser};
use crate::rng::{derive_rng, stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

/// Interval between recorded latents when trajectory recording is on.
pub const TRAJECTORY_STRIDE: usize = 10;

/// Anything that can predict the noise inside a latent. The production
/// implementation is [`Denoiser`]; tests substitute closed-form oracles.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        x_t: &ImageTensor,
        lr_cond: &ImageTensor,
        noise_scale: f64,
    ) -> Result<ImageTensor>;

    /// Evaluations since construction or the last reset.
    fn network_evals(&self) -> u64;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(
        &self,
        x_t: &ImageTensor,
        lr_cond: &ImageTensor,
        noise_scale: f64,
    ) -> Result<ImageTensor> {
        Denoiser::predict_noise(self, x_t, lr_cond, noise_scale)
    }

    fn network_evals(&self) -> u64 {
        Denoiser::network_evals(self)
    }
}

/// One sampling job: which LR image to enlarge, on which schedule, starting
/// where. `cutoff = None` runs the full T-step chain from pure noise;
/// `cutoff = Some(k)` starts at step k from the diffused LR proxy.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub lr_image: ImageTensor,
    pub schedule: NoiseSchedule,
    pub cutoff: Option<usize>,
    pub upsample_factor: usize,
    pub seed: u64,
    pub record_trajectory: bool,
}

/// Output of a sampling run: the clamped image, how many network
/// evaluations the run made, and (when requested) every
/// [`TRAJECTORY_STRIDE`]-th latent of the reverse chain.
#[derive(Debug)]
pub struct SampleResult {
    pub image: ImageTensor,
    pub network_evals: u64,
    pub trajectory: Vec<LatentState>,
}

/// One reverse transition x_t -> x_{t-1}: predict the noise at the step's
/// scale, form the implied mean, and perturb by the posterior-matched
/// standard deviation — except at t = 1, where the transition is
/// deterministic and returns the mean itself.
pub fn denoise_step<P: NoisePredictor + ?Sized>(
    net: &P,
    x_t: &ImageTensor,
    lr_cond: &ImageTensor,
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    let scale = schedule.sqrt_alpha_bar(t)?;
    let eps_hat = net.predict_noise(x_t, lr_cond, scale)?;
    if !eps_hat.is_finite() {
        return Err(Error::NonFinite(format!(
            "noise prediction at step {t} is non-finite"
        )));
    }
    let mean = mu_from_eps(x_t, &eps_hat, schedule, t)?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = schedule.posterior_var(t)?.sqrt();
    let z = ImageTensor::standard_normal(x_t.shape(), rng);
    Ok(ImageTensor::new(mean.data + z.data * sigma))
}

struct Trajectory {
    record: bool,
    states: Vec<LatentState>,
}

impl Trajectory {
    fn push(&mut self, data: &ImageTensor, t: usize, schedule: &NoiseSchedule) -> Result<()> {
        if self.record && (t.is_multiple_of(TRAJECTORY_STRIDE) || self.states.is_empty()) {
            self.states
                .push(LatentState::new(data.clone(), t, schedule)?);
        }
        Ok(())
    }
}

fn run_reverse_chain<P: NoisePredictor + ?Sized>(
    net: &P,
    mut x: ImageTensor,
    lr_cond: &ImageTensor,
    schedule: &NoiseSchedule,
    start: usize,
    rng: &mut ChaCha8Rng,
    record_trajectory: bool,
) -> Result<SampleResult> {
    let evals_before = net.network_evals();
    let mut traj = Trajectory {
        record: record_trajectory,
        states: Vec::new(),
    };
    traj.push(&x, start, schedule)?;
    for t in (1..=start).rev() {
        x = denoise_step(net, &x, lr_cond, schedule, t, rng)?;
        traj.push(&x, t - 1, schedule)?;
    }
    let mut image = x;
    image.clamp01();
    Ok(SampleResult {
        image,
        network_evals: net.network_evals() - evals_before,
        trajectory: traj.states,
    })
}

/// Full conditional generation: start from standard-normal noise on the HR
/// grid and denoise through every schedule step. Exactly T network
/// evaluations; output clamped to [0,1].
pub fn sample_full<P: NoisePredictor + ?Sized>(
    net: &P,
    lr_image: &ImageTensor,
    schedule: &NoiseSchedule,
    upsample_factor: usize,
    rng: &mut ChaCha8Rng,
    record_trajectory: bool,
) -> Result<SampleResult> {
    let lr_cond = upsample_bicubic(lr_image, upsample_factor)?;
    let x_start = ImageTensor::standard_normal(lr_cond.shape(), rng);
    run_reverse_chain(
        net,
        x_start,
        &lr_cond,
        schedule,
        schedule.len(),
        rng,
        record_trajectory,
    )
}

/// Partial generation: diffuse the upsampled LR image to the cutoff step —
/// at that noise level the LR latent is a stand-in for the HR latent — and
/// denoise only the remaining `cutoff` steps. Exactly `cutoff` network
/// evaluations; output clamped to [0,1].
pub fn sample_partial<P: NoisePredictor + ?Sized>(
    net: &P,
    lr_image: &ImageTensor,
    schedule: &NoiseSchedule,
    cutoff: usize,
    upsample_factor: usize,
    rng: &mut ChaCha8Rng,
    record_trajectory: bool,
) -> Result<SampleResult> {
    if cutoff < 1 || cutoff > schedule.len() {
        return Err(Error::Range(format!(
            "cutoff {cutoff} outside 1..={}",
            schedule.len()
        )));
    }
    let lr_cond = upsample_bicubic(lr_image, upsample_factor)?;
    let eps = ImageTensor::standard_normal(lr_cond.shape(), rng);
    let x_start = diffuse(&lr_cond, schedule.sqrt_alpha_bar(cutoff)?, &eps)?;
    run_reverse_chain(
        net,
        x_start,
        &lr_cond,
        schedule,
        cutoff,
        rng,
        record_trajectory,
    )
}

/// Dispatch a [`SampleRequest`], deriving the sampling rng from its seed.
pub fn sample<P: NoisePredictor + ?Sized>(
    net: &P,
    request: &SampleRequest,
) -> Result<SampleResult> {
    let mut rng = derive_rng(request.seed, &[stream::SAMPLE]);
    match request.cutoff {
        None => sample_full(
            net,
            &request.lr_image,
            &request.schedule,
            request.upsample_factor,
            &mut rng,
            request.record_trajectory,
        ),
        Some(k) => sample_partial(
            net,
            &request.lr_image,
            &request.schedule,
            k,
            request.upsample_factor,
            &mut rng,
            request.record_trajectory,
        ),
    }
}
