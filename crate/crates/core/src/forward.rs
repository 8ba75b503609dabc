//! Closed-form forward diffusion and its Gaussian posterior.
//!
//! The forward process never needs to be iterated: corrupting a clean image
//! to any noise level is a single affine mix with a standard-normal draw,
//! and the distribution of the slightly-less-noisy image given the clean one
//! is Gaussian with closed-form mean and variance. The latent-alignment
//! helpers blend a low-/high-resolution pair of such posteriors.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

/// A latent image tagged with its position on the diffusion trajectory.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub data: ImageTensor,
    pub t: usize,
    pub sqrt_alpha_bar: f64,
}

impl LatentState {
    /// Tag a latent with step t of `schedule`; t = 0 is the clean image.
    pub fn new(data: ImageTensor, t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        let sqrt_alpha_bar = schedule.sqrt_alpha_bar(t)?;
        Ok(Self {
            data,
            t,
            sqrt_alpha_bar,
        })
    }
}

/// Mean and (scalar, isotropic) variance of a Gaussian over images.
#[derive(Debug, Clone)]
pub struct GaussianMoments {
    pub mean: ImageTensor,
    pub variance: f64,
}

/// Corrupt a clean image to the given noise scale:
/// `scale * clean + sqrt(1 - scale^2) * noise`.
///
/// `scale` is sqrt(alpha_bar) in [0, 1]; `noise` must be a standard-normal
/// draw of the same shape for the result to follow the forward marginal.
pub fn diffuse(x0: &ImageTensor, sqrt_alpha_bar: f64, noise: &ImageTensor) -> Result<ImageTensor> {
    x0.ensure_same_shape(noise)?;
    if !(0.0..=1.0).contains(&sqrt_alpha_bar) {
        return Err(Error::Domain(format!(
            "noise scale must lie in [0,1], got {sqrt_alpha_bar}"
        )));
    }
    let sigma = (1.0 - sqrt_alpha_bar * sqrt_alpha_bar).sqrt();
    Ok(ImageTensor::new(
        &x0.data * sqrt_alpha_bar + &noise.data * sigma,
    ))
}

/// Invert [`diffuse`]: recover the clean image from a noisy one given the
/// exact noise. Rejects scales below 1e-8, where the division is meaningless.
pub fn invert_diffuse(
    x_t: &ImageTensor,
    sqrt_alpha_bar: f64,
    noise: &ImageTensor,
) -> Result<ImageTensor> {
    x_t.ensure_same_shape(noise)?;
    if sqrt_alpha_bar < 1e-8 {
        return Err(Error::Domain(format!(
            "noise scale {sqrt_alpha_bar} too small to invert"
        )));
    }
    if sqrt_alpha_bar > 1.0 {
        return Err(Error::Domain(format!(
            "noise scale must lie in [0,1], got {sqrt_alpha_bar}"
        )));
    }
    let sigma = (1.0 - sqrt_alpha_bar * sqrt_alpha_bar).sqrt();
    Ok(ImageTensor::new(
        (&x_t.data - &noise.data * sigma) / sqrt_alpha_bar,
    ))
}

/// Moments of the forward posterior q(x_{t-1} | x_t, x_0): the Gaussian that
/// the reverse process matches at each step.
///
/// Mean: `(sqrt(abar_{t-1}) beta_t / (1 - abar_t)) x_0
///        + (sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t)) x_t`,
/// variance: `beta_tilde_t`. At t = 1 the mean reduces to x_0 exactly and the
/// variance to 0.
pub fn forward_posterior(
    x_t: &ImageTensor,
    x0: &ImageTensor,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<GaussianMoments> {
    x0.ensure_same_shape(x_t)?;
    let beta = schedule.beta(t)?;
    let alpha = schedule.alpha(t)?;
    let abar = schedule.alpha_bar(t)?;
    let abar_prev = schedule.alpha_bar(t - 1)?;

    let clean_coef = abar_prev.sqrt() * beta / (1.0 - abar);
    let noisy_coef = alpha.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
    let mean = ImageTensor::new(&x0.data * clean_coef + &x_t.data * noisy_coef);
    Ok(GaussianMoments {
        mean,
        variance: schedule.posterior_var(t)?,
    })
}

/// Blend weight for the latent-alignment target at step t of a cutoff-K run:
/// 0 at t = K (all low-res) rising linearly to (K-1)/K at t = 1 (mostly
/// high-res).
pub fn lambda_weight(t: usize, cutoff: usize) -> Result<f64> {
    if cutoff == 0 {
        return Err(Error::Domain("cutoff must be at least 1".into()));
    }
    if t < 1 || t > cutoff {
        return Err(Error::Range(format!("step {t} outside 1..={cutoff}")));
    }
    Ok((cutoff - t) as f64 / cutoff as f64)
}

/// Convex blend of the two clean endpoints:
/// `lambda * x0_hr + (1 - lambda) * x0_lr`. `x0_lr` is the LR image already
/// upsampled to the HR grid.
pub fn interpolate_clean(
    x0_lr: &ImageTensor,
    x0_hr: &ImageTensor,
    lambda: f64,
) -> Result<ImageTensor> {
    x0_lr.ensure_same_shape(x0_hr)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!(
            "blend weight must lie in [0,1], got {lambda}"
        )));
    }
    Ok(ImageTensor::new(
        &x0_hr.data * lambda + &x0_lr.data * (1.0 - lambda),
    ))
}

/// Latent-alignment posterior at step t of a cutoff-K run: the blend
/// `lambda * posterior(HR branch) + (1 - lambda) * posterior(LR branch)`
/// with lambda = [`lambda_weight`]`(t, K)`, variance beta_tilde_t.
pub fn interpolated_posterior(
    x_t_hr: &ImageTensor,
    x0_hr: &ImageTensor,
    x_t_lr: &ImageTensor,
    x0_lr: &ImageTensor,
    schedule: &NoiseSchedule,
    t: usize,
    cutoff: usize,
) -> Result<GaussianMoments> {
    let lambda = lambda_weight(t, cutoff)?;
    interpolated_posterior_with_lambda(x_t_hr, x0_hr, x_t_lr, x0_lr, schedule, t, lambda)
}

/// [`interpolated_posterior`] with an explicit blend weight, for callers that
/// derive lambda themselves.
pub fn interpolated_posterior_with_lambda(
    x_t_hr: &ImageTensor,
    x0_hr: &ImageTensor,
    x_t_lr: &ImageTensor,
    x0_lr: &ImageTensor,
    schedule: &NoiseSchedule,
    t: usize,
    lambda: f64,
) -> Result<GaussianMoments> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!(
            "blend weight must lie in [0,1], got {lambda}"
        )));
    }
    let hr_post = forward_posterior(x_t_hr, x0_hr, schedule, t)?;
    let lr_post = forward_posterior(x_t_lr, x0_lr, schedule, t)?;
    hr_post.mean.ensure_same_shape(&lr_post.mean)?;
    let mean = ImageTensor::new(&hr_post.mean.data * lambda + &lr_post.mean.data * (1.0 - lambda));
    Ok(GaussianMoments {
        mean,
        variance: schedule.posterior_var(t)?,
    })
}
