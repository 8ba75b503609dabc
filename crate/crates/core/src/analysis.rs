//! Quality metrics (PSNR, SSIM, downsample-consistency) and the latent
//! convergence study: diffuse an LR/HR pair with shared noise and watch the
//! two latent trajectories merge, which locates the step where sampling can
//! safely begin from the diffused LR image.

use ndarray::Array2;

use crate::data::downsample_bicubic;
use crate::error::{Error, Result};
use crate::forward::diffuse;
use crate::rng::{derive_rng, stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::ImageTensor;

/// PSNR returned when the MSE is numerically zero (below 1e-10); keeps
/// identical-image rows plottable instead of infinite.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for pixels in [0,1]:
/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean local structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5) and stabilizers C1 = 0.01², C2 = 0.03² on the [0,1] range.
/// Multi-channel images average the per-channel scores. Only fully valid
/// windows contribute (no padding).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (channels, h, w) = a.shape();
    const WIN: usize = 11;
    if h < WIN || w < WIN {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than the {WIN}x{WIN} SSIM window"
        )));
    }

    // Separable Gaussian window, normalized to sum 1.
    let sigma = 1.5f64;
    let half = (WIN / 2) as isize;
    let mut win: Vec<f64> = (-half..=half)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = win.iter().sum();
    for v in &mut win {
        *v /= sum;
    }

    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;

    // Windowed local mean via two separable passes over a single channel.
    let local_mean = |plane: &Array2<f64>| -> Array2<f64> {
        let (ph, pw) = plane.dim();
        let mut horiz = Array2::<f64>::zeros((ph, pw - WIN + 1));
        for y in 0..ph {
            for x in 0..pw - WIN + 1 {
                let mut acc = 0.0;
                for (k, &wt) in win.iter().enumerate() {
                    acc += wt * plane[(y, x + k)];
                }
                horiz[(y, x)] = acc;
            }
        }
        let mut out = Array2::<f64>::zeros((ph - WIN + 1, pw - WIN + 1));
        for y in 0..ph - WIN + 1 {
            for x in 0..pw - WIN + 1 {
                let mut acc = 0.0;
                for (k, &wt) in win.iter().enumerate() {
                    acc += wt * horiz[(y + k, x)];
                }
                out[(y, x)] = acc;
            }
        }
        out
    };

    let mut channel_scores = Vec::with_capacity(channels);
    for c in 0..channels {
        let pa = a.data.index_axis(ndarray::Axis(0), c).to_owned();
        let pb = b.data.index_axis(ndarray::Axis(0), c).to_owned();

        let mu_a = local_mean(&pa);
        let mu_b = local_mean(&pb);
        let mean_aa = local_mean(&pa.mapv(|v| v * v));
        let mean_bb = local_mean(&pb.mapv(|v| v * v));
        let mean_ab = local_mean(&(&pa * &pb));

        let mut total = 0.0;
        let mut count = 0usize;
        for ((y, x), &ma) in mu_a.indexed_iter() {
            let mb = mu_b[(y, x)];
            let var_a = mean_aa[(y, x)] - ma * ma;
            let var_b = mean_bb[(y, x)] - mb * mb;
            let cov = mean_ab[(y, x)] - ma * mb;
            let score = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
            total += score;
            count += 1;
        }
        channel_scores.push(total / count as f64);
    }
    Ok(channel_scores.iter().sum::<f64>() / channels as f64)
}

/// Data-consistency score: bicubically downsample the super-resolved output
/// back to the LR grid and measure MSE against the true LR input, scaled by
/// 1e4 for readability.
pub fn consistency(sr_output: &ImageTensor, lr_input: &ImageTensor, factor: usize) -> Result<f64> {
    let (c, h, w) = lr_input.shape();
    if sr_output.shape() != (c, h * factor, w * factor) {
        return Err(Error::Shape(format!(
            "sr output {:?} is not factor {factor} times lr {:?}",
            sr_output.shape(),
            lr_input.shape()
        )));
    }
    let down = downsample_bicubic(sr_output, factor)?;
    Ok(down.mse(lr_input)? * 1e4)
}

/// PSNR of the diffused LR and HR latents against the clean HR image, per
/// recorded diffusion step, averaged over pairs.
#[derive(Debug, Clone)]
pub struct ConvergenceCurve {
    /// Recorded step indices; starts at 0 (no diffusion).
    pub steps: Vec<usize>,
    /// Noise scale sqrt(alpha_bar) at each recorded step.
    pub scales: Vec<f64>,
    /// PSNR(diffused upsampled-LR, clean HR), dB.
    pub psnr_lr: Vec<f64>,
    /// PSNR(diffused HR, clean HR), dB.
    pub psnr_hr: Vec<f64>,
    /// Number of image pairs averaged into the curve.
    pub n_pairs: usize,
}

impl ConvergenceCurve {
    /// CSV with one row per recorded step. PSNR values of identical images
    /// are capped; the cap is documented in the header comment.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "# PSNR of diffused latents vs clean HR; identical images capped at 99 dB\n",
        );
        out.push_str("t,sqrt_alpha_bar,psnr_lr,psnr_hr\n");
        for i in 0..self.steps.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.steps[i], self.scales[i], self.psnr_lr[i], self.psnr_hr[i]
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.steps.len();
        if self.scales.len() != n || self.psnr_lr.len() != n || self.psnr_hr.len() != n {
            return Err(Error::Shape("curve column lengths differ".into()));
        }
        if n == 0 {
            return Err(Error::Domain("curve has no recorded steps".into()));
        }
        if self.n_pairs == 0 {
            return Err(Error::Domain("curve averaged over zero pairs".into()));
        }
        Ok(())
    }
}

/// Diffuse each (upsampled-LR, HR) pair with a *shared* noise draw at every
/// recorded step (t = 0, stride, 2·stride, …, T) and record the PSNR of both
/// latents against the clean HR, averaged over pairs.
///
/// Sharing the noise between the two branches (and across steps of one pair)
/// makes the curve difference reflect the images rather than the draws.
pub fn convergence_curve(
    pairs: &[(ImageTensor, ImageTensor)],
    schedule: &NoiseSchedule,
    stride: usize,
    seed: u64,
) -> Result<ConvergenceCurve> {
    if pairs.is_empty() {
        return Err(Error::Domain("need at least one image pair".into()));
    }
    if stride == 0 {
        return Err(Error::Domain("stride must be at least 1".into()));
    }

    let t_max = schedule.len();
    let mut steps: Vec<usize> = (0..=t_max).step_by(stride).collect();
    if *steps.last().unwrap() != t_max {
        steps.push(t_max);
    }

    let mut sum_lr = vec![0.0f64; steps.len()];
    let mut sum_hr = vec![0.0f64; steps.len()];

    for (idx, (lr_up, hr)) in pairs.iter().enumerate() {
        lr_up.ensure_same_shape(hr)?;
        let mut rng = derive_rng(seed, &[stream::ANALYSIS, idx as u64]);
        let noise = ImageTensor::standard_normal(hr.shape(), &mut rng);
        for (row, &t) in steps.iter().enumerate() {
            let scale = schedule.sqrt_alpha_bar(t)?;
            let lr_latent = diffuse(lr_up, scale, &noise)?;
            let hr_latent = diffuse(hr, scale, &noise)?;
            sum_lr[row] += psnr(&lr_latent, hr)?;
            sum_hr[row] += psnr(&hr_latent, hr)?;
        }
    }

    let n = pairs.len() as f64;
    let scales = steps
        .iter()
        .map(|&t| schedule.sqrt_alpha_bar(t))
        .collect::<Result<Vec<_>>>()?;
    let curve = ConvergenceCurve {
        steps,
        scales,
        psnr_lr: sum_lr.iter().map(|s| s / n).collect(),
        psnr_hr: sum_hr.iter().map(|s| s / n).collect(),
        n_pairs: pairs.len(),
    };
    curve.validate()?;
    Ok(curve)
}

/// Smallest recorded step at which the LR and HR latent curves agree within
/// `tol_db` *and keep agreeing* for every larger recorded step. This is the
/// earliest point where starting the sampler from the diffused LR input is
/// indistinguishable from starting from the diffused HR target.
pub fn suggest_cutoff(curve: &ConvergenceCurve, tol_db: f64) -> Result<usize> {
    curve.validate()?;
    if tol_db < 0.0 {
        return Err(Error::Domain(format!(
            "gap tolerance must be non-negative, got {tol_db}"
        )));
    }
    let gap_ok: Vec<bool> = curve
        .psnr_lr
        .iter()
        .zip(&curve.psnr_hr)
        .map(|(l, h)| (l - h).abs() <= tol_db)
        .collect();
    // Walk from the end: the suffix of rows where the gap stays closed.
    let mut first_converged = None;
    for (i, &ok) in gap_ok.iter().enumerate().rev() {
        if ok {
            first_converged = Some(i);
        } else {
            break;
        }
    }
    match first_converged {
        Some(i) => Ok(curve.steps[i]),
        None => Err(Error::Domain(format!(
            "no convergence within schedule: latent gap never stays below {tol_db} dB"
        ))),
    }
}
