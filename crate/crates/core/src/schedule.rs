//! Noise schedules: the per-step variance sequence and everything derived
//! from it (cumulative signal scale, posterior variances, cutoff lookup).
//!
//! All schedule arithmetic is in f64; cumulative products over thousands of
//! steps lose visible precision in f32.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Parsed, unbuilt description of a schedule: `linear(beta_start,beta_end,steps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl ScheduleSpec {
    pub fn new(beta_start: f64, beta_end: f64, steps: usize) -> Self {
        Self {
            beta_start,
            beta_end,
            steps,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.beta_start, self.beta_end, self.steps)
    }

    /// Same beta endpoints, different step count.
    pub fn with_steps(&self, steps: usize) -> Self {
        Self { steps, ..*self }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "linear({},{},{})",
            self.beta_start, self.beta_end, self.steps
        )
    }
}

impl FromStr for ScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let inner = s
            .strip_prefix("linear(")
            .and_then(|rest| rest.strip_suffix(')'))
            .ok_or_else(|| {
                Error::Config(format!(
                    "schedule must be written as linear(<beta_start>,<beta_end>,<steps>), got `{s}`"
                ))
            })?;
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "schedule takes exactly three arguments, got {} in `{s}`",
                parts.len()
            )));
        }
        let beta_start: f64 = parts[0]
            .parse()
            .map_err(|_| Error::Config(format!("bad beta_start `{}`", parts[0])))?;
        let beta_end: f64 = parts[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad beta_end `{}`", parts[1])))?;
        let steps: usize = parts[2]
            .parse()
            .map_err(|_| Error::Config(format!("bad step count `{}`", parts[2])))?;
        Ok(Self {
            beta_start,
            beta_end,
            steps,
        })
    }
}

/// Prebuilt linear noise schedule.
///
/// Sequences are stored for t = 1..=T at index t-1. `alpha_bar(0)` is defined
/// as 1 (no diffusion), which also fixes the posterior variance at t = 1 to 0:
/// the final denoising step is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sqrt_alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a linear schedule: betas increase linearly from `beta_start` at
    /// t = 1 to `beta_end` at t = steps. A single-step schedule uses
    /// `beta_start` alone.
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::Domain(format!(
                "beta bounds must lie in (0,1), got ({beta_start}, {beta_end})"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::Domain(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }

        let mut betas = Vec::with_capacity(steps);
        for t in 1..=steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (t - 1) as f64 / (steps - 1) as f64 * (beta_end - beta_start)
            };
            betas.push(beta);
        }

        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let sqrt_alpha_bars: Vec<f64> = alpha_bars.iter().map(|a| a.sqrt()).collect();

        // beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, with abar_0 = 1.
        let mut posterior_vars = Vec::with_capacity(steps);
        for t in 1..=steps {
            let abar_prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
            let abar = alpha_bars[t - 1];
            posterior_vars.push((1.0 - abar_prev) / (1.0 - abar) * betas[t - 1]);
        }

        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sqrt_alpha_bars,
            posterior_vars,
        })
    }

    /// Number of diffusion steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::Range(format!(
                "step {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    /// Cumulative product of alphas up to step t; t = 0 gives the empty
    /// product 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Noise scale sqrt(alpha_bar_t); the conditioning signal of the denoiser.
    pub fn sqrt_alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.sqrt_alpha_bars[t - 1])
    }

    /// Forward posterior variance beta_tilde_t. Zero at t = 1.
    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.posterior_vars[t - 1])
    }

    /// Continuous noise scale drawn uniformly from step t's interval
    /// [sqrt(abar_t), sqrt(abar_{t-1})].
    pub fn noise_scale_in_step(&self, t: usize, rng: &mut impl Rng) -> Result<f64> {
        self.check_step(t)?;
        let lo = self.sqrt_alpha_bars[t - 1];
        let hi = if t == 1 {
            1.0
        } else {
            self.sqrt_alpha_bars[t - 2]
        };
        Ok(lo + rng.gen::<f64>() * (hi - lo))
    }

    /// Draw a uniform step index and a continuous noise scale inside its
    /// interval. Deterministic given the rng state.
    pub fn sample_noise_scale(&self, rng: &mut impl Rng) -> (usize, f64) {
        let t = rng.gen_range(1..=self.len());
        let scale = self
            .noise_scale_in_step(t, rng)
            .expect("t drawn from 1..=T is always valid");
        (t, scale)
    }

    /// Largest step K whose noise scale still satisfies
    /// sqrt(abar_K) >= threshold. Returns 0 when even the first step falls
    /// below the threshold and T when every step stays above it.
    pub fn cutoff_step_for_threshold(&self, threshold: f64) -> usize {
        // sqrt_alpha_bars is strictly decreasing, so the count of entries
        // >= threshold is exactly the largest qualifying step index.
        self.sqrt_alpha_bars
            .partition_point(|&s| s >= threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    /// Independent oracle: direct iterative product of (1 - beta_t).
    fn alpha_bar_oracle(beta_start: f64, beta_end: f64, steps: usize, t: usize) -> f64 {
        let mut prod = 1.0;
        for i in 1..=t {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (i - 1) as f64 / (steps - 1) as f64 * (beta_end - beta_start)
            };
            prod *= 1.0 - beta;
        }
        prod
    }

    #[test]
    fn linear_endpoints_match_requested_bounds() {
        let s = NoiseSchedule::linear(5e-5, 0.01, 2000).unwrap();
        assert_relative_eq!(s.beta(1).unwrap(), 5e-5, max_relative = 1e-15);
        assert_relative_eq!(s.beta(2000).unwrap(), 0.01, max_relative = 1e-12);
        // betas non-decreasing
        for t in 2..=2000 {
            assert!(s.beta(t).unwrap() >= s.beta(t - 1).unwrap());
        }
    }

    #[test]
    fn single_step_schedule_uses_beta_start() {
        let s = NoiseSchedule::linear(0.1, 0.1, 1).unwrap();
        assert_eq!(s.len(), 1);
        assert_relative_eq!(s.beta(1).unwrap(), 0.1);
        assert_relative_eq!(s.alpha_bar(1).unwrap(), 0.9, max_relative = 1e-15);
    }

    #[test]
    fn inference_schedule_noise_scale_at_midpoint() {
        // Pinned from an independent product script: sqrt(abar_50) of
        // linear(1e-5, 0.213, 100).
        let s = NoiseSchedule::linear(1e-5, 0.213, 100).unwrap();
        assert_relative_eq!(
            s.sqrt_alpha_bar(50).unwrap(),
            0.254_757_070_046_639_17,
            max_relative = 1e-12
        );
        let oracle = alpha_bar_oracle(1e-5, 0.213, 100, 50).sqrt();
        assert_relative_eq!(s.sqrt_alpha_bar(50).unwrap(), oracle, max_relative = 1e-12);
    }

    #[test]
    fn alpha_bar_edge_cases() {
        let s = NoiseSchedule::linear(5e-5, 0.01, 2000).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(2001).is_err());

        let single = NoiseSchedule::linear(0.1, 0.1, 1).unwrap();
        assert_relative_eq!(single.alpha_bar(1).unwrap(), 0.9, max_relative = 1e-15);

        let oracle = alpha_bar_oracle(5e-5, 0.01, 2000, 2000);
        assert_relative_eq!(s.alpha_bar(2000).unwrap(), oracle, max_relative = 1e-12);
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing_and_recurrent() {
        for spec in [
            ScheduleSpec::new(5e-5, 0.01, 2000),
            ScheduleSpec::new(1e-5, 0.213, 100),
            ScheduleSpec::new(0.1, 0.1, 1),
        ] {
            let s = spec.build().unwrap();
            for t in 1..=s.len() {
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                let recurrence = s.alpha(t).unwrap() * s.alpha_bar(t - 1).unwrap();
                assert_relative_eq!(s.alpha_bar(t).unwrap(), recurrence, max_relative = 1e-12);
            }
            assert!(s.alpha_bar(s.len()).unwrap() > 0.0);
        }
    }

    #[test]
    fn posterior_var_matches_definition_and_vanishes_at_first_step() {
        let s = NoiseSchedule::linear(5e-5, 0.01, 2000).unwrap();
        assert_eq!(s.posterior_var(1).unwrap(), 0.0);
        for t in 2..=2000 {
            let expect = (1.0 - s.alpha_bar(t - 1).unwrap()) / (1.0 - s.alpha_bar(t).unwrap())
                * s.beta(t).unwrap();
            assert_relative_eq!(s.posterior_var(t).unwrap(), expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn cutoff_examples() {
        let inf = NoiseSchedule::linear(1e-5, 0.213, 100).unwrap();
        assert_eq!(inf.cutoff_step_for_threshold(0.25), 50);
        assert_eq!(inf.cutoff_step_for_threshold(1.0), 0);
        assert_eq!(inf.cutoff_step_for_threshold(0.0), 100);
    }

    #[test]
    fn cutoff_inverts_alpha_bar() {
        let s = NoiseSchedule::linear(1e-5, 0.213, 100).unwrap();
        for t in 1..=s.len() {
            assert_eq!(s.cutoff_step_for_threshold(s.sqrt_alpha_bar(t).unwrap()), t);
        }
    }

    #[test]
    fn sampled_scale_lies_in_step_interval() {
        let single = NoiseSchedule::linear(0.1, 0.1, 1).unwrap();
        let mut rng = derive_rng(3, &[1]);
        for _ in 0..100 {
            let (t, scale) = single.sample_noise_scale(&mut rng);
            assert_eq!(t, 1);
            assert!(scale >= 0.9f64.sqrt() && scale <= 1.0);
        }

        let s = NoiseSchedule::linear(5e-5, 0.01, 2000).unwrap();
        let floor = s.sqrt_alpha_bar(s.len()).unwrap();
        for _ in 0..1000 {
            let (t, scale) = s.sample_noise_scale(&mut rng);
            assert!(scale > floor && scale <= 1.0);
            assert!(scale >= s.sqrt_alpha_bar(t).unwrap());
            assert!(scale <= s.sqrt_alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn sample_noise_scale_is_reproducible() {
        let s = NoiseSchedule::linear(5e-5, 0.01, 2000).unwrap();
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..64 {
            let (ta, sa) = s.sample_noise_scale(&mut a);
            let (tb, sb) = s.sample_noise_scale(&mut b);
            assert_eq!(ta, tb);
            assert_eq!(sa.to_bits(), sb.to_bits());
        }
    }

    #[test]
    fn step_indices_are_uniform_over_many_draws() {
        // Frequency check: 1e5 draws on the training schedule; every step
        // count stays within 5 sigma of the uniform expectation.
        let s = NoiseSchedule::linear(5e-5, 0.01, 2000).unwrap();
        let t_count = s.len();
        let draws = 100_000usize;
        let mut counts = vec![0usize; t_count];
        let mut rng = derive_rng(0, &[99]);
        for _ in 0..draws {
            let (t, _) = s.sample_noise_scale(&mut rng);
            counts[t - 1] += 1;
        }
        let p = 1.0 / t_count as f64;
        let tol = 5.0 * (p / draws as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - p).abs() <= tol,
                "step {} frequency {freq} outside {p} +- {tol}",
                i + 1
            );
        }
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(NoiseSchedule::linear(0.0, 0.01, 10).is_err());
        assert!(NoiseSchedule::linear(0.01, 1.0, 10).is_err());
        assert!(NoiseSchedule::linear(0.02, 0.01, 10).is_err());
        assert!(NoiseSchedule::linear(0.01, 0.02, 0).is_err());
    }

    #[test]
    fn spec_parses_and_round_trips() {
        let spec: ScheduleSpec = "linear(5e-5,0.01,2000)".parse().unwrap();
        assert_eq!(spec, ScheduleSpec::new(5e-5, 0.01, 2000));
        let text = spec.to_string();
        let again: ScheduleSpec = text.parse().unwrap();
        assert_eq!(spec, again);

        assert!(" linear( 1e-5 , 0.213 , 100 ) "
            .parse::<ScheduleSpec>()
            .is_ok());
        assert!("cosine(1,2,3)".parse::<ScheduleSpec>().is_err());
        assert!("linear(1e-5,0.213)".parse::<ScheduleSpec>().is_err());
    }
}
