//! Forward-diffusion noise schedules: cumulative signal levels
//! alpha_bar(t) used by `add_noise`, including the reference checkpoint's
//! scaled-linear schedule spaced down to a short inference horizon.

use crate::{Error, Result};

/// Cumulative products alpha_bar(t) for t = 0..=T, with alpha_bar(0) = 1
/// (the no-noise limit) and values nonincreasing in (0, 1].
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from alpha_bar values for t = 1..=T.
    pub fn from_alpha_bar(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("schedule needs at least one step".into()));
        }
        let mut prev = 1.0;
        for (i, &a) in values.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) || !a.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "alpha_bar({}) = {a} outside (0, 1]",
                    i + 1
                )));
            }
            if a > prev + 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "alpha_bar({}) = {a} increases over {prev}",
                    i + 1
                )));
            }
            prev = a;
        }
        let mut alpha_bar = Vec::with_capacity(values.len() + 1);
        alpha_bar.push(1.0);
        alpha_bar.extend(values);
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Build from per-step betas: alpha_bar(t) = prod_{i<=t} (1 - beta_i).
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        let mut acc = 1.0;
        let mut values = Vec::with_capacity(betas.len());
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidInput(format!("beta({}) = {b} outside [0, 1)", i + 1)));
            }
            acc *= 1.0 - b;
            values.push(acc);
        }
        NoiseSchedule::from_alpha_bar(values)
    }

    /// The reference checkpoint's training schedule — scaled-linear betas
    /// (linear in sqrt(beta)) from `beta_start` to `beta_end` over
    /// `train_steps` — subsampled to `total_steps` by taking every
    /// (train_steps / total_steps)-th cumulative product. Step t of the
    /// short schedule reads alpha_bar at train step t * train_steps / T,
    /// so t = T recovers the full-noise end of training.
    pub fn scaled_linear_spaced(
        train_steps: u32,
        beta_start: f64,
        beta_end: f64,
        total_steps: u32,
    ) -> Result<Self> {
        if total_steps == 0 || train_steps < total_steps {
            return Err(Error::InvalidInput(format!(
                "cannot space {train_steps} training steps to {total_steps}"
            )));
        }
        let n = train_steps as usize;
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0;
        let mut train_abar = Vec::with_capacity(n);
        for i in 0..n {
            let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let beta = (s0 + frac * (s1 - s0)).powi(2);
            acc *= 1.0 - beta;
            train_abar.push(acc);
        }
        let values = (1..=total_steps as usize)
            .map(|t| {
                let idx = t * n / total_steps as usize;
                train_abar[idx - 1]
            })
            .collect();
        NoiseSchedule::from_alpha_bar(values)
    }

    /// Schedule shipped with latent-diffusion v1.4 (1000 training steps,
    /// betas 8.5e-4 -> 1.2e-2), spaced to `total_steps`.
    pub fn reference(total_steps: u32) -> Result<Self> {
        NoiseSchedule::scaled_linear_spaced(1000, 0.00085, 0.012, total_steps)
    }

    /// Smooth synthetic schedule for the toy backend: alpha_bar(t) =
    /// 1 - 0.8 (t/T)^3, running from near-clean to 0.2 signal. The cubic
    /// start keeps early timesteps gentle — the toy "denoiser" is a bare
    /// rescaler, so it models a trained model's noise robustness by
    /// seeing little noise at the default t = 8 of 50.
    pub fn toy(total_steps: u32) -> Self {
        let t_max = total_steps.max(1) as f64;
        let values = (1..=total_steps.max(1))
            .map(|t| 1.0 - 0.8 * (t as f64 / t_max).powi(3))
            .collect();
        NoiseSchedule::from_alpha_bar(values).expect("toy schedule is monotone by construction")
    }

    /// Number of steps T.
    pub fn total_steps(&self) -> u32 {
        (self.alpha_bar.len() - 1) as u32
    }

    /// alpha_bar(t) for 0 <= t <= T.
    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        self.alpha_bar
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!(
                "timestep {t} out of range (schedule has {} steps)",
                self.total_steps()
            )))
    }

    /// (sqrt(alpha_bar), sqrt(1 - alpha_bar)) for the forward-noising mix,
    /// restricted to the valid noising range 1 <= t <= T.
    pub fn noise_coefficients(&self, t: u32) -> Result<(f64, f64)> {
        if t < 1 || t > self.total_steps() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} out of range (1..={})",
                self.total_steps()
            )));
        }
        let a = self.alpha_bar(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }
}
