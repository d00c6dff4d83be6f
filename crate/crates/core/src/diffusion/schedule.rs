use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BetaSchedule {
    Linear { start: f64, end: f64 },
    Custom,
}

/// Cumulative signal coefficients `ᾱ_t`, strictly decreasing in `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    pub betas: BetaSchedule,
}

impl NoiseSchedule {
    /// Linear betas from `1e-4` to `2e-2`.
    pub fn linear(steps: usize) -> Result<Self> {
        Self::linear_betas(steps, 1e-4, 2e-2)
    }

    pub fn linear_betas(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config("schedule needs at least two steps".into()));
        }
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|t| {
                let beta = start + (end - start) * t as f64 / (steps - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self::validated(alpha_bar, BetaSchedule::Linear { start, end })
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        Self::validated(alpha_bar, BetaSchedule::Custom)
    }

    fn validated(alpha_bar: Vec<f64>, betas: BetaSchedule) -> Result<Self> {
        let ok = !alpha_bar.is_empty()
            && alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0)
            && alpha_bar.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::Config(
                "alpha_bar must be strictly decreasing within (0, 1]".into(),
            ));
        }
        Ok(NoiseSchedule { alpha_bar, betas })
    }

    /// Number of noise levels `T`.
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::Index {
            what: "timestep",
            index: t,
            len: self.alpha_bar.len(),
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · noise`.
    pub fn forward_diffuse(&self, z0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        diffuse_with(z0, noise, self.alpha_bar(t)?)
    }

    /// Evenly spaced sampler timesteps from `T − 1` down to `0`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::Config(format!(
                "sampler steps must be in 1..={total}, got {steps}"
            )));
        }
        if steps == 1 {
            return Ok(vec![total - 1]);
        }
        Ok((0..steps)
            .rev()
            .map(|k| ((total - 1) as f64 * k as f64 / (steps - 1) as f64).round() as usize)
            .collect())
    }
}

/// Forward diffusion at an explicit signal level `alpha_bar ∈ [0, 1]`.
pub fn diffuse_with(z0: &Tensor, noise: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(noise, |z, e| a * z + b * e)
}

/// Clean-sample estimate `x̂₀ = (x_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.zip_map(eps, |x, e| (x - b * e) / a)
}

/// Deterministic DDIM update from level `alpha_bar` to `alpha_bar_prev`.
pub fn ddim_step(x_t: &Tensor, eps: &Tensor, alpha_bar: f64, alpha_bar_prev: f64) -> Result<Tensor> {
    let x0 = predict_x0(x_t, eps, alpha_bar)?;
    diffuse_with(&x0, eps, alpha_bar_prev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_endpoints() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert!(s.alpha_bar(0).unwrap() > 0.999);
        assert!(s.alpha_bar(999).unwrap() < 1e-3);
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn rejects_non_monotone() {
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.95]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn sampling_timesteps_cover_range() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let ts = s.sampling_timesteps(15).unwrap();
        assert_eq!(ts.len(), 15);
        assert_eq!((ts[0], ts[14]), (999, 0));
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert!(s.sampling_timesteps(0).is_err());
        assert!(s.sampling_timesteps(1001).is_err());
    }

    #[test]
    fn endpoints_of_diffusion() {
        let z0 = Tensor::from_fn(vec![5], |i| i as f64);
        let e = Tensor::from_fn(vec![5], |i| -(i as f64) * 0.5);
        assert_eq!(diffuse_with(&z0, &e, 1.0).unwrap(), z0);
        assert_eq!(diffuse_with(&z0, &e, 0.0).unwrap(), e);
    }
}
