//! Simplified blur / downsample / noise / quantisation degradation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::resize::{downsample, gaussian_blur};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::FrameStack;

/// Ranges from which per-video degradation parameters are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationRecipe {
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    /// Inclusive range of quantisation levels; `None` disables quantisation.
    pub levels: Option<(u32, u32)>,
    pub scale: usize,
}

impl Default for DegradationRecipe {
    fn default() -> Self {
        DegradationRecipe {
            blur_sigma: (0.2, 1.2),
            noise_sigma: (0.0, 0.03),
            levels: Some((32, 128)),
            scale: 4,
        }
    }
}

impl DegradationRecipe {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, seed: u64) -> DegradationParams {
        let draw = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        DegradationParams {
            blur_sigma: draw(rng, self.blur_sigma),
            noise_sigma: draw(rng, self.noise_sigma),
            levels: self.levels.map(|(lo, hi)| rng.gen_range(lo..=hi.max(lo))),
            scale: self.scale,
            seed,
        }
    }
}

/// Concrete degradation applied to one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub levels: Option<u32>,
    pub scale: usize,
    pub seed: u64,
}

impl DegradationParams {
    /// Pure bicubic downsampling by `scale`.
    pub fn identity(scale: usize) -> Self {
        DegradationParams {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            levels: None,
            scale,
            seed: 0,
        }
    }
}

pub fn quantize(v: f64, levels: u32) -> f64 {
    let l = (levels - 1) as f64;
    (v * l).round() / l
}

/// Blur, downsample, add noise, quantise and clamp. Frames are degraded
/// independently of each other.
pub fn degrade(hq: &FrameStack, params: &DegradationParams) -> Result<FrameStack> {
    if let Some(l) = params.levels {
        if l < 2 {
            return Err(Error::Config(format!("quantisation needs at least 2 levels, got {l}")));
        }
    }
    if params.noise_sigma < 0.0 || !params.noise_sigma.is_finite() {
        return Err(Error::Config(format!("invalid noise sigma {}", params.noise_sigma)));
    }
    let blurred = gaussian_blur(hq, params.blur_sigma)?;
    let mut lq = downsample(&blurred, params.scale)?;
    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = stream(params.seed, "degrade-noise", 0);
        lq.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let levels = params.levels;
    Ok(lq.map(|v| {
        let v = v.clamp(0.0, 1.0);
        match levels {
            Some(l) => quantize(v, l),
            None => v,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quantisation_error_is_half_bin() {
        for i in 0..=1000 {
            let v = i as f64 / 1000.0;
            assert!((quantize(v, 32) - v).abs() <= 1.0 / 62.0 + 1e-15);
        }
    }

    #[test]
    fn identity_recipe_is_plain_downsample() {
        let hq = Tensor::from_fn(vec![2, 8, 8, 3], |i| 0.5 + 0.4 * (i as f64 * 0.1).sin());
        let a = degrade(&hq, &DegradationParams::identity(4)).unwrap();
        let b = downsample(&hq, 4).unwrap().map(|v| v.clamp(0.0, 1.0));
        assert_eq!(a, b);
    }

    #[test]
    fn noise_is_seeded() {
        let hq = Tensor::full(vec![1, 8, 8, 3], 0.5);
        let p = DegradationParams {
            noise_sigma: 0.05,
            seed: 9,
            ..DegradationParams::identity(4)
        };
        assert_eq!(degrade(&hq, &p).unwrap(), degrade(&hq, &p).unwrap());
    }
}
