use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{gaussian_blur, resize_bilinear};
use crate::image::ImageTensor;
use crate::seed;

pub const DOWNSCALE_FACTORS: [u32; 3] = [2, 3, 4];
pub const QUANT_LEVELS: [u32; 4] = [16, 32, 64, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub blur_sigma: f32,
    pub downscale_factor: u32,
    pub noise_sigma: f32,
    pub quant_levels: u32,
    pub seed: u64,
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=3.0).contains(&self.blur_sigma) {
            return Err(Error::InvalidArgument(format!("blur_sigma {} outside [0.5, 3]", self.blur_sigma)));
        }
        if !DOWNSCALE_FACTORS.contains(&self.downscale_factor) {
            return Err(Error::InvalidArgument(format!(
                "downscale_factor {} not in {DOWNSCALE_FACTORS:?}",
                self.downscale_factor
            )));
        }
        if !(0.0..=0.1).contains(&self.noise_sigma) {
            return Err(Error::InvalidArgument(format!("noise_sigma {} outside [0, 0.1]", self.noise_sigma)));
        }
        if !QUANT_LEVELS.contains(&self.quant_levels) {
            return Err(Error::InvalidArgument(format!("quant_levels {} not in {QUANT_LEVELS:?}", self.quant_levels)));
        }
        Ok(())
    }
}

/// Ranges a dataset builder samples degradation configs from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeRanges {
    pub blur_sigma: [f32; 2],
    pub downscale_factors: Vec<u32>,
    pub noise_sigma: [f32; 2],
    pub quant_levels: Vec<u32>,
}

impl Default for DegradeRanges {
    fn default() -> Self {
        Self {
            blur_sigma: [0.6, 1.6],
            downscale_factors: DOWNSCALE_FACTORS.to_vec(),
            noise_sigma: [0.0, 0.05],
            quant_levels: QUANT_LEVELS.to_vec(),
        }
    }
}

impl DegradeRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, seed: u64) -> DegradeConfig {
        let pick = |rng: &mut R, xs: &[u32]| xs[rng.gen_range(0..xs.len())];
        let uniform = |rng: &mut R, r: [f32; 2]| if r[1] > r[0] { rng.gen_range(r[0]..r[1]) } else { r[0] };
        DegradeConfig {
            blur_sigma: uniform(rng, self.blur_sigma),
            downscale_factor: pick(rng, &self.downscale_factors),
            noise_sigma: uniform(rng, self.noise_sigma),
            quant_levels: pick(rng, &self.quant_levels),
            seed,
        }
    }
}

/// Gaussian blur, bilinear down and up, clipped Gaussian noise, uniform quantization.
pub fn degrade(image: &ImageTensor, cfg: &DegradeConfig) -> Result<ImageTensor> {
    if !image.is_finite() {
        return Err(Error::NonFinite("degrade input".into()));
    }
    cfg.validate()?;
    let (h, w, _) = image.shape();
    let f = cfg.downscale_factor as f32;
    let small_h = ((h as f32 / f).round() as usize).max(1);
    let small_w = ((w as f32 / f).round() as usize).max(1);
    let blurred = gaussian_blur(image, cfg.blur_sigma as f64);
    let mut out = resize_bilinear(&resize_bilinear(&blurred, small_h, small_w), h, w);
    let mut rng = seed::derived_rng(cfg.seed, "degrade");
    let levels = (cfg.quant_levels - 1) as f32;
    for v in out.data_mut() {
        let noise: f32 = if cfg.noise_sigma > 0.0 { rng.sample::<f32, _>(StandardNormal) * cfg.noise_sigma } else { 0.0 };
        let clipped = (*v + noise).clamp(0.0, 1.0);
        *v = (clipped * levels).round() / levels;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn cfg(noise: f32, levels: u32) -> DegradeConfig {
        DegradeConfig { blur_sigma: 0.5, downscale_factor: 2, noise_sigma: noise, quant_levels: levels, seed: 11 }
    }

    fn ramp() -> ImageTensor {
        ImageTensor::new(8, 8, 3, (0..192).map(|i| (i as f32 / 191.0).powf(1.3)).collect()).unwrap()
    }

    #[test]
    fn constant_image_passes_through_minimal_config() {
        let img = ImageTensor::filled(8, 8, 3, 128.0 / 255.0);
        let out = degrade(&img, &cfg(0.0, 256)).unwrap();
        for v in out.data() {
            assert!((v - 128.0 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let a = degrade(&ramp(), &cfg(0.1, 256)).unwrap();
        assert_eq!(a, degrade(&ramp(), &cfg(0.1, 256)).unwrap());
    }

    #[test]
    fn quantization_bounds_distinct_values() {
        let out = degrade(&ramp(), &cfg(0.05, 16)).unwrap();
        for ch in 0..3 {
            let distinct: BTreeSet<u32> = (0..64).map(|i| out.data()[i * 3 + ch].to_bits()).collect();
            assert!(distinct.len() <= 16);
        }
    }

    #[test]
    fn rejects_non_finite_and_out_of_range() {
        let mut img = ramp();
        img.data_mut()[5] = f32::NAN;
        assert!(matches!(degrade(&img, &cfg(0.0, 256)), Err(Error::NonFinite(_))));
        assert!(degrade(&ramp(), &cfg(0.0, 100)).is_err());
    }
}
