//! Cosine cumulative noise schedule and the forward noising process.

use serde::{Deserialize, Serialize};
use timeweaver_tensor::Tensor;

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `alpha_bar[t]` for `t` in `0..=T`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.timesteps())))
    }
}

/// `alpha_bar_t = prod_{s<=t} (1 - beta_s)` with betas from the cosine curve,
/// each capped at 0.999 so the last entry stays positive.
pub fn make_schedule(t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {t_max}")));
    }
    let f = |t: usize| {
        let u = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for t in 1..=t_max {
        let beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { alpha_bar })
}

/// `z_t = sqrt(a) z0 + sqrt(1 - a) eps`.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t > sched.timesteps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", sched.timesteps())));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::DimensionMismatch(format!("latent {:?} vs noise {:?}", z0.shape(), eps.shape())));
    }
    let a = sched.alpha_bar[t];
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z0.zip_map(eps, |z, e| (sa * z as f64 + sb * e as f64) as f32)?)
}

/// One-step clean estimate `(z_t - sqrt(1 - a) eps) / sqrt(a)`.
pub fn predict_x0(z_t: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let a = sched.alpha_bar(t)?;
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z_t.zip_map(eps, |z, e| ((z as f64 - sb * e as f64) / sa) as f32)?)
}

/// Pixels in [0, 1] to the `[-1, 1]` working space.
pub fn encode_pixels(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

pub fn decode_pixels(z: &Tensor) -> Tensor {
    z.map(|v| (v + 1.0) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_shape_and_monotonicity() {
        let s = make_schedule(100).unwrap();
        assert_eq!(s.alpha_bar.len(), 101);
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[100] > 0.0);
        assert_eq!(make_schedule(2).unwrap().alpha_bar.len(), 3);
        assert!(make_schedule(1).is_err());
    }

    #[test]
    fn noising_edge_cases() {
        let s = make_schedule(100).unwrap();
        let z0 = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let eps = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(add_noise(&z0, 0, &eps, &s).unwrap(), z0);
        let zt = add_noise(&z0, 40, &Tensor::zeros(&[2]), &s).unwrap();
        let a = s.alpha_bar[40].sqrt() as f32;
        assert!((zt.data()[0] - 0.3 * a).abs() < 1e-7);
        assert!(add_noise(&z0, 101, &eps, &s).is_err());
    }

    proptest! {
        #[test]
        fn noising_inverts(vals in prop::collection::vec(-1.0f32..1.0, 12), noise in prop::collection::vec(-3.0f32..3.0, 12), t in 1usize..=50) {
            let s = make_schedule(100).unwrap();
            let z0 = Tensor::new(&[12], vals).unwrap();
            let eps = Tensor::new(&[12], noise).unwrap();
            let zt = add_noise(&z0, t, &eps, &s).unwrap();
            prop_assert!(predict_x0(&zt, t, &eps, &s).unwrap().max_abs_diff(&z0).unwrap() < 1e-6);
        }
    }
}
