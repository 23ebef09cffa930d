//! Full-reference image metrics and identity/age scores.

use crate::conditioning::IdentityEncoder;
use crate::error::{Error, Result};
use crate::filters::gaussian_kernel;
use crate::image::ImageTensor;

/// Reported value for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

/// Mean local SSIM over valid Gaussian windows and channels.
pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, p: &SsimParams) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, ch) = a.shape();
    let k = p.window;
    if k == 0 || k % 2 == 0 || h < k || w < k {
        return Err(Error::DimensionMismatch(format!("{h}x{w} image with a {k}x{k} window")));
    }
    let g = gaussian_kernel(p.sigma, k / 2);
    let (c1, c2) = ((p.k1).powi(2), (p.k2).powi(2));
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for c in 0..ch {
        let plane = |img: &ImageTensor, f: &dyn Fn(f64, f64) -> f64, other: &ImageTensor| {
            let mut rows = vec![0f64; h * wo];
            for y in 0..h {
                for x in 0..wo {
                    rows[y * wo + x] = (0..k)
                        .map(|i| g[i] * f(img.get(y, x + i, c) as f64, other.get(y, x + i, c) as f64))
                        .sum();
                }
            }
            let mut out = vec![0f64; ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
                }
            }
            out
        };
        let mu_a = plane(a, &|x, _| x, b);
        let mu_b = plane(b, &|x, _| x, a);
        let aa = plane(a, &|x, _| x * x, b);
        let bb = plane(b, &|x, _| x * x, a);
        let ab = plane(a, &|x, y| x * y, b);
        for i in 0..ho * wo {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ch * ho * wo) as f64)
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Cosine similarity of identity embeddings.
pub fn ids(encoder: &IdentityEncoder, restored: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    let e = encoder.embed_batch(&[restored, target])?;
    Ok(e[0].cosine(&e[1]))
}

/// Pairwise identity similarity for equally long lists.
pub fn ids_batch(encoder: &IdentityEncoder, restored: &[&ImageTensor], target: &[&ImageTensor]) -> Result<Vec<f64>> {
    if restored.len() != target.len() {
        return Err(Error::DimensionMismatch(format!("{} restored vs {} targets", restored.len(), target.len())));
    }
    let a = encoder.embed_batch(restored)?;
    let b = encoder.embed_batch(target)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x.cosine(y)).collect())
}

/// Mean absolute difference between predicted and true ages.
pub fn mean_abs_error(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} predictions vs {} labels", predicted.len(), truth.len())));
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random(seed_root: u64) -> ImageTensor {
        let mut rng = seed::rng(seed_root);
        ImageTensor::new(16, 12, 3, (0..16 * 12 * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageTensor::filled(4, 4, 3, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &ImageTensor::filled(4, 4, 3, 1.0)).unwrap()).abs() < 1e-12);
        let b = ImageTensor::filled(4, 4, 3, 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_identities() {
        let (a, b) = (random(1), random(2));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let mut checker = ImageTensor::filled(16, 16, 1, 0.0);
        for y in 0..16 {
            for x in 0..16 {
                checker.set(y, x, 0, ((x + y) % 2) as f32);
            }
        }
        let inverted = ImageTensor::new(16, 16, 1, checker.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&checker, &inverted).unwrap() < 0.0);
        assert!(ssim(&ImageTensor::filled(4, 4, 1, 0.0), &ImageTensor::filled(4, 4, 1, 0.0)).is_err());
    }

    #[test]
    fn mae_is_permutation_equivariant() {
        let p = [10.0, 20.0, 35.0];
        let t = [12.0, 15.0, 35.0];
        let m = mean_abs_error(&p, &t).unwrap();
        assert!((m - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(mean_abs_error(&[35.0, 10.0, 20.0], &[35.0, 12.0, 15.0]).unwrap(), m);
        assert_eq!(mean_abs_error(&t, &t).unwrap(), 0.0);
        assert!(mean_abs_error(&p, &t[..2]).is_err());
    }
}
