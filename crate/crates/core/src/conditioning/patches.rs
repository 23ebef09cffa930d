//! Patch-level organ emphasis: mask pooling, unit-mean patch weights and
//! token reweighting.

use serde::{Deserialize, Serialize};
use timeweaver_tensor::Tensor;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor};

/// Row-major `side x side` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub side: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::DimensionMismatch(format!("{side}x{side} grid needs {} values", side * side)));
        }
        Ok(Self { side, values })
    }
}

/// Max-pools `mask` onto a `p x p` grid; each cell covers an
/// `(H/p) x (W/p)` block and is 1 iff any pixel in it is set.
pub fn pool_mask(mask: &BinaryMask, p: usize) -> Result<Grid> {
    let (h, w) = (mask.height(), mask.width());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::DimensionMismatch(format!("{h}x{w} mask does not split into a {p}x{p} grid")));
    }
    let (kh, kw) = (h / p, w / p);
    let mut values = vec![0.0; p * p];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                values[(y / kh) * p + x / kw] = 1.0;
            }
        }
    }
    Grid::new(p, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchWeightMap {
    pub weights: Vec<f64>,
    pub beta: f64,
    pub pooled_mask: Grid,
}

/// `w_i = (1 + beta * m_i) / mean_j(1 + beta * m_j)`.
pub fn patch_weights(m: &Grid, beta: f64) -> Result<PatchWeightMap> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be finite and >= 0, got {beta}")));
    }
    if m.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("pooled mask values must lie in [0, 1]".into()));
    }
    let num: Vec<f64> = m.values.iter().map(|&v| 1.0 + beta * v).collect();
    let mean = num.iter().sum::<f64>() / num.len() as f64;
    Ok(PatchWeightMap { weights: num.iter().map(|n| n / mean).collect(), beta, pooled_mask: m.clone() })
}

/// Scales token row `i` of `[P, d]` by `w_i`.
pub fn reweight_tokens(x: &Tensor, w: &PatchWeightMap) -> Result<Tensor> {
    if x.dims() != 2 || x.shape()[0] != w.weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} tokens against {} patch weights",
            x.shape(),
            w.weights.len()
        )));
    }
    let d = x.shape()[1];
    let mut out = x.clone();
    for (row, &wi) in out.data_mut().chunks_mut(d).zip(&w.weights) {
        row.iter_mut().for_each(|v| *v = (*v as f64 * wi) as f32);
    }
    Ok(out)
}

/// Non-overlapping `(H/p) x (W/p)` patches flattened channel-last: `[p*p, kh*kw*C]`.
pub fn patchify(img: &ImageTensor, p: usize) -> Result<Tensor> {
    let (h, w, c) = img.shape();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::DimensionMismatch(format!("{h}x{w} image does not split into a {p}x{p} grid")));
    }
    let (kh, kw) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w * c);
    for py in 0..p {
        for px in 0..p {
            for y in 0..kh {
                for x in 0..kw {
                    for ch in 0..c {
                        data.push(img.get(py * kh + y, px * kw + x, ch));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[p * p, kh * kw * c], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pooling_marks_cells_with_any_pixel() {
        let mut m = BinaryMask::empty(4, 4);
        assert_eq!(pool_mask(&m, 2).unwrap().values, vec![0.0; 4]);
        m.set(0, 0, true);
        assert_eq!(pool_mask(&m, 2).unwrap().values, vec![1.0, 0.0, 0.0, 0.0]);
        let full = BinaryMask::new(4, 4, vec![true; 16]).unwrap();
        assert_eq!(pool_mask(&full, 2).unwrap().values, vec![1.0; 4]);
        assert!(matches!(pool_mask(&m, 3), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn hand_evaluated_weights() {
        let m = Grid::new(2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let w = patch_weights(&m, 1.0).unwrap().weights;
        let want = [4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(patch_weights(&m, 0.0).unwrap().weights.iter().all(|&v| v == 1.0));
        let ones = Grid::new(2, vec![1.0; 4]).unwrap();
        assert!(patch_weights(&ones, 3.7).unwrap().weights.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn reweighting_scales_rows() {
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = PatchWeightMap { weights: vec![2.0, 0.5], beta: 1.0, pooled_mask: Grid::new(1, vec![0.0]).unwrap() };
        assert_eq!(reweight_tokens(&x, &w).unwrap().data(), &[2.0, 4.0, 1.5, 2.0]);
        assert!(reweight_tokens(&Tensor::zeros(&[3, 2]), &w).is_err());
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let img = ImageTensor::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.shape(), &[4, 1]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    fn grid_and_beta() -> impl Strategy<Value = (Vec<f64>, f64)> {
        (prop::collection::vec(0.0f64..=1.0, 16), 0.0f64..20.0)
    }

    proptest! {
        #[test]
        fn unit_mean_and_bounds((m, beta) in grid_and_beta()) {
            let w = patch_weights(&Grid::new(4, m).unwrap(), beta).unwrap().weights;
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-6);
            for &wi in &w {
                prop_assert!(wi >= 1.0 / (1.0 + beta) && wi <= 1.0 + beta);
            }
        }

        #[test]
        fn larger_mask_values_get_larger_weights((m, beta) in grid_and_beta()) {
            prop_assume!(beta > 0.0);
            let w = patch_weights(&Grid::new(4, m.clone()).unwrap(), beta).unwrap().weights;
            for i in 0..16 {
                for j in 0..16 {
                    if m[i] > m[j] {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }

        #[test]
        fn reweighting_is_linear(a in prop::collection::vec(-5.0f32..5.0, 8), b in prop::collection::vec(-5.0f32..5.0, 8)) {
            let m = Grid::new(2, vec![1.0, 0.0, 0.5, 0.0]).unwrap();
            let w = patch_weights(&m, 1.5).unwrap();
            let ta = Tensor::new(&[4, 2], a).unwrap();
            let tb = Tensor::new(&[4, 2], b).unwrap();
            let lhs = reweight_tokens(&ta.add(&tb).unwrap(), &w).unwrap();
            let rhs = reweight_tokens(&ta, &w).unwrap().add(&reweight_tokens(&tb, &w).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
        }
    }
}
