//! Token-targeted attention boost: a spatial map from the attention mass on
//! the age tokens that scales an extra copy of the text readout.

use serde::{Deserialize, Serialize};
use timeweaver_tensor::Tensor;

use crate::error::{Error, Result};

/// Below this min-max range the response map is treated as uninformative.
pub const DEGENERATE_RANGE: f64 = 1e-8;

/// Per-position response `gamma` in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialResponse {
    pub gamma: Vec<f32>,
}

impl SpatialResponse {
    pub fn zeros(len: usize) -> Self {
        Self { gamma: vec![0.0; len] }
    }

    pub fn is_zero(&self) -> bool {
        self.gamma.iter().all(|&g| g == 0.0)
    }

    pub fn min(&self) -> f32 {
        self.gamma.iter().cloned().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.gamma.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.gamma.iter().map(|&g| g as f64).sum::<f64>() / self.gamma.len().max(1) as f64
    }
}

/// `gamma` from a row-major `[positions, n_tokens]` score matrix: scores summed
/// over the selected tokens, then min-max normalized.
pub fn gamma_from_scores(scores: &[f32], n_tokens: usize, s_age: &[usize]) -> SpatialResponse {
    let positions = scores.len() / n_tokens.max(1);
    if s_age.is_empty() {
        return SpatialResponse::zeros(positions);
    }
    let raw: Vec<f64> = scores
        .chunks(n_tokens)
        .map(|row| s_age.iter().map(|&j| row[j] as f64).sum())
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > DEGENERATE_RANGE) {
        return SpatialResponse::zeros(positions);
    }
    SpatialResponse { gamma: raw.iter().map(|&r| ((r - lo) / (hi - lo)).clamp(0.0, 1.0) as f32).collect() }
}

fn check_selector(s_age: &[usize], n_tokens: usize) -> Result<()> {
    match s_age.iter().find(|&&j| j >= n_tokens) {
        Some(j) => Err(Error::InvalidArgument(format!("age token index {j} outside {n_tokens} tokens"))),
        None => Ok(()),
    }
}

/// Response map of queries `Q [hw, d]` against keys `K [n, d]`.
pub fn ttab_gamma(q: &Tensor, k: &Tensor, s_age: &[usize]) -> Result<SpatialResponse> {
    if q.dims() != 2 || k.dims() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(Error::DimensionMismatch(format!("queries {:?} vs keys {:?}", q.shape(), k.shape())));
    }
    let (hw, d, n) = (q.shape()[0], q.shape()[1], k.shape()[0]);
    check_selector(s_age, n)?;
    let mut scores = vec![0f32; hw * n];
    for i in 0..hw {
        for j in 0..n {
            scores[i * n + j] =
                (0..d).map(|c| q.data()[i * d + c] as f64 * k.data()[j * d + c] as f64).sum::<f64>() as f32;
        }
    }
    Ok(gamma_from_scores(&scores, n, s_age))
}

/// `z + gamma * softmax(Q K^T / sqrt(d)) V`, all row-major 2-D.
pub fn ttab_attention(z: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor, gamma: &SpatialResponse) -> Result<Tensor> {
    let (hw, d) = (q.shape()[0], q.shape()[1]);
    let (n, c) = (k.shape()[0], v.shape()[1]);
    if z.shape() != [hw, c] || k.shape()[1] != d || v.shape()[0] != n || gamma.gamma.len() != hw {
        return Err(Error::DimensionMismatch(format!(
            "z {:?}, q {:?}, k {:?}, v {:?}, gamma {}",
            z.shape(),
            q.shape(),
            k.shape(),
            v.shape(),
            gamma.gamma.len()
        )));
    }
    let mut out = z.clone();
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..hw {
        let s: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|cc| q.data()[i * d + cc] as f64 * k.data()[j * d + cc] as f64).sum::<f64>() * scale)
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let total: f64 = e.iter().sum();
        for cc in 0..c {
            let read: f64 = (0..n).map(|j| e[j] / total * v.data()[j * c + cc] as f64).sum();
            out.data_mut()[i * c + cc] += (gamma.gamma[i] as f64 * read) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_response() {
        // Q K^T = [[1, 3], [2, 0]]
        let q = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let k = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        assert_eq!(ttab_gamma(&q, &k, &[1]).unwrap().gamma, vec![1.0, 0.0]);
        assert!(ttab_gamma(&q, &k, &[]).unwrap().is_zero());
        assert!(ttab_gamma(&q, &k, &[2]).is_err());
    }

    #[test]
    fn constant_scores_give_zero_map() {
        let scores = vec![0.5f32; 12];
        assert!(gamma_from_scores(&scores, 3, &[0, 2]).is_zero());
    }

    #[test]
    fn single_key_boost_adds_scaled_value() {
        let z = Tensor::zeros(&[1, 4]);
        let q = Tensor::new(&[1, 2], vec![0.3, -1.0]).unwrap();
        let k = Tensor::new(&[1, 2], vec![2.0, 5.0]).unwrap();
        let v = Tensor::ones(&[1, 4]);
        let out = ttab_attention(&z, &q, &k, &v, &SpatialResponse { gamma: vec![0.5] }).unwrap();
        assert!(out.data().iter().all(|&x| (x - 0.5).abs() < 1e-7));
        let same = ttab_attention(&v, &q, &k, &v, &SpatialResponse::zeros(1)).unwrap();
        assert_eq!(same, v);
    }

    #[test]
    fn unit_gamma_doubles_the_readout() {
        let q = Tensor::new(&[2, 2], vec![0.2, 0.4, -0.5, 1.0]).unwrap();
        let k = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.5, 0.5, -1.0, 2.0]).unwrap();
        let v = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let z = Tensor::zeros(&[2, 2]);
        let once = ttab_attention(&z, &q, &k, &v, &SpatialResponse { gamma: vec![1.0, 1.0] }).unwrap();
        let twice = ttab_attention(&once, &q, &k, &v, &SpatialResponse { gamma: vec![1.0, 1.0] }).unwrap();
        assert!(twice.max_abs_diff(&once.scale(2.0)).unwrap() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn response_stays_in_unit_range(scores in proptest::collection::vec(-50.0f32..50.0, 21), pick in 0usize..7) {
            let g = gamma_from_scores(&scores, 7, &[pick, (pick + 1) % 7]);
            proptest::prop_assert!(g.gamma.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
