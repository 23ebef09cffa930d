//! Parameterized layers. Each layer only stores parameter names; values live
//! in a [`ParamStore`] and are looked up through the [`Graph`] at call time.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// How a weight is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f32),
    Zeros,
}

impl Init {
    fn make<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::FanIn(gain) => Tensor::randn(shape, gain / (fan_in as f32).sqrt(), rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert(&format!("{name}.weight"), init.make(&[d_in, d_out], d_in, rng));
        let bias = bias.then(|| store.insert(&format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    /// Applies to the last axis of `x`.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.matmul(g.param(&self.weight));
        match &self.bias {
            Some(b) => y.add_bias(g.param(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight =
            store.insert(&format!("{name}.weight"), init.make(&[cout, cin, k, k], cin * k * k, rng));
        let bias = store.insert(&format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(g.param(&self.weight), self.stride, self.pad).add_channel(g.param(&self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "{name}: {channels} channels, {groups} groups");
        let gamma = store.insert(&format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.insert(&format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        x.group_norm(self.groups, 1e-5)
            .mul_channel(g.param(&self.gamma))
            .add_channel(g.param(&self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.insert(&format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.insert(&format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(1e-5).mul_lastdim(g.param(&self.gamma)).add_bias(g.param(&self.beta))
    }
}

/// Scaled dot-product attention over `[N, Tq, d]` queries and `[N, Tk, d]`
/// keys/values. Returns the readout `[N, Tq, dv]` and the probabilities.
pub fn attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> (Var<'g>, Var<'g>) {
    let d = *q.shape().last().expect("attention on scalar");
    let probs = q.matmul_t(k).scale(1.0 / (d as f32).sqrt()).softmax();
    (probs.matmul(v), probs)
}

/// `[N, C, H, W]` to `[N, H*W, C]`.
pub fn to_tokens(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).transpose_last2()
}

/// `[N, H*W, C]` back to `[N, C, H, W]`.
pub fn from_tokens(x: Var<'_>, h: usize, w: usize) -> Var<'_> {
    let s = x.shape();
    x.transpose_last2().reshape(&[s[0], s[2], h, w])
}

/// Sinusoidal embedding of scalar positions, `[positions.len(), dim]`.
pub fn sinusoidal(positions: &[f32], dim: usize, max_period: f32) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f32 / half as f32).exp();
            data.push((p * freq).cos());
        }
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f32 / half as f32).exp();
            data.push((p * freq).sin());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::from_parts(vec![positions.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn token_layout_roundtrip() {
        let g = Graph::detached(false);
        let x = g.constant(Tensor::new(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap());
        let t = to_tokens(x);
        assert_eq!(t.shape(), vec![1, 4, 2]);
        assert_eq!(&t.value().data()[..4], &[0.0, 4.0, 1.0, 5.0]);
        assert_eq!(from_tokens(t, 2, 2).value().data(), x.value().data());
    }

    #[test]
    fn zero_init_linear_outputs_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, true, Init::Zeros, &mut rng);
        let g = Graph::no_grad(&store);
        let y = lin.forward(&g, g.constant(Tensor::ones(&[4, 3])));
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}
