//! Building blocks shared by the encoders, the fusion module and the denoiser.

use rand::Rng;
use timeweaver_tensor::nn::{attention, Init, LayerNorm, Linear};
use timeweaver_tensor::{Graph, ParamStore, Tensor, Var};

/// Row-wise L2 normalization of `[R, d]`.
pub fn l2_normalize_rows(x: Var<'_>) -> Var<'_> {
    let d = x.shape()[1] as f32;
    let inv = x.sqr().mean_trailing(1).scale(d).add_scalar(1e-12).sqrt().recip();
    x.mul_prefix(inv)
}

/// Single-head attention with separate query and context projections.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_context: usize,
        d_attn: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_query, d_attn, false, Init::FanIn(1.0), rng),
            k: Linear::new(store, &format!("{name}.k"), d_context, d_attn, false, Init::FanIn(1.0), rng),
            v: Linear::new(store, &format!("{name}.v"), d_context, d_attn, false, Init::FanIn(1.0), rng),
            o: Linear::new(store, &format!("{name}.o"), d_attn, d_query, true, out_init, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>, ctx: Var<'g>) -> Var<'g> {
        let (read, _) = attention(self.q.forward(g, x), self.k.forward(g, ctx), self.v.forward(g, ctx));
        self.o.forward(g, read)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, Init::FanIn(1.0), rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, Init::FanIn(0.5), rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        self.fc2.forward(g, self.fc1.forward(g, x).silu())
    }
}

/// Pre-norm token mixer: self-attention then MLP, both residual.
#[derive(Clone, Debug)]
pub struct TokenBlock {
    pub ln1: LayerNorm,
    pub attn: CrossAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TokenBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: CrossAttention::new(store, &format!("{name}.attn"), dim, dim, dim, Init::FanIn(0.5), rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 2 * dim, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.ln1.forward(g, x);
        let x = x.add(self.attn.forward(g, h, h));
        x.add(self.mlp.forward(g, self.ln2.forward(g, x)))
    }
}

/// `[N, C, H, W]` rasters in [0, 1] as a batch tensor.
pub fn image_batch(images: &[&crate::ImageTensor]) -> Tensor {
    let chw: Vec<Tensor> = images.iter().map(|i| i.to_chw()).collect();
    Tensor::stack(&chw).expect("images share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_rows_have_unit_norm() {
        let g = Graph::detached(false);
        let x = g.constant(Tensor::new(&[2, 3], vec![3.0, 4.0, 0.0, -1.0, 2.0, 2.0]).unwrap());
        let y = l2_normalize_rows(x).value();
        for row in y.data().chunks(3) {
            let n: f32 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!((y.data()[0] - 0.6).abs() < 1e-6);
    }
}
