//! ID-Fusion: learnable queries attend to the global embedding and to the
//! facial tokens, producing the identity tokens injected into the denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};
use timeweaver_tensor::nn::{Init, LayerNorm, Linear};
use timeweaver_tensor::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{CrossAttention, Mlp};

use super::facial::FacialTokens;
use super::identity::IdentityEmbedding;

/// `[n, d_c]` identity tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedIdentityTokens {
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
struct FusionLayer {
    ln_g: LayerNorm,
    global: CrossAttention,
    ln_f: LayerNorm,
    facial: CrossAttention,
    ln_m: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionShape {
    pub d_id: usize,
    pub d_v: usize,
    pub d_c: usize,
    pub n_queries: usize,
    pub dim: usize,
    pub layers: usize,
}

#[derive(Clone, Debug)]
pub struct IdFusion {
    pub shape: FusionShape,
    pub use_global: bool,
    pub use_facial: bool,
    queries: String,
    lift: Linear,
    layers: Vec<FusionLayer>,
    ln_out: LayerNorm,
    out: Linear,
}

impl IdFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, shape: FusionShape, rng: &mut R) -> Self {
        let d = shape.dim;
        let queries = store.insert(&format!("{name}.queries"), Tensor::randn(&[shape.n_queries, d], 1.0, rng));
        let lift = Linear::new(store, &format!("{name}.lift"), shape.d_id, d, true, Init::FanIn(1.0), rng);
        let layers = (0..shape.layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                FusionLayer {
                    ln_g: LayerNorm::new(store, &format!("{n}.ln_g"), d),
                    global: CrossAttention::new(store, &format!("{n}.global"), d, d, d, Init::FanIn(0.5), rng),
                    ln_f: LayerNorm::new(store, &format!("{n}.ln_f"), d),
                    facial: CrossAttention::new(store, &format!("{n}.facial"), d, shape.d_v, d, Init::FanIn(0.5), rng),
                    ln_m: LayerNorm::new(store, &format!("{n}.ln_m"), d),
                    ffn: Mlp::new(store, &format!("{n}.ffn"), d, 2 * d, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), d);
        let out = Linear::new(store, &format!("{name}.out"), d, shape.d_c, true, Init::FanIn(1.0), rng);
        Self { shape, use_global: true, use_facial: true, queries, lift, layers, ln_out, out }
    }

    /// `f_global [B, d_id]`, `f_facial [B, P, d_v]`, per-sample facial keep
    /// factors (0 drops the facial block for that sample) to `[B, n, d_c]`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<'g>,
        f_global: Var<'g>,
        f_facial: Option<Var<'g>>,
        keep_facial: &[f32],
    ) -> Var<'g> {
        let b = f_global.shape()[0];
        let mut x = g.param(&self.queries).repeat_batch(b);
        let ctx_g = self.lift.forward(g, f_global.reshape(&[b, 1, self.shape.d_id]));
        let facial = f_facial.filter(|_| self.use_facial && keep_facial.iter().any(|&k| k != 0.0));
        for layer in &self.layers {
            if self.use_global {
                x = x.add(layer.global.forward(g, layer.ln_g.forward(g, x), ctx_g));
            }
            if let Some(f) = facial {
                let read = layer.facial.forward(g, layer.ln_f.forward(g, x), f);
                x = x.add(read.scale_batch(keep_facial));
            }
            x = x.add(layer.ffn.forward(g, layer.ln_m.forward(g, x)));
        }
        self.out.forward(g, self.ln_out.forward(g, x))
    }
}

/// Fuses one reference set's global embedding and facial tokens.
pub fn id_fusion(
    fusion: &IdFusion,
    store: &ParamStore,
    f_global: &IdentityEmbedding,
    f_facial: &FacialTokens,
    drop_facial: bool,
) -> Result<FusedIdentityTokens> {
    let s = fusion.shape;
    if f_global.dim() != s.d_id || f_facial.tokens.dims() != 2 || f_facial.tokens.shape()[1] != s.d_v {
        return Err(Error::DimensionMismatch(format!(
            "fusion expects d_id={} and d_v={}, got {} and {:?}",
            s.d_id,
            s.d_v,
            f_global.dim(),
            f_facial.tokens.shape()
        )));
    }
    let g = Graph::no_grad(store);
    let fg = g.constant(Tensor::new(&[1, s.d_id], f_global.vector.clone())?);
    let p = f_facial.tokens.shape()[0];
    let ff = (!drop_facial).then(|| g.constant(f_facial.tokens.clone().reshape(&[1, p, s.d_v]).expect("2-D tokens")));
    let out = fusion.forward(&g, fg, ff, &[1.0]).value();
    let tokens = out.as_ref().clone().reshape(&[s.n_queries, s.d_c])?;
    if !tokens.all_finite() {
        return Err(Error::NonFinite("fused identity tokens".into()));
    }
    Ok(FusedIdentityTokens { tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn setup() -> (IdFusion, ParamStore) {
        let mut store = ParamStore::new();
        let shape = FusionShape { d_id: 16, d_v: 8, d_c: 64, n_queries: 8, dim: 32, layers: 2 };
        let f = IdFusion::new(&mut store, "fuse", shape, &mut seed::rng(9));
        (f, store)
    }

    fn inputs(k: u64) -> (IdentityEmbedding, FacialTokens) {
        let mut rng = seed::rng(k);
        let g: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let t = Tensor::randn(&[16, 8], 1.0, &mut rng);
        (IdentityEmbedding::from_unnormalized(&g).unwrap(), FacialTokens { tokens: t, n_refs_used: 1 })
    }

    #[test]
    fn shape_determinism_and_drop() {
        let (f, store) = setup();
        let (g, a) = inputs(1);
        let (_, b) = inputs(2);
        let out = id_fusion(&f, &store, &g, &a, false).unwrap();
        assert_eq!(out.tokens.shape(), &[8, 64]);
        assert_eq!(out, id_fusion(&f, &store, &g, &a, false).unwrap());
        assert_ne!(out, id_fusion(&f, &store, &g, &b, false).unwrap());
        assert_eq!(id_fusion(&f, &store, &g, &a, true).unwrap(), id_fusion(&f, &store, &g, &b, true).unwrap());
    }

    #[test]
    fn dropped_samples_have_zero_facial_gradient() {
        let (f, store) = setup();
        let g = Graph::new(&store);
        let mut rng = seed::rng(3);
        let fg = g.constant(Tensor::randn(&[2, 16], 1.0, &mut rng));
        let ff = g.leaf(Tensor::randn(&[2, 16, 8], 1.0, &mut rng), true);
        let out = f.forward(&g, fg, Some(ff), &[0.0, 1.0]);
        let grads = g.backward(out.sqr().sum());
        let gf = grads.get(ff).unwrap();
        assert!(gf.data()[..128].iter().all(|&v| v == 0.0));
        assert!(gf.data()[128..].iter().any(|&v| v != 0.0));
    }
}
