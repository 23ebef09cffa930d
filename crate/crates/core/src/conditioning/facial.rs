//! Age-suppressed facial tokens: organ-weighted patch tokens through a small
//! token mixer, averaged over the valid references.

use rand::Rng;
use timeweaver_tensor::nn::{Init, Linear};
use timeweaver_tensor::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::TokenBlock;

use super::patches::{patch_weights, patchify, pool_mask};
use super::refs::ReferenceSet;

/// `[p*p, d_v]` token features averaged over `n_refs_used` references.
#[derive(Clone, Debug, PartialEq)]
pub struct FacialTokens {
    pub tokens: Tensor,
    pub n_refs_used: usize,
}

#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub proj: Linear,
    pub pos: String,
    pub blocks: Vec<TokenBlock>,
    pub grid: usize,
    pub patch_dim: usize,
    pub d_v: usize,
}

/// Encoder inputs for a batch of reference sets, flattened over references.
#[derive(Clone, Debug)]
pub struct FacialBatch {
    /// `[R, p*p, patch_dim]`
    pub patches: Tensor,
    /// `[R, p*p]` patch weights
    pub weights: Tensor,
    /// `[B, R]`, row `b` averages the references of set `b`
    pub average: Tensor,
    pub n_refs: Vec<usize>,
}

impl PatchEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        grid: usize,
        patch_dim: usize,
        d_v: usize,
        n_blocks: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), patch_dim, d_v, true, Init::FanIn(1.0), rng);
        let pos = store.insert(&format!("{name}.pos"), Tensor::randn(&[grid * grid, d_v], 0.1, rng));
        let blocks = (0..n_blocks).map(|i| TokenBlock::new(store, &format!("{name}.block{i}"), d_v, rng)).collect();
        Self { proj, pos, blocks, grid, patch_dim, d_v }
    }

    /// Patchifies and weights every valid reference of every set.
    pub fn prepare(&self, sets: &[&ReferenceSet], beta: f64) -> Result<FacialBatch> {
        let p = self.grid;
        let mut patches = Vec::new();
        let mut weights = Vec::new();
        let mut n_refs = Vec::with_capacity(sets.len());
        for set in sets {
            let valid = set.require_valid()?;
            for e in &valid {
                let t = patchify(&e.image, p)?;
                if t.shape()[1] != self.patch_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "patch dim {} but encoder expects {}",
                        t.shape()[1],
                        self.patch_dim
                    )));
                }
                patches.push(t);
                let w = patch_weights(&pool_mask(&e.organ_mask, p)?, beta)?;
                weights.extend(w.weights.iter().map(|&v| v as f32));
            }
            n_refs.push(valid.len());
        }
        let r = patches.len();
        let mut average = Tensor::zeros(&[sets.len(), r]);
        let mut col = 0;
        for (b, &n) in n_refs.iter().enumerate() {
            for _ in 0..n {
                average.data_mut()[b * r + col] = 1.0 / n as f32;
                col += 1;
            }
        }
        Ok(FacialBatch {
            patches: Tensor::stack(&patches)?,
            weights: Tensor::new(&[r, p * p], weights)?,
            average,
            n_refs,
        })
    }

    /// Penultimate-layer tokens averaged per set: `[B, p*p, d_v]`.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, batch: &FacialBatch) -> Var<'g> {
        let r = batch.patches.shape()[0];
        let pp = self.grid * self.grid;
        let x = self.proj.forward(g, g.constant(batch.patches.clone()));
        let x = x.reshape(&[r, pp * self.d_v]).add_bias(g.param(&self.pos).reshape(&[pp * self.d_v]));
        let mut x = x.reshape(&[r, pp, self.d_v]).mul_prefix(g.constant(batch.weights.clone()));
        for block in &self.blocks[..self.blocks.len().saturating_sub(1)] {
            x = block.forward(g, x);
        }
        let b = batch.average.shape()[0];
        g.constant(batch.average.clone()).matmul(x.reshape(&[r, pp * self.d_v])).reshape(&[b, pp, self.d_v])
    }
}

/// `f_facial` for one reference set.
pub fn encode_facial(
    encoder: &PatchEncoder,
    store: &ParamStore,
    refs: &ReferenceSet,
    beta: f64,
) -> Result<FacialTokens> {
    let batch = encoder.prepare(&[refs], beta)?;
    let g = Graph::no_grad(store);
    let t = encoder.forward(&g, &batch).value();
    Ok(FacialTokens {
        tokens: t.as_ref().clone().reshape(&[encoder.grid * encoder.grid, encoder.d_v])?,
        n_refs_used: batch.n_refs[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::refs::ReferenceEntry;
    use crate::image::{BinaryMask, ImageTensor};
    use crate::seed;

    fn encoder() -> (PatchEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(5);
        let enc = PatchEncoder::new(&mut store, "pe", 4, 16 * 3, 8, 2, &mut rng);
        (enc, store)
    }

    fn entry(k: u64, valid: bool) -> ReferenceEntry {
        let mut rng = seed::rng(k);
        let img = ImageTensor::new(16, 16, 3, (0..768).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let mut mask = BinaryMask::empty(16, 16);
        mask.set((k as usize * 3) % 16, (k as usize * 5) % 16, true);
        ReferenceEntry { image: img, organ_mask: mask, valid }
    }

    fn tokens(set: &ReferenceSet, beta: f64) -> FacialTokens {
        let (enc, store) = encoder();
        encode_facial(&enc, &store, set, beta).unwrap()
    }

    #[test]
    fn order_discard_and_beta_behaviour() {
        let a = ReferenceSet::new(vec![entry(1, true), entry(2, true), entry(3, true)]).unwrap();
        let b = ReferenceSet::new(vec![entry(3, true), entry(1, true), entry(2, true)]).unwrap();
        let ta = tokens(&a, 1.0);
        assert_eq!(ta.n_refs_used, 3);
        assert_eq!(ta.tokens.shape(), &[16, 8]);
        assert!(ta.tokens.max_abs_diff(&tokens(&b, 1.0).tokens).unwrap() < 1e-5);

        let flagged = ReferenceSet::new(vec![entry(1, true), entry(2, false), entry(3, true)]).unwrap();
        let removed = ReferenceSet::new(vec![entry(1, true), entry(3, true)]).unwrap();
        assert_eq!(tokens(&flagged, 1.0), tokens(&removed, 1.0));

        let single = ReferenceSet::new(vec![entry(4, true)]).unwrap();
        assert!(tokens(&single, 0.0).tokens.max_abs_diff(&tokens(&single, 1.0).tokens).unwrap() > 0.0);

        let none = ReferenceSet::new(vec![entry(1, false)]).unwrap();
        let (enc, store) = encoder();
        assert!(matches!(encode_facial(&enc, &store, &none, 1.0), Err(Error::NoValidReference)));
    }

    #[test]
    fn batched_sets_match_individual_encoding() {
        let (enc, store) = encoder();
        let s1 = ReferenceSet::new(vec![entry(1, true), entry(2, true)]).unwrap();
        let s2 = ReferenceSet::new(vec![entry(7, true)]).unwrap();
        let batch = enc.prepare(&[&s1, &s2], 1.0).unwrap();
        let g = Graph::no_grad(&store);
        let out = enc.forward(&g, &batch).value();
        let t2 = encode_facial(&enc, &store, &s2, 1.0).unwrap().tokens;
        assert!(out.index_first(1).unwrap().reshape(&[16, 8]).unwrap().max_abs_diff(&t2).unwrap() < 1e-5);
    }
}
