//! Toy face-recognition embedder trained with an additive-margin cosine loss.

use rand::Rng;
use serde::{Deserialize, Serialize};
use timeweaver_tensor::nn::{Conv2d, GroupNorm, Init, Linear};
use timeweaver_tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::layers::{image_batch, l2_normalize_rows};
use crate::seed;
use crate::synthlab::Dataset;

/// Unit-norm identity vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding {
    pub vector: Vec<f32>,
}

impl IdentityEmbedding {
    /// Normalizes `v` to unit length; an all-zero vector is rejected.
    pub fn from_unnormalized(v: &[f64]) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::NonFinite("cannot normalize a zero or non-finite embedding".into()));
        }
        Ok(Self { vector: v.iter().map(|x| (x / n) as f32).collect() })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(&a, &b)| a as f64 * b as f64).sum();
        (dot / (self.norm() * other.norm())).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug)]
struct IdNet {
    c1: Conv2d,
    n1: GroupNorm,
    c2: Conv2d,
    n2: GroupNorm,
    c3: Conv2d,
    n3: GroupNorm,
    fc: Linear,
}

#[derive(Clone, Debug)]
pub struct IdentityEncoder {
    store: ParamStore,
    net: IdNet,
    dim: usize,
    trained_steps: u64,
}

impl IdentityEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, "identity-encoder/init");
        let mut store = ParamStore::new();
        let s = &mut store;
        let net = IdNet {
            c1: Conv2d::new(s, "c1", 3, 16, 3, 1, Init::FanIn(1.4), &mut rng),
            n1: GroupNorm::new(s, "n1", 16, 4),
            c2: Conv2d::new(s, "c2", 16, 32, 3, 1, Init::FanIn(1.4), &mut rng),
            n2: GroupNorm::new(s, "n2", 32, 8),
            c3: Conv2d::new(s, "c3", 32, 64, 3, 1, Init::FanIn(1.4), &mut rng),
            n3: GroupNorm::new(s, "n3", 64, 8),
            fc: Linear::new(s, "fc", 64 * 16, dim, true, Init::FanIn(1.0), &mut rng),
        };
        Self { store, net, dim, trained_steps: 0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `[N, 3, 32, 32]` images in [0, 1] to unit-norm rows `[N, dim]`.
    fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        let n = &self.net;
        let h = x.affine(2.0, -1.0);
        let h = n.n1.forward(g, n.c1.forward(g, h)).silu().avg_pool2x();
        let h = n.n2.forward(g, n.c2.forward(g, h)).silu().avg_pool2x();
        let h = n.n3.forward(g, n.c3.forward(g, h)).silu().avg_pool2x();
        let b = h.shape()[0];
        l2_normalize_rows(n.fc.forward(g, h.reshape(&[b, 64 * 16])))
    }

    /// Embeds without the trained-weights check; used to measure untrained baselines.
    pub fn embed_batch_unchecked(&self, images: &[&ImageTensor]) -> Vec<IdentityEmbedding> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let g = Graph::no_grad(&self.store);
            let e = self.forward(&g, g.constant(image_batch(chunk))).value();
            out.extend(e.data().chunks(self.dim).map(|r| IdentityEmbedding { vector: r.to_vec() }));
        }
        out
    }

    pub fn embed_batch(&self, images: &[&ImageTensor]) -> Result<Vec<IdentityEmbedding>> {
        self.check_trained()?;
        check_shapes(images)?;
        Ok(self.embed_batch_unchecked(images))
    }

    pub fn embed(&self, image: &ImageTensor) -> Result<IdentityEmbedding> {
        Ok(self.embed_batch(&[image])?.remove(0))
    }

    fn check_trained(&self) -> Result<()> {
        if self.is_trained() {
            Ok(())
        } else {
            Err(Error::Untrained("identity encoder".into()))
        }
    }

    pub fn add_to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.add_store(prefix, &self.store);
        ck.meta[format!("{prefix}steps")] = self.trained_steps.into();
        ck.meta[format!("{prefix}dim")] = self.dim.into();
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let dim = ck.meta[format!("{prefix}dim")]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}dim")))? as usize;
        let mut enc = Self::new(dim, 0);
        ck.load_store(prefix, &mut enc.store)?;
        enc.trained_steps = ck.meta[format!("{prefix}steps")].as_u64().unwrap_or(0);
        Ok(enc)
    }
}

pub(crate) fn check_shapes(images: &[&ImageTensor]) -> Result<()> {
    match images.iter().find(|i| i.shape() != (32, 32, 3)) {
        Some(i) => Err(Error::DimensionMismatch(format!("expected 32x32x3 images, got {:?}", i.shape()))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityTrainConfig {
    pub dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub margin: f32,
    pub scale: f32,
    pub seed: u64,
}

impl Default for IdentityTrainConfig {
    fn default() -> Self {
        Self { dim: 64, steps: 1500, batch: 32, lr: 2e-3, margin: 0.25, scale: 16.0, seed: 0 }
    }
}

pub fn train_identity_encoder(dataset: &Dataset, steps: usize, seed: u64) -> Result<IdentityEncoder> {
    train_identity_encoder_with(dataset, &IdentityTrainConfig { steps, seed, ..Default::default() })
}

/// Additive-margin softmax over identity classes: logits are
/// `scale * (cos(e, w_c) - margin * [c == label])`.
pub fn train_identity_encoder_with(dataset: &Dataset, cfg: &IdentityTrainConfig) -> Result<IdentityEncoder> {
    let groups = dataset.by_identity();
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("identity training needs at least 2 identities".into()));
    }
    let mut enc = IdentityEncoder::new(cfg.dim, cfg.seed);
    let classes = groups.len();
    let label_of: Vec<usize> = {
        let mut l = vec![0; dataset.len()];
        for (c, (_, idx)) in groups.iter().enumerate() {
            for &i in idx {
                l[i] = c;
            }
        }
        l
    };
    let mut rng = seed::derived_rng(cfg.seed, "identity-encoder/head");
    let head_name = "head.weight";
    enc.store.insert(head_name, Tensor::randn(&[classes, cfg.dim], 1.0, &mut rng));
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..Default::default() });
    for step in 0..cfg.steps {
        let mut rng = seed::derived_rng(cfg.seed, &format!("identity-encoder/step/{step}"));
        let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..dataset.len())).collect();
        let imgs: Vec<&ImageTensor> = picks.iter().map(|&i| &dataset.samples[i].gt).collect();
        let mut onehot = Tensor::zeros(&[cfg.batch, classes]);
        for (r, &i) in picks.iter().enumerate() {
            onehot.data_mut()[r * classes + label_of[i]] = 1.0;
        }
        let grads = {
            let g = Graph::new(&enc.store);
            let e = enc.forward(&g, g.constant(image_batch(&imgs)));
            let w = l2_normalize_rows(g.param(head_name));
            let cos = e.matmul_t(w);
            let logits = cos.sub(g.constant(onehot.scale(cfg.margin))).scale(cfg.scale);
            let loss = logits.log_softmax().mul_const(&onehot).sum().scale(-1.0 / cfg.batch as f32);
            let l = loss.value().item();
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("identity loss at step {step}")));
            }
            if step % 250 == 0 {
                log::debug!("identity encoder step {step}: loss {l:.4}");
            }
            g.backward(loss)
        };
        opt.step(&mut enc.store, &grads);
    }
    // drop the classifier head; only the embedder is kept
    let mut kept = ParamStore::new();
    for (name, p) in enc.store.iter().filter(|(n, _)| !n.starts_with("head.")) {
        kept.insert(name, p.value.as_ref().clone());
    }
    enc.store = kept;
    enc.trained_steps = cfg.steps as u64;
    Ok(enc)
}

/// Mean cosine of same-identity pairs at different ages versus pairs of
/// different identities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub same_identity: f64,
    pub different_identity: f64,
    pub same_pairs: usize,
    pub different_pairs: usize,
}

impl Separation {
    pub fn gap(&self) -> f64 {
        self.same_identity - self.different_identity
    }
}

pub fn identity_separation(enc: &IdentityEncoder, dataset: &Dataset) -> Separation {
    let imgs: Vec<&ImageTensor> = dataset.samples.iter().map(|s| &s.gt).collect();
    let embs = enc.embed_batch_unchecked(&imgs);
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let (a, b) = (&dataset.samples[i], &dataset.samples[j]);
            let c = embs[i].cosine(&embs[j]);
            if a.identity_id == b.identity_id {
                if a.age_years != b.age_years {
                    same += c;
                    ns += 1;
                }
            } else {
                diff += c;
                nd += 1;
            }
        }
    }
    Separation {
        same_identity: same / ns.max(1) as f64,
        different_identity: diff / nd.max(1) as f64,
        same_pairs: ns,
        different_pairs: nd,
    }
}
