//! Toy apparent-age regressor used to score restorations.

use rand::Rng;
use timeweaver_tensor::nn::{Conv2d, GroupNorm, Init, Linear};
use timeweaver_tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::conditioning::identity::check_shapes;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::layers::image_batch;
use crate::seed;
use crate::synthlab::Dataset;

const AGE_CENTRE: f32 = 47.5;
const AGE_SCALE: f32 = 25.0;

#[derive(Clone, Debug)]
struct AgeNet {
    c1: Conv2d,
    n1: GroupNorm,
    c2: Conv2d,
    n2: GroupNorm,
    c3: Conv2d,
    n3: GroupNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct AgeEstimator {
    store: ParamStore,
    net: AgeNet,
    trained_steps: u64,
}

impl AgeEstimator {
    pub fn new(seed_root: u64) -> Self {
        let mut rng = seed::derived_rng(seed_root, "age-estimator/init");
        let mut store = ParamStore::new();
        let s = &mut store;
        let f = Init::FanIn(1.4);
        let net = AgeNet {
            c1: Conv2d::new(s, "c1", 3, 16, 3, 1, f, &mut rng),
            n1: GroupNorm::new(s, "n1", 16, 4),
            c2: Conv2d::new(s, "c2", 16, 32, 3, 1, f, &mut rng),
            n2: GroupNorm::new(s, "n2", 32, 8),
            c3: Conv2d::new(s, "c3", 32, 64, 3, 1, f, &mut rng),
            n3: GroupNorm::new(s, "n3", 64, 8),
            head: Linear::new(s, "head", 64, 1, true, Init::FanIn(0.5), &mut rng),
        };
        Self { store, net, trained_steps: 0 }
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    /// Normalized age `[N]`.
    fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Var<'g> {
        let n = &self.net;
        let h = x.affine(2.0, -1.0);
        let h = n.n1.forward(g, n.c1.forward(g, h)).silu().avg_pool2x();
        let h = n.n2.forward(g, n.c2.forward(g, h)).silu().avg_pool2x();
        let h = n.n3.forward(g, n.c3.forward(g, h)).silu();
        let b = h.shape()[0];
        let pooled = h.mean_trailing(2);
        n.head.forward(g, pooled).reshape(&[b])
    }

    pub fn predict_batch(&self, images: &[&ImageTensor]) -> Result<Vec<f64>> {
        if !self.is_trained() {
            return Err(Error::Untrained("age estimator".into()));
        }
        check_shapes(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let g = Graph::no_grad(&self.store);
            let y = self.forward(&g, g.constant(image_batch(chunk))).value();
            out.extend(y.data().iter().map(|&v| (AGE_CENTRE + AGE_SCALE * v) as f64));
        }
        Ok(out)
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<f64> {
        Ok(self.predict_batch(&[image])?[0])
    }

    /// Mean absolute error on the ground-truth renders of `dataset`.
    pub fn validation_mae(&self, dataset: &Dataset) -> Result<f64> {
        let imgs: Vec<&ImageTensor> = dataset.samples.iter().map(|s| &s.gt).collect();
        let truth: Vec<f64> = dataset.samples.iter().map(|s| s.age_years as f64).collect();
        super::metrics::mean_abs_error(&self.predict_batch(&imgs)?, &truth)
    }

    pub fn add_to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.add_store(prefix, &self.store);
        ck.meta[format!("{prefix}steps")] = self.trained_steps.into();
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut est = Self::new(0);
        ck.load_store(prefix, &mut est.store)?;
        est.trained_steps = ck.meta[format!("{prefix}steps")]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}steps")))?;
        Ok(est)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for AgeTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 32, lr: 2e-3, seed: 0 }
    }
}

/// Regresses normalized age with a squared loss on clean renders.
pub fn train_age_estimator(dataset: &Dataset, cfg: &AgeTrainConfig) -> Result<AgeEstimator> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("age estimator needs a non-empty dataset".into()));
    }
    let mut est = AgeEstimator::new(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..Default::default() });
    for step in 0..cfg.steps {
        let mut rng = seed::derived_rng(cfg.seed, &format!("age-estimator/step/{step}"));
        let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..dataset.len())).collect();
        let imgs: Vec<&ImageTensor> = picks.iter().map(|&i| &dataset.samples[i].gt).collect();
        let target: Vec<f32> =
            picks.iter().map(|&i| (dataset.samples[i].age_years as f32 - AGE_CENTRE) / AGE_SCALE).collect();
        let target = Tensor::new(&[cfg.batch], target)?;
        let grads = {
            let g = Graph::new(&est.store);
            let y = est.forward(&g, g.constant(image_batch(&imgs)));
            let loss = y.sub(g.constant(target)).sqr().mean();
            let l = loss.value().item();
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("age loss at step {step}")));
            }
            if step % 250 == 0 {
                log::debug!("age estimator step {step}: loss {l:.4}");
            }
            g.backward(loss)
        };
        opt.step(&mut est.store, &grads);
    }
    est.trained_steps = cfg.steps as u64;
    Ok(est)
}
