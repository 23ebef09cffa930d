//! Objective and two-phase training loop.
//!
//! The first `prior_frac` of the steps fit the base denoiser, text encoder and
//! control branch on age captions with no identity branch. The remaining steps
//! freeze those and fit the identity adapter under the generic prompt.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use timeweaver_tensor::{AdamW, AdamWConfig, Gradients, Graph, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::conditioning::{mean_embedding, IdentityEmbedding, IdentityEncoder, ReferenceSet};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::layers::image_batch;
use crate::seed;
use crate::synthlab::Dataset;

use super::dists::DistsLike;
use super::model::{IdentityInputs, RestorationModel};
use super::text::Prompt;

/// Prefixes frozen once the adapter phase starts.
const BASE_PREFIXES: [&str; 3] = ["unet.", "text.", "control."];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_diff: f64,
    pub l_ea_dists: f64,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prior,
    Adapter,
}

/// One optimization batch with all random draws made up front.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// `[B, 3, 32, 32]` ground truth in `[-1, 1]`
    pub z0: Tensor,
    /// `[B, 3, 32, 32]` degraded input in [0, 1]
    pub lq: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub prompts: Vec<Prompt>,
    pub identity: Option<IdentityInputs>,
    pub keep_facial: Vec<f32>,
}

/// Whether the edge-aware perceptual term is on at `step` of `total_steps`.
pub fn ea_active(step: usize, total_steps: usize, warmup_frac: f64) -> bool {
    step as f64 >= warmup_frac * total_steps as f64
}

/// Loss graph for a given noise prediction. Returns `(total, l_diff, l_ea)`.
pub fn loss_from_prediction<'g>(
    model: &RestorationModel,
    dists: &DistsLike,
    batch: &TrainBatch,
    eps_hat: Var<'g>,
    ea: bool,
    lambda: f32,
) -> (Var<'g>, Var<'g>, Option<Var<'g>>) {
    let g = eps_hat.graph();
    let l_diff = eps_hat.sub(g.constant(batch.eps.clone())).sqr().mean();
    if !ea || lambda == 0.0 {
        return (l_diff, l_diff, None);
    }
    let z_t = noised(model, batch);
    let inv: Vec<f32> = batch.t.iter().map(|&t| (1.0 / model.schedule.alpha_bar[t].sqrt()) as f32).collect();
    let coef: Vec<f32> = batch
        .t
        .iter()
        .map(|&t| {
            let a = model.schedule.alpha_bar[t];
            ((1.0 - a).sqrt() / a.sqrt()) as f32
        })
        .collect();
    let x0 = g.constant(z_t.scale_batch_const(&inv)).sub(eps_hat.scale_batch(&coef));
    let pred = x0.affine(0.5, 0.5);
    let gt = g.constant(batch.z0.map(|v| (v + 1.0) * 0.5));
    let l_ea = dists.edge_aware(pred, gt).mean();
    (l_diff.add(l_ea.scale(lambda)), l_diff, Some(l_ea))
}

trait ScaleBatchConst {
    fn scale_batch_const(&self, s: &[f32]) -> Tensor;
}

impl ScaleBatchConst for Tensor {
    fn scale_batch_const(&self, s: &[f32]) -> Tensor {
        let inner = self.numel() / s.len();
        let mut out = self.clone();
        for (chunk, &f) in out.data_mut().chunks_mut(inner).zip(s) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        out
    }
}

/// `z_t` for every sample of the batch.
fn noised(model: &RestorationModel, batch: &TrainBatch) -> Tensor {
    let inner = batch.z0.numel() / batch.t.len();
    let mut out = batch.z0.clone();
    for (i, &t) in batch.t.iter().enumerate() {
        let a = model.schedule.alpha_bar[t];
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let z = &mut out.data_mut()[i * inner..(i + 1) * inner];
        let e = &batch.eps.data()[i * inner..(i + 1) * inner];
        for (zv, &ev) in z.iter_mut().zip(e) {
            *zv = (sa * *zv as f64 + sb * ev as f64) as f32;
        }
    }
    out
}

/// Builds the full loss graph for `batch`.
pub fn loss_graph<'g>(
    model: &RestorationModel,
    dists: &DistsLike,
    g: &'g Graph<'g>,
    batch: &TrainBatch,
    ea: bool,
    lambda: f32,
) -> (Var<'g>, Var<'g>, Option<Var<'g>>) {
    let z_t = g.constant(noised(model, batch));
    let f_id = batch.identity.as_ref().map(|inp| model.identity_tokens(g, inp, &batch.keep_facial));
    let eps_hat = model.eps(g, z_t, &batch.t, g.constant(batch.lq.clone()), f_id, &batch.prompts, None);
    loss_from_prediction(model, dists, batch, eps_hat, ea, lambda)
}

fn breakdown(l_diff: &Var<'_>, l_ea: Option<&Var<'_>>, lambda: f32) -> LossBreakdown {
    let d = l_diff.value().item() as f64;
    let e = l_ea.map(|v| v.value().item() as f64).unwrap_or(0.0);
    let lambda = lambda as f64;
    LossBreakdown { l_diff: d, l_ea_dists: e, lambda, total: d + lambda * e }
}

/// Loss of `batch` at `step` of `total_steps`, without gradients.
pub fn training_loss(
    model: &RestorationModel,
    batch: &TrainBatch,
    step: usize,
    total_steps: usize,
    warmup_frac: f64,
    lambda: f32,
) -> LossBreakdown {
    let g = Graph::no_grad(&model.store);
    let dists = DistsLike::default();
    let ea = ea_active(step, total_steps, warmup_frac);
    let (_, d, e) = loss_graph(model, &dists, &g, batch, ea, lambda);
    breakdown(&d, e.as_ref(), lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub dropped: usize,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: RestorationModel,
    pub opt: AdamW,
    pub step: usize,
    pub total_steps: usize,
    pub log: Vec<StepRecord>,
    pub drop_events: u64,
    pub adapter_instances: u64,
    globals: Option<Vec<IdentityEmbedding>>,
}

impl TrainState {
    pub fn new(config: &Config, identity: IdentityEncoder, total_steps: usize, seed_root: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument("training needs at least one step".into()));
        }
        let model = RestorationModel::new(config, identity, seed_root)?;
        let opt = AdamW::new(AdamWConfig {
            lr: config.diffusion.learning_rate,
            clip_norm: Some(config.diffusion.clip_norm),
            ..Default::default()
        });
        Ok(Self { model, opt, step: 0, total_steps, log: Vec::new(), drop_events: 0, adapter_instances: 0, globals: None })
    }

    pub fn prior_steps(&self) -> usize {
        (self.model.config.diffusion.prior_frac * self.total_steps as f64).round() as usize
    }

    pub fn phase_at(&self, step: usize) -> Phase {
        if step < self.prior_steps() {
            Phase::Prior
        } else {
            Phase::Adapter
        }
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    pub fn drop_frequency(&self) -> f64 {
        self.drop_events as f64 / self.adapter_instances.max(1) as f64
    }

    /// Switches the adapter-phase settings (used to branch ablation variants
    /// off a shared prior run). Only legal before the adapter phase starts.
    pub fn set_variant(&mut self, use_global: bool, use_facial: bool, beta: f32) -> Result<()> {
        if self.step > self.prior_steps() {
            return Err(Error::InvalidArgument("variant settings are fixed once the adapter phase has started".into()));
        }
        let c = &mut self.model.config.conditioning;
        c.use_global = use_global;
        c.use_facial = use_facial;
        c.beta = beta;
        self.model.config.validate()?;
        self.model.fusion.use_global = use_global;
        self.model.fusion.use_facial = use_facial;
        Ok(())
    }

    fn set_phase_flags(&mut self, phase: Phase) {
        for p in BASE_PREFIXES {
            self.model.store.set_trainable(p, phase == Phase::Prior);
        }
    }

    fn globals(&mut self, dataset: &Dataset) -> Result<&[IdentityEmbedding]> {
        if self.globals.as_ref().map(|g| g.len()) != Some(dataset.len()) {
            let imgs: Vec<&ImageTensor> = dataset.samples.iter().map(|s| &s.gt).collect();
            self.globals = Some(self.model.identity.embed_batch(&imgs)?);
        }
        Ok(self.globals.as_deref().expect("filled above"))
    }

    /// Draws the batch for `step` from its own seeded stream.
    pub fn make_batch(&mut self, dataset: &Dataset, step: usize) -> Result<TrainBatch> {
        let cfg = self.model.config.clone();
        let phase = self.phase_at(step);
        let mut rng = seed::derived_rng(self.seed(), &format!("train/step/{step}"));
        let eligible: Vec<usize> = match phase {
            Phase::Prior => (0..dataset.len()).collect(),
            Phase::Adapter => (0..dataset.len()).filter(|&i| dataset.samples[i].reference_valid.iter().any(|&v| v)).collect(),
        };
        if eligible.is_empty() {
            return Err(Error::NoValidReference);
        }
        let bsz = cfg.diffusion.batch_size;
        let picks: Vec<usize> = (0..bsz).map(|_| eligible[rng.gen_range(0..eligible.len())]).collect();
        let gts: Vec<&ImageTensor> = picks.iter().map(|&i| &dataset.samples[i].gt).collect();
        let lqs: Vec<&ImageTensor> = picks.iter().map(|&i| &dataset.samples[i].degraded).collect();
        let z0 = image_batch(&gts).map(|v| 2.0 * v - 1.0);
        let t: Vec<usize> = (0..bsz).map(|_| rng.gen_range(1..=cfg.diffusion.timesteps)).collect();
        let eps_data: Vec<f32> = (0..z0.numel()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::new(z0.shape(), eps_data)?;
        let (prompts, identity, keep) = match phase {
            Phase::Prior => {
                let prompts = picks
                    .iter()
                    .map(|&i| {
                        if rng.gen_bool(cfg.diffusion.age_caption_prob) {
                            Prompt::aged(dataset.samples[i].age_years)
                        } else {
                            Ok(Prompt::generic())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                (prompts, None, vec![1.0; bsz])
            }
            Phase::Adapter => {
                let keep: Vec<f32> =
                    (0..bsz).map(|_| if rng.gen_bool(cfg.conditioning.drop_prob) { 0.0 } else { 1.0 }).collect();
                let sets = picks.iter().map(|&i| ReferenceSet::from_dataset(dataset, i)).collect::<Result<Vec<_>>>()?;
                let globals = self.globals(dataset)?;
                let mut fg = Vec::with_capacity(bsz * cfg.conditioning.d_id);
                for &i in &picks {
                    let s = &dataset.samples[i];
                    let embs: Vec<IdentityEmbedding> = s
                        .references
                        .iter()
                        .zip(&s.reference_valid)
                        .filter(|(_, &v)| v)
                        .map(|(&r, _)| globals[r].clone())
                        .collect();
                    fg.extend(mean_embedding(&embs)?.vector);
                }
                let refs: Vec<&ReferenceSet> = sets.iter().collect();
                let identity = IdentityInputs {
                    f_global: Tensor::new(&[bsz, cfg.conditioning.d_id], fg)?,
                    facial: self.model.patch.prepare(&refs, self.model.beta())?,
                };
                (vec![Prompt::generic(); bsz], Some(identity), keep)
            }
        };
        Ok(TrainBatch { z0, lq: image_batch(&lqs), t, eps, prompts, identity, keep_facial: keep })
    }

    /// Runs optimization steps until `until` (capped at the total).
    pub fn run(&mut self, dataset: &Dataset, until: usize) -> Result<()> {
        let until = until.min(self.total_steps);
        let dists = DistsLike::default();
        let (lambda, warmup) = (self.model.config.diffusion.lambda, self.model.config.diffusion.warmup_frac);
        while self.step < until {
            let step = self.step;
            let phase = self.phase_at(step);
            self.set_phase_flags(phase);
            let batch = self.make_batch(dataset, step)?;
            let ea = ea_active(step, self.total_steps, warmup);
            let (record, grads): (StepRecord, Gradients) = {
                let g = Graph::new(&self.model.store);
                let (total, d, e) = loss_graph(&self.model, &dists, &g, &batch, ea, lambda);
                let loss = breakdown(&d, e.as_ref(), lambda);
                if !loss.total.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at step {step}")));
                }
                let dropped = batch.keep_facial.iter().filter(|&&k| k == 0.0).count();
                (StepRecord { step, phase, loss, dropped }, g.backward(total))
            };
            self.opt.step(&mut self.model.store, &grads);
            if phase == Phase::Adapter {
                self.drop_events += record.dropped as u64;
                self.adapter_instances += batch.t.len() as u64;
            }
            if step % 100 == 0 {
                log::info!(
                    "step {step} ({:?}): l_diff {:.4}, l_ea {:.4}",
                    phase,
                    record.loss.l_diff,
                    record.loss.l_ea_dists
                );
            }
            self.log.push(record);
            self.step += 1;
            self.model.trained_steps = self.step as u64;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let (adam_step, moments) = self.opt.state();
        for (name, m, v) in moments {
            let n = m.len();
            ck.tensors.insert(format!("adam.m.{name}"), Tensor::new(&[n], m).expect("flat moment"));
            ck.tensors.insert(format!("adam.v.{name}"), Tensor::new(&[n], v).expect("flat moment"));
        }
        ck.meta["train"] = serde_json::json!({
            "step": self.step,
            "total_steps": self.total_steps,
            "adam_step": adam_step,
            "drop_events": self.drop_events,
            "adapter_instances": self.adapter_instances,
            "log": self.log,
        });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = RestorationModel::from_checkpoint(ck)?;
        let tr = &ck.meta["train"];
        let field = |k: &str| {
            tr[k].as_u64().ok_or_else(|| Error::Checkpoint(format!("missing train.{k}")))
        };
        let mut state = Self::new(&model.config, model.identity.clone(), field("total_steps")? as usize, model.seed)?;
        state.model = model;
        state.step = field("step")? as usize;
        state.drop_events = field("drop_events")?;
        state.adapter_instances = field("adapter_instances")?;
        state.log = serde_json::from_value(tr["log"].clone())?;
        let mut moments = Vec::new();
        for (key, m) in ck.tensors.range("adam.m.".to_string()..) {
            let Some(name) = key.strip_prefix("adam.m.") else { break };
            let v = ck
                .tensors
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for `{name}`")))?;
            moments.push((name.to_string(), m.data().to_vec(), v.data().to_vec()));
        }
        state.opt.restore(field("adam_step")?, moments);
        Ok(state)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains a fresh model for `steps` steps.
pub fn train(dataset: &Dataset, identity: IdentityEncoder, config: &Config, steps: usize, seed_root: u64) -> Result<TrainState> {
    let mut state = TrainState::new(config, identity, steps, seed_root)?;
    state.run(dataset, steps)?;
    Ok(state)
}
