//! Age-controlled DDIM sampling with latent guidance and attention boost.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use timeweaver_tensor::{Graph, Tensor};

use crate::conditioning::ReferenceSet;
use crate::config::GuidanceDefaults;
use crate::diffusion::{NoiseSchedule, Prompt, RestorationModel, TtabHook, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::image::{from_batch, ImageTensor};
use crate::layers::image_batch;
use crate::seed;

use super::ttab::SpatialResponse;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub tau: Option<u32>,
    pub n_opt: usize,
    pub eta: f32,
    pub ttab_enabled: bool,
    pub aagg_enabled: bool,
    pub sampler_steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::from_defaults(&GuidanceDefaults::default(), None)
    }
}

impl GuidanceConfig {
    pub fn from_defaults(d: &GuidanceDefaults, tau: Option<u32>) -> Self {
        Self { tau, n_opt: d.n_opt, eta: d.eta, ttab_enabled: d.ttab, aagg_enabled: d.aagg, sampler_steps: d.sampler_steps }
    }

    /// Every guidance path off: plain conditional sampling.
    pub fn unguided(sampler_steps: usize) -> Self {
        Self { tau: None, n_opt: 0, eta: 0.0, ttab_enabled: false, aagg_enabled: false, sampler_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.sampler_steps == 0 {
            return Err(Error::InvalidArgument("sampler_steps must be >= 1".into()));
        }
        Prompt::new(self.tau).map(|_| ())
    }
}

/// `eps(c') - eps(c)`, treated as a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeGradient {
    pub delta_eps: Tensor,
}

impl AgeGradient {
    /// L2 norm per batch sample.
    pub fn norms(&self) -> Vec<f64> {
        let b = self.delta_eps.shape()[0];
        let inner = self.delta_eps.numel() / b;
        self.delta_eps
            .data()
            .chunks(inner)
            .map(|c| c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

/// Inputs held fixed across a sampling run.
#[derive(Clone, Debug)]
pub struct SamplerInputs {
    /// `[B, 3, 32, 32]` degraded images in [0, 1]
    pub lq: Tensor,
    /// `[B, n, d_c]` identity tokens
    pub f_id: Option<Tensor>,
    /// generic (source) prompts
    pub c: Vec<Prompt>,
    /// target prompts
    pub c_prime: Vec<Prompt>,
}

type Trace<'a> = Option<&'a RefCell<Vec<SpatialResponse>>>;

fn predict(
    model: &RestorationModel,
    z: &Tensor,
    t: usize,
    inputs: &SamplerInputs,
    prompts: &[Prompt],
    ttab: bool,
    trace: Trace<'_>,
) -> Result<Tensor> {
    let ts = vec![t; prompts.len()];
    if ttab {
        let s_age: Vec<Vec<usize>> = prompts.iter().map(|p| p.age_token_indices.clone()).collect();
        let hook = TtabHook { s_age: &s_age, trace };
        model.denoise(z, &ts, &inputs.lq, inputs.f_id.as_ref(), prompts, Some(&hook))
    } else {
        model.denoise(z, &ts, &inputs.lq, inputs.f_id.as_ref(), prompts, None)
    }
}

/// `eps(z, c', ttab) - eps(z, c, no ttab)`.
pub fn age_gradient(
    model: &RestorationModel,
    z_t: &Tensor,
    t: usize,
    inputs: &SamplerInputs,
    ttab: bool,
) -> Result<AgeGradient> {
    age_gradient_traced(model, z_t, t, inputs, ttab, None)
}

fn age_gradient_traced(
    model: &RestorationModel,
    z_t: &Tensor,
    t: usize,
    inputs: &SamplerInputs,
    ttab: bool,
    trace: Trace<'_>,
) -> Result<AgeGradient> {
    let src = predict(model, z_t, t, inputs, &inputs.c, false, None)?;
    let dst = predict(model, z_t, t, inputs, &inputs.c_prime, ttab, trace)?;
    Ok(AgeGradient { delta_eps: dst.sub(&src)? })
}

/// Closed-form gradient of `mean(delta * z)` with respect to `z`.
pub fn aagg_gradient(delta: &AgeGradient) -> Tensor {
    let n = delta.delta_eps.numel() as f64;
    delta.delta_eps.map(|d| (d as f64 / n) as f32)
}

/// `z - eta * sqrt(alpha_bar_t) * delta / numel(z)`: one gradient step on
/// `mean(delta * z)`.
pub fn aagg_update(z_t: &Tensor, delta: &AgeGradient, alpha_t: f64, eta: f32) -> Result<Tensor> {
    aagg_update_chunked(z_t, delta, alpha_t, eta, 1)
}

/// The same update applied to each of `chunks` equal slices (batch samples)
/// with `numel` counted per slice.
fn aagg_update_chunked(z_t: &Tensor, delta: &AgeGradient, alpha_t: f64, eta: f32, chunks: usize) -> Result<Tensor> {
    if z_t.shape() != delta.delta_eps.shape() {
        return Err(Error::DimensionMismatch(format!("latent {:?} vs gradient {:?}", z_t.shape(), delta.delta_eps.shape())));
    }
    let k = eta as f64 * alpha_t.sqrt() / (z_t.numel() / chunks.max(1)) as f64;
    Ok(z_t.zip_map(&delta.delta_eps, |z, d| (z as f64 - k * d as f64) as f32)?)
}

fn check_step(t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<()> {
    if t_prev >= t || t > sched.timesteps() {
        return Err(Error::InvalidArgument(format!("ddim step {t} -> {t_prev} outside 0..={}", sched.timesteps())));
    }
    Ok(())
}

/// Deterministic DDIM step `t -> t_prev` including the direction term.
pub fn ddim_step(z_t: &Tensor, t: usize, t_prev: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_step(t, t_prev, sched)?;
    let (a, ap) = (sched.alpha_bar[t], sched.alpha_bar[t_prev]);
    Ok(z_t.zip_map(eps_hat, |z, e| {
        let x0 = (z as f64 - (1.0 - a).sqrt() * e as f64) / a.sqrt();
        (ap.sqrt() * x0 + (1.0 - ap).sqrt() * e as f64) as f32
    })?)
}

/// DDIM step with the clean estimate clipped to `[-1, 1]` and the noise
/// re-derived from the clipped estimate.
pub fn ddim_step_clipped(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_step(t, t_prev, sched)?;
    let (a, ap) = (sched.alpha_bar[t], sched.alpha_bar[t_prev]);
    Ok(z_t.zip_map(eps_hat, |z, e| {
        let x0 = ((z as f64 - (1.0 - a).sqrt() * e as f64) / a.sqrt()).clamp(-1.0, 1.0);
        let e = (z as f64 - a.sqrt() * x0) / (1.0 - a).sqrt();
        (ap.sqrt() * x0 + (1.0 - ap).sqrt() * e) as f32
    })?)
}

/// Evenly spaced descending timesteps from `T` to 0.
pub fn sampler_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t_max);
    let mut ts: Vec<usize> = (0..=steps).map(|i| ((t_max * (steps - i)) as f64 / steps as f64).round() as usize).collect();
    ts.dedup();
    ts
}

/// Seeded `z_T` for each sample.
pub fn initial_noise(seeds: &[u64]) -> Tensor {
    let per = 3 * IMAGE_SIDE * IMAGE_SIDE;
    let mut data = Vec::with_capacity(seeds.len() * per);
    for &s in seeds {
        let mut rng = seed::derived_rng(s, "restore/noise");
        data.extend((0..per).map(|_| rng.sample::<f32, _>(StandardNormal)));
    }
    Tensor::new(&[seeds.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data).expect("noise shape")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub t_prev: usize,
    /// Per inner iteration, per sample.
    pub delta_eps_norms: Vec<Vec<f64>>,
    pub gamma_maps: usize,
    pub gamma_min: Option<f32>,
    pub gamma_max: Option<f32>,
    pub gamma_mean: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrace {
    pub steps: Vec<StepTrace>,
    /// Every intermediate latent when requested.
    #[serde(skip)]
    pub latents: Vec<Tensor>,
}

impl SamplerTrace {
    pub fn gamma_in_unit_range(&self) -> bool {
        self.steps.iter().all(|s| s.gamma_min.map_or(true, |m| m >= 0.0) && s.gamma_max.map_or(true, |m| m <= 1.0))
    }

    pub fn gamma_maps(&self) -> usize {
        self.steps.iter().map(|s| s.gamma_maps).sum()
    }
}

fn summarize(step: &mut StepTrace, maps: &[SpatialResponse]) {
    step.gamma_maps = maps.len();
    if maps.is_empty() {
        return;
    }
    step.gamma_min = Some(maps.iter().map(|m| m.min()).fold(f32::INFINITY, f32::min));
    step.gamma_max = Some(maps.iter().map(|m| m.max()).fold(f32::NEG_INFINITY, f32::max));
    step.gamma_mean = Some(maps.iter().map(|m| m.mean()).sum::<f64>() / maps.len() as f64);
}

/// The guided sampler over explicit prompt pairs. Each step runs `n_opt`
/// latent updates along `eps(c') - eps(c)` (when enabled), then a DDIM step
/// driven by `eps(c')`.
pub fn sample(
    model: &RestorationModel,
    inputs: &SamplerInputs,
    cfg: &GuidanceConfig,
    seeds: &[u64],
    keep_latents: bool,
) -> Result<(Tensor, SamplerTrace)> {
    cfg.validate()?;
    let b = seeds.len();
    if inputs.lq.shape()[0] != b || inputs.c.len() != b || inputs.c_prime.len() != b {
        return Err(Error::DimensionMismatch(format!("{b} seeds for a batch of {}", inputs.lq.shape()[0])));
    }
    let sched = &model.schedule;
    let mut z = initial_noise(seeds);
    let mut trace = SamplerTrace::default();
    let ts = sampler_timesteps(sched.timesteps(), cfg.sampler_steps);
    for w in ts.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let maps = RefCell::new(Vec::new());
        let mut step = StepTrace { t, t_prev, ..Default::default() };
        if cfg.aagg_enabled {
            for _ in 0..cfg.n_opt {
                let delta = age_gradient_traced(model, &z, t, inputs, cfg.ttab_enabled, Some(&maps))?;
                step.delta_eps_norms.push(delta.norms());
                z = aagg_update_chunked(&z, &delta, sched.alpha_bar[t], cfg.eta, b)?;
            }
        }
        let eps = predict(model, &z, t, inputs, &inputs.c_prime, cfg.ttab_enabled, Some(&maps))?;
        z = ddim_step_clipped(&z, t, t_prev, &eps, sched)?;
        summarize(&mut step, &maps.borrow());
        trace.steps.push(step);
        if keep_latents {
            trace.latents.push(z.clone());
        }
    }
    Ok((z, trace))
}

/// Unguided conditional DDIM with one prompt per sample.
pub fn plain_ddim(
    model: &RestorationModel,
    lq: &Tensor,
    f_id: Option<&Tensor>,
    prompts: &[Prompt],
    sampler_steps: usize,
    seeds: &[u64],
) -> Result<Tensor> {
    let sched = &model.schedule;
    let mut z = initial_noise(seeds);
    let ts = sampler_timesteps(sched.timesteps(), sampler_steps);
    for w in ts.windows(2) {
        let t = vec![w[0]; seeds.len()];
        let eps = model.denoise(&z, &t, lq, f_id, prompts, None)?;
        z = ddim_step_clipped(&z, w[0], w[1], &eps, sched)?;
    }
    Ok(z)
}

/// JSON sidecar written next to restored images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreReport {
    pub config: GuidanceConfig,
    pub seeds: Vec<u64>,
    pub trace: SamplerTrace,
}

/// Identity tokens `[B, n, d_c]` for a batch of reference sets.
pub fn identity_tokens(model: &RestorationModel, refs: &[&ReferenceSet]) -> Result<Tensor> {
    let inputs = model.identity_inputs(refs)?;
    let g = Graph::no_grad(&model.store);
    let keep = vec![1.0; refs.len()];
    Ok(model.identity_tokens(&g, &inputs, &keep).value().as_ref().clone())
}

/// Restores a batch; sample `i` uses `refs[i]` and `seeds[i]`.
pub fn restore_batch(
    model: &RestorationModel,
    lqs: &[&ImageTensor],
    refs: &[&ReferenceSet],
    cfg: &GuidanceConfig,
    seeds: &[u64],
) -> Result<(Vec<ImageTensor>, RestoreReport)> {
    restore_batch_targets(model, lqs, refs, &vec![cfg.tau; lqs.len()], cfg, seeds)
}

/// Like [`restore_batch`] with a target age per sample; `cfg.tau` is ignored.
/// Samples without a target get `c' = c`, so guidance leaves them untouched.
pub fn restore_batch_targets(
    model: &RestorationModel,
    lqs: &[&ImageTensor],
    refs: &[&ReferenceSet],
    taus: &[Option<u32>],
    cfg: &GuidanceConfig,
    seeds: &[u64],
) -> Result<(Vec<ImageTensor>, RestoreReport)> {
    if !model.is_trained() {
        return Err(Error::Untrained("restoration model".into()));
    }
    if lqs.len() != refs.len() || lqs.len() != seeds.len() || lqs.len() != taus.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs, {} reference sets, {} targets, {} seeds",
            lqs.len(),
            refs.len(),
            taus.len(),
            seeds.len()
        )));
    }
    if let Some(bad) = lqs.iter().find(|i| i.shape() != (IMAGE_SIDE, IMAGE_SIDE, 3)) {
        return Err(Error::DimensionMismatch(format!("expected 32x32x3 input, got {:?}", bad.shape())));
    }
    cfg.validate()?;
    let c_prime = taus.iter().map(|&t| Prompt::new(t)).collect::<Result<Vec<_>>>()?;
    let inputs = SamplerInputs {
        lq: image_batch(lqs),
        f_id: Some(identity_tokens(model, refs)?),
        c: vec![Prompt::generic(); lqs.len()],
        c_prime,
    };
    let mut run = cfg.clone();
    if taus.iter().all(Option::is_none) {
        run.aagg_enabled = false;
        run.ttab_enabled = false;
    }
    let (z, trace) = sample(model, &inputs, &run, seeds, false)?;
    let images = from_batch(&z.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))?;
    Ok((images, RestoreReport { config: cfg.clone(), seeds: seeds.to_vec(), trace }))
}

pub fn restore(
    model: &RestorationModel,
    lq: &ImageTensor,
    refs: &ReferenceSet,
    cfg: &GuidanceConfig,
    seed_root: u64,
) -> Result<ImageTensor> {
    Ok(restore_batch(model, &[lq], &[refs], cfg, &[seed_root])?.0.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{add_noise, make_schedule};

    #[test]
    fn hand_evaluated_update() {
        let z = Tensor::new(&[2, 1], vec![0.0, 0.0]).unwrap();
        let delta = AgeGradient { delta_eps: Tensor::new(&[2, 1], vec![4.0, -2.0]).unwrap() };
        let out = aagg_update(&z, &delta, 0.25, 1.0).unwrap();
        assert_eq!(out.data(), &[-1.0, 0.5]);
    }

    #[test]
    fn closed_form_matches_autodiff() {
        let mut rng = seed::rng(11);
        for _ in 0..10 {
            let z = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
            let d = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
            let g = Graph::detached(true);
            let zv = g.leaf(z.clone(), true);
            let grads = g.backward(zv.mul_const(&d).mean());
            let auto = grads.get(zv).unwrap();
            let closed = aagg_gradient(&AgeGradient { delta_eps: d });
            for (a, c) in auto.data().iter().zip(closed.data()) {
                assert!((a - c).abs() <= 1e-6 * c.abs(), "{a} vs {c}");
            }
        }
    }

    #[test]
    fn batched_update_counts_elements_per_sample() {
        let z = Tensor::zeros(&[2, 2]);
        let d = AgeGradient { delta_eps: Tensor::new(&[2, 2], vec![2.0, 2.0, 4.0, 4.0]).unwrap() };
        assert_eq!(aagg_update_chunked(&z, &d, 1.0, 1.0, 2).unwrap().data(), &[-1.0, -1.0, -2.0, -2.0]);
    }

    #[test]
    fn null_and_scaled_updates() {
        let mut rng = seed::rng(12);
        let z = Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng);
        let zero = AgeGradient { delta_eps: Tensor::zeros(&[1, 3, 2, 2]) };
        assert_eq!(aagg_update(&z, &zero, 0.5, 3.0).unwrap(), z);
        let d = AgeGradient { delta_eps: Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng) };
        assert_eq!(aagg_update(&z, &d, 0.5, 0.0).unwrap(), z);
        let n1 = aagg_update(&z, &d, 0.5, 1.0).unwrap().sub(&z).unwrap().norm();
        let n2 = aagg_update(&z, &d, 0.5, 2.0).unwrap().sub(&z).unwrap().norm();
        assert!((n2 - 2.0 * n1).abs() < 1e-6 * n2);
    }

    #[test]
    fn ddim_algebra() {
        let s = make_schedule(100).unwrap();
        let mut rng = seed::rng(13);
        let z0 = Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let eps = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let zt = add_noise(&z0, 30, &eps, &s).unwrap();
        assert!(ddim_step(&zt, 30, 0, &eps, &s).unwrap().max_abs_diff(&z0).unwrap() < 1e-5);
        assert!(ddim_step_clipped(&zt, 30, 0, &eps, &s).unwrap().max_abs_diff(&z0).unwrap() < 1e-5);
        let zero = Tensor::zeros(&[1, 3, 4, 4]);
        let next = ddim_step(&zt, 30, 25, &zero, &s).unwrap();
        let k = (s.alpha_bar[25] / s.alpha_bar[30]).sqrt() as f32;
        assert!(next.max_abs_diff(&zt.scale(k)).unwrap() < 1e-5);
        assert!(ddim_step(&zt, 30, 30, &eps, &s).is_err());
        assert!(ddim_step(&zt, 101, 0, &eps, &s).is_err());
    }

    #[test]
    fn timestep_grid() {
        let ts = sampler_timesteps(100, 20);
        assert_eq!(ts.len(), 21);
        assert_eq!((ts[0], ts[1], ts[19], ts[20]), (100, 95, 5, 0));
        assert_eq!(sampler_timesteps(100, 1), vec![100, 0]);
    }
}
