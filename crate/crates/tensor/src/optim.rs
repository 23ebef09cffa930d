use std::collections::HashMap;
use std::sync::Arc;

use crate::graph::Gradients;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

/// Decoupled-weight-decay Adam over the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = &self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = grads.global_norm() as f32;
                if n > max { max / n } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut names: Vec<&String> = grads.params().map(|(n, _)| n).collect();
        names.sort();
        for name in names {
            let g = grads.param(name).expect("listed gradient");
            let Some(p) = store.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let w = Arc::make_mut(&mut p.value).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
    }

    /// Flattened optimizer state, for checkpointing.
    pub fn state(&self) -> (u64, Vec<(String, Vec<f32>, Vec<f32>)>) {
        let mut out: Vec<_> =
            self.moments.iter().map(|(k, (m, v))| (k.clone(), m.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        (self.step, out)
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(String, Vec<f32>, Vec<f32>)>) {
        self.step = step;
        self.moments = moments.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, clip_norm: None, ..Default::default() });
        for _ in 0..300 {
            let grads = {
                let g = Graph::new(&store);
                let loss = g.param("x").sqr().sum();
                g.backward(loss)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.tensor("x").unwrap().norm() < 1e-2);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::ones(&[1]));
        store.insert("b.w", Tensor::ones(&[1]));
        store.set_trainable("b.", false);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = {
            let g = Graph::new(&store);
            let loss = g.param("a.w").mul(g.param("b.w")).sum();
            g.backward(loss)
        };
        assert!(grads.param("b.w").is_none());
        opt.step(&mut store, &grads);
        assert_eq!(store.tensor("b.w").unwrap().data(), &[1.0]);
        assert!(store.tensor("a.w").unwrap().data()[0] < 1.0);
    }
}
