//! The full restoration network: text encoder, denoiser with control branch,
//! patch encoder and ID-Fusion, plus the frozen identity encoder.

use timeweaver_tensor::{Graph, ParamStore, Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::conditioning::{
    aggregate_global, FacialBatch, FusedIdentityTokens, FusionShape, IdFusion, IdentityEncoder, PatchEncoder,
    ReferenceSet,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::seed;

use super::schedule::{make_schedule, NoiseSchedule};
use super::text::{Prompt, TextEncoder};
use super::unet::{Denoiser, TtabHook};

pub const IMAGE_SIDE: usize = 32;
const MODEL_PREFIX: &str = "model.";
const IDENTITY_PREFIX: &str = "idenc.";

/// Conditioning inputs for a batch, computed once per reference set.
#[derive(Clone, Debug)]
pub struct IdentityInputs {
    /// `[B, d_id]` mean identity embeddings
    pub f_global: Tensor,
    pub facial: FacialBatch,
}

#[derive(Clone, Debug)]
pub struct RestorationModel {
    pub config: Config,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub unet: Denoiser,
    pub patch: PatchEncoder,
    pub fusion: IdFusion,
    pub identity: IdentityEncoder,
    pub schedule: NoiseSchedule,
    pub trained_steps: u64,
    pub seed: u64,
}

impl RestorationModel {
    pub fn new(config: &Config, identity: IdentityEncoder, seed_root: u64) -> Result<Self> {
        config.validate()?;
        let c = &config.conditioning;
        if identity.dim() != c.d_id {
            return Err(Error::DimensionMismatch(format!(
                "identity encoder dim {} but conditioning.d_id is {}",
                identity.dim(),
                c.d_id
            )));
        }
        let d = &config.diffusion;
        let mut rng = seed::derived_rng(seed_root, "model/init");
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, "text", c.d_c, &mut rng);
        let unet = Denoiser::new(&mut store, d.widths, d.groups, c.d_c, &mut rng);
        let cell = IMAGE_SIDE / c.patch_grid;
        let patch =
            PatchEncoder::new(&mut store, "patch", c.patch_grid, cell * cell * 3, c.d_v, c.encoder_blocks, &mut rng);
        let shape = FusionShape {
            d_id: c.d_id,
            d_v: c.d_v,
            d_c: c.d_c,
            n_queries: c.n_queries,
            dim: c.fusion_dim,
            layers: c.fusion_layers,
        };
        let mut fusion = IdFusion::new(&mut store, "fusion", shape, &mut rng);
        fusion.use_global = c.use_global;
        fusion.use_facial = c.use_facial;
        Ok(Self {
            config: config.clone(),
            store,
            text,
            unet,
            patch,
            fusion,
            identity,
            schedule: make_schedule(d.timesteps)?,
            trained_steps: 0,
            seed: seed_root,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    pub fn beta(&self) -> f64 {
        self.config.conditioning.beta as f64
    }

    pub fn identity_inputs(&self, sets: &[&ReferenceSet]) -> Result<IdentityInputs> {
        let mut global = Vec::with_capacity(sets.len() * self.identity.dim());
        for set in sets {
            global.extend(aggregate_global(&self.identity, set)?.vector);
        }
        Ok(IdentityInputs {
            f_global: Tensor::new(&[sets.len(), self.identity.dim()], global)?,
            facial: self.patch.prepare(sets, self.beta())?,
        })
    }

    /// `[B, n, d_c]` identity tokens; `keep_facial[i] = 0` drops the facial
    /// block for sample `i`.
    pub fn identity_tokens<'g>(&self, g: &'g Graph<'g>, inputs: &IdentityInputs, keep_facial: &[f32]) -> Var<'g> {
        let facial = self.fusion.use_facial.then(|| self.patch.forward(g, &inputs.facial));
        self.fusion.forward(g, g.constant(inputs.f_global.clone()), facial, keep_facial)
    }

    pub fn fused_tokens(&self, refs: &ReferenceSet, drop_facial: bool) -> Result<FusedIdentityTokens> {
        let inputs = self.identity_inputs(&[refs])?;
        let g = Graph::no_grad(&self.store);
        let keep = [if drop_facial { 0.0 } else { 1.0 }];
        let t = self.identity_tokens(&g, &inputs, &keep).value();
        let c = &self.config.conditioning;
        Ok(FusedIdentityTokens { tokens: t.as_ref().clone().reshape(&[c.n_queries, c.d_c])? })
    }

    /// Graph-level noise prediction.
    #[allow(clippy::too_many_arguments)]
    pub fn eps<'g>(
        &self,
        g: &'g Graph<'g>,
        z: Var<'g>,
        t: &[usize],
        lq: Var<'g>,
        f_id: Option<Var<'g>>,
        prompts: &[Prompt],
        ttab: Option<&TtabHook<'_>>,
    ) -> Var<'g> {
        let text = self.text.forward(g, prompts);
        let f = self.unet.forward(g, z, t, lq, text, f_id, ttab);
        // eps = sqrt(1 - a) z + sqrt(a) f, so the implied x0 = sqrt(a) z - sqrt(1 - a) f stays bounded as a -> 0
        let skip: Vec<f32> = t.iter().map(|&s| (1.0 - self.schedule.alpha_bar[s]).sqrt() as f32).collect();
        let gain: Vec<f32> = t.iter().map(|&s| self.schedule.alpha_bar[s].sqrt() as f32).collect();
        z.scale_batch(&skip).add(f.scale_batch(&gain))
    }

    /// Noise prediction for `z [B, 3, 32, 32]` without gradient tracking.
    /// `f_id` is `[B, n, d_c]`.
    pub fn denoise(
        &self,
        z: &Tensor,
        t: &[usize],
        lq: &Tensor,
        f_id: Option<&Tensor>,
        prompts: &[Prompt],
        ttab: Option<&TtabHook<'_>>,
    ) -> Result<Tensor> {
        let b = z.shape()[0];
        if z.shape() != [b, 3, IMAGE_SIDE, IMAGE_SIDE] || lq.shape() != z.shape() {
            return Err(Error::DimensionMismatch(format!("latent {:?} with control {:?}", z.shape(), lq.shape())));
        }
        if t.len() != b || prompts.len() != b || f_id.is_some_and(|f| f.shape()[0] != b) {
            return Err(Error::DimensionMismatch(format!("batch of {b} with {} timesteps, {} prompts", t.len(), prompts.len())));
        }
        if let Some(&bad) = t.iter().find(|&&s| s > self.schedule.timesteps()) {
            return Err(Error::InvalidArgument(format!("timestep {bad} outside 0..={}", self.schedule.timesteps())));
        }
        let g = Graph::no_grad(&self.store);
        let out = self.eps(
            &g,
            g.constant(z.clone()),
            t,
            g.constant(lq.clone()),
            f_id.map(|f| g.constant(f.clone())),
            prompts,
            ttab,
        );
        let out = out.value().as_ref().clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("noise prediction".into()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "restoration-model",
            "config": self.config.to_toml_string(),
            "trained_steps": self.trained_steps,
            "seed": self.seed,
        }));
        ck.add_store(MODEL_PREFIX, &self.store);
        self.identity.add_to_checkpoint(&mut ck, IDENTITY_PREFIX);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "restoration-model" {
            return Err(Error::Checkpoint("not a restoration model checkpoint".into()));
        }
        let config = Config::from_toml_str(ck.meta["config"].as_str().unwrap_or_default())?;
        let identity = IdentityEncoder::from_checkpoint(ck, IDENTITY_PREFIX)?;
        let seed_root = ck.meta["seed"].as_u64().unwrap_or(0);
        let mut model = Self::new(&config, identity, seed_root)?;
        ck.load_store(MODEL_PREFIX, &mut model.store)?;
        model.trained_steps = ck.meta["trained_steps"].as_u64().unwrap_or(0);
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
