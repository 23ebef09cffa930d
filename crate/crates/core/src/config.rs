//! Nested TOML configuration with unknown-key rejection and range checks.
//! Every error names the offending key path, e.g. `conditioning.beta`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthlab::{DegradeRanges, DOWNSCALE_FACTORS, QUANT_LEVELS};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub synthlab: SynthConfig,
    pub conditioning: ConditioningConfig,
    pub encoders: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub guidance: GuidanceDefaults,
    pub evalkit: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub degrade: DegradeRanges,
    pub occlusion_prob: f64,
    /// Age radius per identity for training sets; 0 draws every age independently.
    pub train_age_radius: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { degrade: DegradeRanges::default(), occlusion_prob: 0.0, train_age_radius: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    pub d_id: usize,
    pub d_v: usize,
    pub d_c: usize,
    /// Side of the patch-token grid (p).
    pub patch_grid: usize,
    pub n_queries: usize,
    pub fusion_layers: usize,
    pub fusion_dim: usize,
    pub encoder_blocks: usize,
    pub beta: f32,
    pub drop_prob: f64,
    pub use_global: bool,
    pub use_facial: bool,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            d_id: 64,
            d_v: 32,
            d_c: 64,
            patch_grid: 8,
            n_queries: 8,
            fusion_layers: 2,
            fusion_dim: 64,
            encoder_blocks: 2,
            beta: 1.0,
            drop_prob: 0.15,
            use_global: true,
            use_facial: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub id_steps: usize,
    pub id_batch: usize,
    pub id_lr: f32,
    pub margin: f32,
    pub scale: f32,
    pub age_steps: usize,
    pub age_batch: usize,
    pub age_lr: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            id_steps: 1500,
            id_batch: 32,
            id_lr: 2e-3,
            margin: 0.25,
            scale: 16.0,
            age_steps: 1500,
            age_batch: 32,
            age_lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub widths: [usize; 3],
    pub groups: usize,
    pub lambda: f32,
    pub warmup_frac: f64,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Fraction of the step budget spent on the age-captioned prior phase.
    pub prior_frac: f64,
    /// Chance that a prior-phase instance is captioned with its true age.
    pub age_caption_prob: f64,
    pub clip_norm: f32,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            widths: [16, 32, 64],
            groups: 8,
            lambda: 0.5,
            warmup_frac: 0.6,
            learning_rate: 1e-3,
            batch_size: 10,
            prior_frac: 0.4,
            age_caption_prob: 0.75,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceDefaults {
    pub sampler_steps: usize,
    pub n_opt: usize,
    pub eta: f32,
    pub ttab: bool,
    pub aagg: bool,
}

impl Default for GuidanceDefaults {
    fn default() -> Self {
        Self { sampler_steps: 20, n_opt: 1, eta: 1.0, ttab: true, aagg: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Step size used by the guidance experiments.
    pub eta: f32,
    pub min_bucket: usize,
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ssim_window: 7, ssim_sigma: 1.5, ssim_k1: 0.01, ssim_k2: 0.03, eta: 450.0, min_bucket: 30, samples: 50 }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::config("<document>", e.message().to_string()))?;
        let reference = toml::Value::try_from(Config::default()).expect("default config serializes");
        check_keys(&doc, &reference, "")?;
        let cfg: Config = doc.try_into().map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable content hash of the effective configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(self.to_toml_string().as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.synthlab;
        let d = &s.degrade;
        range("synthlab.degrade.blur_sigma", d.blur_sigma[0] as f64, 0.5, 3.0)?;
        range("synthlab.degrade.blur_sigma", d.blur_sigma[1] as f64, d.blur_sigma[0] as f64, 3.0)?;
        range("synthlab.degrade.noise_sigma", d.noise_sigma[0] as f64, 0.0, 0.1)?;
        range("synthlab.degrade.noise_sigma", d.noise_sigma[1] as f64, d.noise_sigma[0] as f64, 0.1)?;
        member("synthlab.degrade.downscale_factors", &d.downscale_factors, &DOWNSCALE_FACTORS)?;
        member("synthlab.degrade.quant_levels", &d.quant_levels, &QUANT_LEVELS)?;
        range("synthlab.occlusion_prob", s.occlusion_prob, 0.0, 0.9)?;
        range("synthlab.train_age_radius", s.train_age_radius as f64, 0.0, 42.0)?;

        let c = &self.conditioning;
        for (k, v) in [("d_id", c.d_id), ("d_v", c.d_v), ("d_c", c.d_c), ("n_queries", c.n_queries), ("fusion_dim", c.fusion_dim)] {
            range(&format!("conditioning.{k}"), v as f64, 1.0, 1024.0)?;
        }
        if ![1, 2, 4, 8, 16, 32].contains(&c.patch_grid) {
            return Err(Error::config("conditioning.patch_grid", "must divide the 32-pixel image side"));
        }
        range("conditioning.fusion_layers", c.fusion_layers as f64, 1.0, 8.0)?;
        range("conditioning.encoder_blocks", c.encoder_blocks as f64, 2.0, 8.0)?;
        range("conditioning.beta", c.beta as f64, 0.0, 100.0)?;
        range("conditioning.drop_prob", c.drop_prob, 0.0, 1.0)?;

        let e = &self.encoders;
        range("encoders.id_steps", e.id_steps as f64, 0.0, 1e7)?;
        range("encoders.id_batch", e.id_batch as f64, 2.0, 4096.0)?;
        range("encoders.id_lr", e.id_lr as f64, 1e-7, 1.0)?;
        range("encoders.margin", e.margin as f64, 0.0, 1.0)?;
        range("encoders.scale", e.scale as f64, 1.0, 128.0)?;
        range("encoders.age_steps", e.age_steps as f64, 0.0, 1e7)?;
        range("encoders.age_batch", e.age_batch as f64, 1.0, 4096.0)?;
        range("encoders.age_lr", e.age_lr as f64, 1e-7, 1.0)?;

        let f = &self.diffusion;
        range("diffusion.timesteps", f.timesteps as f64, 2.0, 10000.0)?;
        for w in f.widths {
            range("diffusion.widths", w as f64, 1.0, 1024.0)?;
            if w % f.groups != 0 {
                return Err(Error::config("diffusion.widths", format!("{w} not divisible by diffusion.groups")));
            }
        }
        range("diffusion.groups", f.groups as f64, 1.0, 64.0)?;
        range("diffusion.lambda", f.lambda as f64, 0.0, 100.0)?;
        range("diffusion.warmup_frac", f.warmup_frac, 0.0, 1.0)?;
        range("diffusion.learning_rate", f.learning_rate as f64, 1e-7, 1.0)?;
        range("diffusion.batch_size", f.batch_size as f64, 1.0, 4096.0)?;
        range("diffusion.prior_frac", f.prior_frac, 0.0, 1.0)?;
        range("diffusion.age_caption_prob", f.age_caption_prob, 0.0, 1.0)?;
        range("diffusion.clip_norm", f.clip_norm as f64, 0.0, 1e6)?;

        let g = &self.guidance;
        range("guidance.sampler_steps", g.sampler_steps as f64, 1.0, f.timesteps as f64)?;
        range("guidance.n_opt", g.n_opt as f64, 0.0, 100.0)?;
        range("guidance.eta", g.eta as f64, 0.0, 1e9)?;

        let v = &self.evalkit;
        if v.ssim_window % 2 == 0 || !(3..=31).contains(&v.ssim_window) {
            return Err(Error::config("evalkit.ssim_window", "must be odd and in [3, 31]"));
        }
        range("evalkit.ssim_sigma", v.ssim_sigma, 1e-3, 100.0)?;
        range("evalkit.ssim_k1", v.ssim_k1, 1e-6, 1.0)?;
        range("evalkit.ssim_k2", v.ssim_k2, 1e-6, 1.0)?;
        range("evalkit.eta", v.eta as f64, 0.0, 1e9)?;
        range("evalkit.min_bucket", v.min_bucket as f64, 1.0, 1e6)?;
        range("evalkit.samples", v.samples as f64, 1.0, 1e6)?;
        Ok(())
    }
}

fn range(path: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(Error::config(path, format!("value {v} outside [{lo}, {hi}]")))
    }
}

fn member(path: &str, vs: &[u32], allowed: &[u32]) -> Result<()> {
    if vs.is_empty() {
        return Err(Error::config(path, "must not be empty"));
    }
    match vs.iter().find(|v| !allowed.contains(v)) {
        Some(v) => Err(Error::config(path, format!("value {v} not in {allowed:?}"))),
        None => Ok(()),
    }
}

/// Walks `doc` against the serialized defaults and rejects keys the schema lacks.
fn check_keys(doc: &toml::Value, reference: &toml::Value, prefix: &str) -> Result<()> {
    if let (toml::Value::Table(d), toml::Value::Table(r)) = (doc, reference) {
        for (k, v) in d {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                Some(rv) => check_keys(v, rv, &path)?,
                None => return Err(Error::config(path, "unknown key")),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn negative_beta_names_its_key() {
        let err = Config::from_toml_str("[conditioning]\nbeta = -1.0\n").unwrap_err().to_string();
        assert!(err.contains("conditioning.beta"), "{err}");
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = Config::from_toml_str("foo = 1\n").unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
        let err = Config::from_toml_str("[guidance]\nsteps = 3\n").unwrap_err().to_string();
        assert!(err.contains("guidance.steps"), "{err}");
    }

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert_eq!(cfg.hash(), Config::default().hash());
    }

    #[test]
    fn malformed_documents_are_rejected() {
        assert!(Config::from_toml_str("[diffusion\n").is_err());
        assert!(Config::from_toml_str("[diffusion]\nlambda = \"big\"\n").is_err());
    }
}
