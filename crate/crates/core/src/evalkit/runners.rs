//! Experiment runners: age-gap sweep, identity ablation, guidance ablation.

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::conditioning::{IdentityEncoder, ReferenceEntry, ReferenceSet, MAX_REFERENCES};
use crate::config::Config;
use crate::diffusion::RestorationModel;
use crate::error::{Error, Result};
use crate::guidance::{restore_batch_targets, GuidanceConfig};
use crate::image::{BinaryMask, ImageTensor};
use crate::seed;
use crate::synthlab::{gen_identity, render_face, AgeFactor, Dataset};

use super::age::AgeEstimator;
use super::metrics::{ids, mean_abs_error, psnr, ssim_with, SsimParams};
use super::report::{AblationResult, MetricReport, SuiteReport};

const CHUNK: usize = 25;

/// Scorers and settings shared by every runner.
#[derive(Clone, Copy, Debug)]
pub struct EvalContext<'a> {
    pub identity: &'a IdentityEncoder,
    pub age: &'a AgeEstimator,
    pub config: &'a Config,
    pub seed: u64,
}

impl EvalContext<'_> {
    fn ssim_params(&self) -> SsimParams {
        let e = &self.config.evalkit;
        SsimParams { window: e.ssim_window, sigma: e.ssim_sigma, k1: e.ssim_k1, k2: e.ssim_k2 }
    }

    /// Guidance settings used by the experiments.
    pub fn guidance(&self) -> GuidanceConfig {
        let mut g = GuidanceConfig::from_defaults(&self.config.guidance, None);
        g.eta = self.config.evalkit.eta;
        g
    }

    fn config_hash(&self, label: &str, g: &GuidanceConfig) -> String {
        let mut h = Sha256::new();
        h.update(self.config.hash().as_bytes());
        h.update(label.as_bytes());
        h.update(serde_json::to_vec(g).expect("guidance config serializes"));
        h.update(self.seed.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }

    fn sample_seed(&self, index: usize) -> u64 {
        seed::derive(self.seed, &format!("eval/sample/{index}"))
    }

    pub fn score(&self, restored: &[ImageTensor], gts: &[&ImageTensor], ages: &[u32]) -> Result<MetricReport> {
        if restored.is_empty() || restored.len() != gts.len() || restored.len() != ages.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} restorations, {} targets, {} ages",
                restored.len(),
                gts.len(),
                ages.len()
            )));
        }
        let n = restored.len() as f64;
        let p = self.ssim_params();
        let (mut ps, mut ss, mut is) = (0.0, 0.0, 0.0);
        for (r, g) in restored.iter().zip(gts) {
            ps += psnr(r, g)?;
            ss += ssim_with(r, g, &p)?;
            is += ids(self.identity, r, g)?;
        }
        let refs: Vec<&ImageTensor> = restored.iter().collect();
        let pred = self.age.predict_batch(&refs)?;
        let truth: Vec<f64> = ages.iter().map(|&a| a as f64).collect();
        Ok(MetricReport {
            psnr: ps / n,
            ssim: ss / n,
            ids: is / n,
            age_mae: mean_abs_error(&pred, &truth)?,
            n_samples: restored.len(),
        })
    }
}

/// One restoration request against a dataset sample.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub sample: usize,
    pub refs: ReferenceSet,
}

fn restore_items(
    ctx: &EvalContext<'_>,
    model: &RestorationModel,
    dataset: &Dataset,
    items: &[EvalItem],
    cfg: &GuidanceConfig,
    with_target: bool,
) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        let lqs: Vec<&ImageTensor> = chunk.iter().map(|it| &dataset.samples[it.sample].degraded).collect();
        let refs: Vec<&ReferenceSet> = chunk.iter().map(|it| &it.refs).collect();
        let taus: Vec<Option<u32>> =
            chunk.iter().map(|it| with_target.then_some(dataset.samples[it.sample].age_years)).collect();
        let seeds: Vec<u64> = chunk.iter().map(|it| ctx.sample_seed(it.sample)).collect();
        out.extend(restore_batch_targets(model, &lqs, &refs, &taus, cfg, &seeds)?.0);
    }
    Ok(out)
}

fn score_items(ctx: &EvalContext<'_>, dataset: &Dataset, items: &[EvalItem], restored: &[ImageTensor]) -> Result<MetricReport> {
    let gts: Vec<&ImageTensor> = items.iter().map(|it| &dataset.samples[it.sample].gt).collect();
    let ages: Vec<u32> = items.iter().map(|it| dataset.samples[it.sample].age_years).collect();
    ctx.score(restored, &gts, &ages)
}

/// Seeded subset of samples with at least one valid manifest reference.
pub fn select_items(dataset: &Dataset, n: usize, seed_root: u64) -> Result<Vec<EvalItem>> {
    let mut idx: Vec<usize> =
        (0..dataset.len()).filter(|&i| dataset.samples[i].reference_valid.iter().any(|&v| v)).collect();
    idx.shuffle(&mut seed::derived_rng(seed_root, "eval/select"));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| Ok(EvalItem { sample: i, refs: ReferenceSet::from_dataset(dataset, i)? })).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GapBucket {
    UpTo10,
    From10To20,
    From20To30,
    From30To40,
    Over40,
    Mixed,
}

impl GapBucket {
    pub const ALL: [GapBucket; 6] = [
        GapBucket::UpTo10,
        GapBucket::From10To20,
        GapBucket::From20To30,
        GapBucket::From30To40,
        GapBucket::Over40,
        GapBucket::Mixed,
    ];

    pub fn label(self) -> &'static str {
        match self {
            GapBucket::UpTo10 => "<=10",
            GapBucket::From10To20 => "10-20",
            GapBucket::From20To30 => "20-30",
            GapBucket::From30To40 => "30-40",
            GapBucket::Over40 => ">40",
            GapBucket::Mixed => "mixed",
        }
    }

    /// Single-interval bucket of an absolute age gap.
    pub fn of_gap(gap: u32) -> GapBucket {
        match gap {
            0..=10 => GapBucket::UpTo10,
            11..=20 => GapBucket::From10To20,
            21..=30 => GapBucket::From20To30,
            31..=40 => GapBucket::From30To40,
            _ => GapBucket::Over40,
        }
    }
}

fn entry(dataset: &Dataset, i: usize) -> ReferenceEntry {
    let s = &dataset.samples[i];
    ReferenceEntry { image: s.gt.clone(), organ_mask: s.mask.clone(), valid: true }
}

/// Per-bucket restoration requests. References come from every other image
/// of the same identity; `Mixed` takes up to five whose gaps span at least
/// two intervals.
pub fn gap_bucket_items(dataset: &Dataset, bucket: GapBucket) -> Result<Vec<EvalItem>> {
    let groups = dataset.by_identity();
    let mut items = Vec::new();
    for (_, members) in &groups {
        for &i in members {
            let age = dataset.samples[i].age_years;
            let others = members.iter().copied().filter(|&j| j != i);
            let gap = |j: usize| dataset.samples[j].age_years.abs_diff(age);
            let chosen: Vec<usize> = match bucket {
                GapBucket::Mixed => {
                    let picked: Vec<usize> = others.take(MAX_REFERENCES).collect();
                    let mut kinds: Vec<&str> = picked.iter().map(|&j| GapBucket::of_gap(gap(j)).label()).collect();
                    kinds.dedup();
                    kinds.sort_unstable();
                    kinds.dedup();
                    if kinds.len() >= 2 {
                        picked
                    } else {
                        Vec::new()
                    }
                }
                b => others.filter(|&j| GapBucket::of_gap(gap(j)) == b).take(MAX_REFERENCES).collect(),
            };
            if !chosen.is_empty() {
                let refs = ReferenceSet::new(chosen.iter().map(|&j| entry(dataset, j)).collect())?;
                items.push(EvalItem { sample: i, refs });
            }
        }
    }
    Ok(items)
}

/// Restores each gap bucket with the age prompt set to the true age. Buckets
/// are capped at `evalkit.samples` requests; those under `evalkit.min_bucket`
/// are flagged, empty ones skipped.
pub fn run_age_gap_sweep(ctx: &EvalContext<'_>, model: &RestorationModel, dataset: &Dataset) -> Result<SuiteReport> {
    let cfg = ctx.guidance();
    let cap = ctx.config.evalkit.samples.max(ctx.config.evalkit.min_bucket);
    let mut report = SuiteReport { suite: "agegap".into(), rows: Vec::new(), skipped: Vec::new() };
    for bucket in GapBucket::ALL {
        let mut items = gap_bucket_items(dataset, bucket)?;
        items.shuffle(&mut seed::derived_rng(ctx.seed, &format!("eval/agegap/{}", bucket.label())));
        items.truncate(cap);
        items.sort_by_key(|it| it.sample);
        if items.is_empty() {
            log::warn!("age-gap bucket {} has no samples", bucket.label());
            report.skipped.push(bucket.label().into());
            continue;
        }
        let restored = restore_items(ctx, model, dataset, &items, &cfg, true)?;
        let metrics = score_items(ctx, dataset, &items, &restored)?;
        let mut row = AblationResult::new(bucket.label(), metrics, ctx.config_hash(bucket.label(), &cfg), ctx.seed)?;
        if items.len() < ctx.config.evalkit.min_bucket {
            row.flag = Some(format!("{} samples, below the {} threshold", items.len(), ctx.config.evalkit.min_bucket));
        }
        report.rows.push(row);
    }
    Ok(report)
}

pub const IDENTITY_VARIANTS: [&str; 4] = ["no_global", "no_facial", "no_mask", "full"];

/// Scores each identity variant with the age prompt set to the true age, and
/// probes age leakage by restoring again without any age prompt.
pub fn run_identity_ablation(
    ctx: &EvalContext<'_>,
    variants: &[(&str, &RestorationModel)],
    dataset: &Dataset,
) -> Result<SuiteReport> {
    for want in IDENTITY_VARIANTS {
        if !variants.iter().any(|(l, _)| *l == want) {
            return Err(Error::InvalidArgument(format!("missing identity variant `{want}`")));
        }
    }
    let cfg = ctx.guidance();
    let items = select_items(dataset, ctx.config.evalkit.samples, ctx.seed)?;
    if items.is_empty() {
        return Err(Error::NoValidReference);
    }
    let truth: Vec<f64> = items.iter().map(|it| dataset.samples[it.sample].age_years as f64).collect();
    let mut report = SuiteReport { suite: "identity".into(), rows: Vec::new(), skipped: Vec::new() };
    for want in IDENTITY_VARIANTS {
        let model = variants.iter().find(|(l, _)| *l == want).map(|(_, m)| *m).expect("checked above");
        let restored = restore_items(ctx, model, dataset, &items, &cfg, true)?;
        let metrics = score_items(ctx, dataset, &items, &restored)?;
        let mut row = AblationResult::new(want, metrics, ctx.config_hash(want, &cfg), ctx.seed)?;
        let free = restore_items(ctx, model, dataset, &items, &cfg, false)?;
        let pred = ctx.age.predict_batch(&free.iter().collect::<Vec<_>>())?;
        row.probes.insert("leakage_mae".into(), mean_abs_error(&pred, &truth)?);
        report.rows.push(row);
    }
    Ok(report)
}

/// Face region (skin and organs) of dataset sample `index`, re-rendered from
/// its manifest record.
pub fn face_region(dataset: &Dataset, index: usize) -> Result<BinaryMask> {
    let r = &dataset.manifest.records[index];
    let face = render_face(&gen_identity(r.identity_id), &AgeFactor::from_age(r.age_years)?, r.pose_seed);
    let data = face.skin_mask.data().iter().zip(face.organ_mask.data()).map(|(&a, &b)| a || b).collect();
    BinaryMask::new(face.skin_mask.height(), face.skin_mask.width(), data)
}

/// Mean absolute per-pixel change between two images over pixels where
/// `inside(mask)` holds.
pub fn masked_change(a: &ImageTensor, b: &ImageTensor, mask: &BinaryMask, inside: bool) -> Result<f64> {
    a.same_shape(b)?;
    if (mask.height(), mask.width()) != (a.height(), a.width()) {
        return Err(Error::DimensionMismatch("mask does not match image".into()));
    }
    let c = a.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, &m) in mask.data().iter().enumerate() {
        if m == inside {
            for k in 0..c {
                sum += (a.data()[p * c + k] as f64 - b.data()[p * c + k] as f64).abs();
            }
            n += c;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Three guidance configurations over identical inputs and seeds. Each row
/// also reports how far the result moved from plain unguided sampling,
/// outside (`off_target`) and inside (`on_face`) the face.
pub fn run_guidance_ablation(ctx: &EvalContext<'_>, model: &RestorationModel, dataset: &Dataset) -> Result<SuiteReport> {
    let items = select_items(dataset, ctx.config.evalkit.samples, ctx.seed)?;
    if items.is_empty() {
        return Err(Error::NoValidReference);
    }
    let base_cfg = ctx.guidance();
    let plain = GuidanceConfig::unguided(base_cfg.sampler_steps);
    let baseline = restore_items(ctx, model, dataset, &items, &plain, false)?;
    let masks = items.iter().map(|it| face_region(dataset, it.sample)).collect::<Result<Vec<_>>>()?;
    let mut report = SuiteReport { suite: "guidance".into(), rows: Vec::new(), skipped: Vec::new() };
    for (label, aagg, ttab) in [("no_aagg", false, true), ("no_ttab", true, false), ("aagg_ttab", true, true)] {
        let cfg = GuidanceConfig { aagg_enabled: aagg, ttab_enabled: ttab, ..base_cfg.clone() };
        let restored = restore_items(ctx, model, dataset, &items, &cfg, true)?;
        let metrics = score_items(ctx, dataset, &items, &restored)?;
        let mut row = AblationResult::new(label, metrics, ctx.config_hash(label, &cfg), ctx.seed)?;
        let (mut off, mut on) = (0.0, 0.0);
        for ((r, b), m) in restored.iter().zip(&baseline).zip(&masks) {
            off += masked_change(r, b, m, false)?;
            on += masked_change(r, b, m, true)?;
        }
        row.probes.insert("off_target".into(), off / items.len() as f64);
        row.probes.insert("on_face".into(), on / items.len() as f64);
        report.rows.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_buckets_partition_the_integers() {
        assert_eq!(GapBucket::of_gap(0), GapBucket::UpTo10);
        assert_eq!(GapBucket::of_gap(10), GapBucket::UpTo10);
        assert_eq!(GapBucket::of_gap(11), GapBucket::From10To20);
        assert_eq!(GapBucket::of_gap(40), GapBucket::From30To40);
        assert_eq!(GapBucket::of_gap(41), GapBucket::Over40);
        let labels: Vec<&str> = GapBucket::ALL.iter().map(|b| b.label()).collect();
        assert!(labels.iter().all(|l| super::super::report::VARIANT_LABELS.contains(l)));
    }

    #[test]
    fn masked_change_splits_pixels() {
        let a = ImageTensor::filled(2, 2, 1, 0.0);
        let mut b = a.clone();
        b.set(0, 0, 0, 1.0);
        let mask = BinaryMask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert_eq!(masked_change(&a, &b, &mask, true).unwrap(), 1.0);
        assert_eq!(masked_change(&a, &b, &mask, false).unwrap(), 0.0);
    }

    #[test]
    fn bucket_items_respect_their_interval() {
        let dir = tempfile::tempdir().unwrap();
        crate::synthlab::build_dataset(3, 6, dir.path(), 4).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        for b in &GapBucket::ALL[..5] {
            for it in gap_bucket_items(&ds, *b).unwrap() {
                let age = ds.samples[it.sample].age_years;
                for e in it.refs.entries() {
                    let j = ds.samples.iter().position(|s| s.gt == e.image).unwrap();
                    assert_ne!(j, it.sample);
                    assert_eq!(GapBucket::of_gap(ds.samples[j].age_years.abs_diff(age)), *b);
                }
            }
        }
        let face = face_region(&ds, 0).unwrap();
        assert!(face.fraction() > 0.1 && face.fraction() < 0.95);
    }
}
