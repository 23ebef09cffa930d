//! On-disk datasets: `images/`, `masks/`, `degraded/` and `manifest.json`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::degrade::{degrade, DegradeConfig, DegradeRanges};
use super::face::{gen_identity, render_face, AgeFactor, MAX_AGE, MIN_AGE};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor};
use crate::seed;

pub const MAX_REFERENCES: usize = 5;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub identity_id: u64,
    pub gt_image_path: String,
    pub degraded_image_path: String,
    pub mask_path: String,
    pub age_years: u32,
    pub reference_image_paths: Vec<String>,
    /// Parallel to `reference_image_paths`; absent means all valid.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference_valid: Vec<bool>,
    pub pose_seed: u64,
    pub degrade: DegradeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

/// How ages are drawn for the images of one identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AgeSpread {
    /// Every image draws uniformly from the full age range.
    Wide,
    /// Each identity gets a centre age; images stay within `radius` years of it.
    Narrow { radius: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub split: Split,
    /// Identity ids are `first_identity..first_identity + n`.
    pub first_identity: u64,
    pub age_spread: AgeSpread,
    pub degrade: DegradeRanges,
    /// Chance that a reference is flagged as a failed parse.
    pub occlusion_prob: f64,
    pub max_references: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            split: Split::Train,
            first_identity: 0,
            age_spread: AgeSpread::Wide,
            degrade: DegradeRanges::default(),
            occlusion_prob: 0.0,
            max_references: MAX_REFERENCES,
        }
    }
}

pub fn build_dataset(n_identities: usize, images_per_identity: usize, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    build_dataset_with(n_identities, images_per_identity, out_dir, seed, &DatasetOptions::default())
}

pub fn build_dataset_with(
    n_identities: usize,
    images_per_identity: usize,
    out_dir: &Path,
    seed: u64,
    opts: &DatasetOptions,
) -> Result<DatasetManifest> {
    if n_identities < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 identities, got {n_identities}")));
    }
    if images_per_identity < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 images per identity to form a disjoint reference, got {images_per_identity}"
        )));
    }
    if !(1..=MAX_REFERENCES).contains(&opts.max_references) {
        return Err(Error::InvalidArgument(format!("max_references must be in [1, {MAX_REFERENCES}]")));
    }
    for sub in ["images", "masks", "degraded"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut records = Vec::with_capacity(n_identities * images_per_identity);
    for i in 0..n_identities {
        let id = opts.first_identity + i as u64;
        let spec = gen_identity(id);
        let mut rng = seed::derived_rng(seed, &format!("dataset/identity/{id}"));
        let ages = draw_ages(&mut rng, images_per_identity, opts.age_spread);
        let names: Vec<String> = (0..images_per_identity).map(|k| format!("{id}_{k}.png")).collect();
        for (k, &age) in ages.iter().enumerate() {
            let pose_seed = seed::derive(seed, &format!("dataset/pose/{id}/{k}"));
            let face = render_face(&spec, &AgeFactor::from_age(age)?, pose_seed);
            let dcfg = opts.degrade.sample(&mut rng, seed::derive(seed, &format!("dataset/degrade/{id}/{k}")));
            let lq = degrade(&face.image, &dcfg)?;
            face.image.save_png(&out_dir.join("images").join(&names[k]))?;
            face.organ_mask.save_png(&out_dir.join("masks").join(&names[k]))?;
            lq.save_png(&out_dir.join("degraded").join(&names[k]))?;

            let mut others: Vec<usize> = (0..images_per_identity).filter(|&j| j != k).collect();
            others.shuffle(&mut rng);
            let count = rng.gen_range(1..=opts.max_references.min(others.len()));
            let refs: Vec<String> = others[..count].iter().map(|&j| format!("images/{}", names[j])).collect();
            let reference_valid = if opts.occlusion_prob > 0.0 {
                (0..count).map(|_| !rng.gen_bool(opts.occlusion_prob)).collect()
            } else {
                Vec::new()
            };
            records.push(ManifestRecord {
                identity_id: id,
                gt_image_path: format!("images/{}", names[k]),
                degraded_image_path: format!("degraded/{}", names[k]),
                mask_path: format!("masks/{}", names[k]),
                age_years: age,
                reference_image_paths: refs,
                reference_valid,
                pose_seed,
                degrade: dcfg,
            });
        }
    }
    let manifest = DatasetManifest { split: opts.split, seed, records };
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn draw_ages<R: Rng + ?Sized>(rng: &mut R, n: usize, spread: AgeSpread) -> Vec<u32> {
    match spread {
        AgeSpread::Wide => (0..n).map(|_| rng.gen_range(MIN_AGE..=MAX_AGE)).collect(),
        AgeSpread::Narrow { radius } => {
            let r = radius.min((MAX_AGE - MIN_AGE) / 2);
            let centre = rng.gen_range(MIN_AGE + r..=MAX_AGE - r);
            (0..n).map(|_| rng.gen_range(centre - r..=centre + r)).collect()
        }
    }
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn identity_count(&self) -> usize {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Checks the manifest invariants against the files under `dir`.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let owner: HashMap<&str, u64> =
            self.records.iter().map(|r| (r.gt_image_path.as_str(), r.identity_id)).collect();
        for (i, r) in self.records.iter().enumerate() {
            for p in [&r.gt_image_path, &r.degraded_image_path, &r.mask_path] {
                if !dir.join(p).is_file() {
                    return Err(Error::InvalidArgument(format!("record {i}: missing file {p}")));
                }
            }
            if !(1..=MAX_REFERENCES).contains(&r.reference_image_paths.len()) {
                return Err(Error::InvalidArgument(format!(
                    "record {i}: {} references",
                    r.reference_image_paths.len()
                )));
            }
            if !r.reference_valid.is_empty() && r.reference_valid.len() != r.reference_image_paths.len() {
                return Err(Error::InvalidArgument(format!("record {i}: reference_valid length mismatch")));
            }
            for p in &r.reference_image_paths {
                if *p == r.gt_image_path {
                    return Err(Error::InvalidArgument(format!("record {i}: references its own image")));
                }
                match owner.get(p.as_str()) {
                    Some(&id) if id == r.identity_id => {}
                    _ => return Err(Error::InvalidArgument(format!("record {i}: foreign reference {p}"))),
                }
            }
        }
        Ok(())
    }
}

/// A manifest with its rasters in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub identity_id: u64,
    pub age_years: u32,
    pub gt: ImageTensor,
    pub degraded: ImageTensor,
    pub mask: BinaryMask,
    /// Indices into `Dataset::samples`.
    pub references: Vec<usize>,
    pub reference_valid: Vec<bool>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        manifest.validate(dir)?;
        let index: HashMap<&str, usize> =
            manifest.records.iter().enumerate().map(|(i, r)| (r.gt_image_path.as_str(), i)).collect();
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let references: Vec<usize> = r.reference_image_paths.iter().map(|p| index[p.as_str()]).collect();
            let reference_valid =
                if r.reference_valid.is_empty() { vec![true; references.len()] } else { r.reference_valid.clone() };
            samples.push(Sample {
                identity_id: r.identity_id,
                age_years: r.age_years,
                gt: ImageTensor::load_png(&dir.join(&r.gt_image_path))?,
                degraded: ImageTensor::load_png(&dir.join(&r.degraded_image_path))?,
                mask: BinaryMask::load_png(&dir.join(&r.mask_path))?,
                references,
                reference_valid,
            });
        }
        Ok(Self { root: dir.to_path_buf(), manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by identity, in identity order.
    pub fn by_identity(&self) -> Vec<(u64, Vec<usize>)> {
        let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            match groups.iter_mut().find(|(id, _)| *id == s.identity_id) {
                Some((_, v)) => v.push(i),
                None => groups.push((s.identity_id, vec![i])),
            }
        }
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_dataset_has_one_reference_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(2, 2, dir.path(), 0).unwrap();
        assert_eq!(m.records.len(), 4);
        assert!(m.records.iter().all(|r| r.reference_image_paths.len() == 1));
        assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 4);
        m.validate(dir.path()).unwrap();
    }

    #[test]
    fn manifests_are_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(3, 3, a.path(), 5).unwrap();
        build_dataset(3, 3, b.path(), 5).unwrap();
        let read = |d: &Path| std::fs::read(d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        let img = |d: &Path| std::fs::read(d.join("images/1_2.png")).unwrap();
        assert_eq!(img(a.path()), img(b.path()));
    }

    #[test]
    fn references_stay_within_identity() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(10, 6, dir.path(), 1).unwrap();
        let owner: HashMap<_, _> = m.records.iter().map(|r| (r.gt_image_path.clone(), r.identity_id)).collect();
        for r in &m.records {
            assert!((1..=5).contains(&r.reference_image_paths.len()));
            assert!(!r.reference_image_paths.contains(&r.gt_image_path));
            assert!(r.reference_image_paths.iter().all(|p| owner[p] == r.identity_id));
        }
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 60);
        assert_eq!(ds.by_identity().len(), 10);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_dataset(1, 4, dir.path(), 0).is_err());
        assert!(build_dataset(4, 1, dir.path(), 0).is_err());
    }

    #[test]
    fn narrow_spread_bounds_identity_ages() {
        let mut rng = seed::rng(3);
        for _ in 0..50 {
            let ages = draw_ages(&mut rng, 6, AgeSpread::Narrow { radius: 5 });
            let (lo, hi) = (ages.iter().min().unwrap(), ages.iter().max().unwrap());
            assert!(hi - lo <= 10 && *lo >= MIN_AGE && *hi <= MAX_AGE);
        }
    }
}
