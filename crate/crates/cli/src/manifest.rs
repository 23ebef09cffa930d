//! Per-invocation run records.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub subcommand: String,
    /// Effective configuration as TOML.
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 over the input files, in argument order.
    pub input_hash: String,
    pub started_at: f64,
    pub finished_at: f64,
    pub outputs: Vec<PathBuf>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Hashes files, or for directories their `manifest.json` when present and
/// otherwise every `.png` directly inside, sorted by name.
pub fn hash_inputs(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(p.to_string_lossy().as_bytes());
        if p.is_dir() {
            let m = p.join("manifest.json");
            if m.is_file() {
                h.update(std::fs::read(&m).with_context(|| format!("reading {}", m.display()))?);
            } else {
                for f in png_files(p)? {
                    h.update(std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
                }
            }
        } else if p.is_file() {
            h.update(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

impl RunManifest {
    pub fn begin(subcommand: &str, config: &timeweaver::config::Config, seed: u64, input_hash: String) -> Self {
        let started_at = unix_now();
        let config_hash = config.hash();
        let run_id = format!("{subcommand}-{}-{}", (started_at * 1000.0) as u64, &input_hash[..8]);
        Self {
            run_id,
            subcommand: subcommand.into(),
            config: config.to_toml_string(),
            config_hash,
            seed,
            input_hash,
            started_at,
            finished_at: started_at,
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(key.into(), serde_json::to_value(value).expect("metric serializes"));
    }

    /// Writes `<root>/runs/<run_id>.json`; an existing record is never overwritten.
    pub fn finish(mut self, root: &Path) -> Result<PathBuf> {
        self.finished_at = unix_now();
        let dir = root.join("runs");
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut path = dir.join(format!("{}.json", self.run_id));
        let mut k = 1;
        while path.exists() {
            path = dir.join(format!("{}-{k}.json", self.run_id));
            k += 1;
        }
        let mut f = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        f.write_all(serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(path)
    }
}
