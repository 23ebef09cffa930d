//! Result rows and their JSON / Markdown renderings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ids: f64,
    pub age_mae: f64,
    pub n_samples: usize,
}

/// Row labels a runner may emit.
pub const VARIANT_LABELS: &[&str] = &[
    "<=10", "10-20", "20-30", "30-40", ">40", "mixed", "no_global", "no_facial", "no_mask", "full", "no_aagg", "no_ttab",
    "aagg_ttab",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub report: MetricReport,
    pub config_hash: String,
    pub seed: u64,
    /// Extra per-row measurements such as probe values.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub probes: BTreeMap<String, f64>,
    /// Why a row is below the sample-count threshold, if it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl AblationResult {
    pub fn new(label: &str, report: MetricReport, config_hash: String, seed: u64) -> Result<Self> {
        if !VARIANT_LABELS.contains(&label) {
            return Err(Error::InvalidArgument(format!("unregistered variant label `{label}`")));
        }
        if report.n_samples == 0 {
            return Err(Error::InvalidArgument(format!("variant `{label}` has no samples")));
        }
        Ok(Self { label: label.into(), report, config_hash, seed, probes: BTreeMap::new(), flag: None })
    }

    pub fn probe(&self, key: &str) -> Option<f64> {
        self.probes.get(key).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub rows: Vec<AblationResult>,
    /// Row labels that produced no samples.
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl SuiteReport {
    pub fn row(&self, label: &str) -> Option<&AblationResult> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let probe_keys: Vec<&String> = {
            let mut k: Vec<&String> = self.rows.iter().flat_map(|r| r.probes.keys()).collect();
            k.sort();
            k.dedup();
            k
        };
        let mut out = format!("### {}\n\n| Variant | n | PSNR | SSIM | IDS | AGE |", self.suite);
        for k in &probe_keys {
            out.push_str(&format!(" {k} |"));
        }
        out.push_str("\n|---|---:|---:|---:|---:|---:|");
        out.push_str(&"---:|".repeat(probe_keys.len()));
        out.push('\n');
        for r in &self.rows {
            let m = &r.report;
            let flag = if r.flag.is_some() { " (!)" } else { "" };
            out.push_str(&format!(
                "| {}{flag} | {} | {:.2} | {:.4} | {:.4} | {:.2} |",
                r.label, m.n_samples, m.psnr, m.ssim, m.ids, m.age_mae
            ));
            for k in &probe_keys {
                match r.probes.get(*k) {
                    Some(v) => out.push_str(&format!(" {v:.4} |")),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        for r in self.rows.iter().filter(|r| r.flag.is_some()) {
            out.push_str(&format!("\n(!) {}: {}", r.label, r.flag.as_deref().unwrap_or_default()));
        }
        for s in &self.skipped {
            out.push_str(&format!("\nskipped {s}: no samples"));
        }
        out.push('\n');
        out
    }

    /// Writes `<stem>.json` and `<stem>.md` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let md = dir.join(format!("{stem}.md"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        Ok(vec![json, md])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(n: usize) -> MetricReport {
        MetricReport { psnr: 20.0, ssim: 0.5, ids: 0.7, age_mae: 8.0, n_samples: n }
    }

    #[test]
    fn labels_are_checked() {
        assert!(AblationResult::new("full", report(3), "h".into(), 0).is_ok());
        assert!(AblationResult::new("foo", report(3), "h".into(), 0).is_err());
        assert!(AblationResult::new("full", report(0), "h".into(), 0).is_err());
    }

    #[test]
    fn markdown_has_one_line_per_row() {
        let mut a = AblationResult::new("no_aagg", report(5), "h".into(), 1).unwrap();
        a.probes.insert("off_target".into(), 0.01);
        let b = AblationResult::new("aagg_ttab", report(5), "h".into(), 1).unwrap();
        let s = SuiteReport { suite: "guidance".into(), rows: vec![a, b], skipped: vec![] };
        let md = s.to_markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with("| no_aagg") || l.starts_with("| aagg_ttab")).count(), 2);
        assert!(md.contains("off_target"));
        let back: SuiteReport = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
