use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use drl::training::{EvalReport, LossReport, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliResult;

/// Bumped whenever a CSV layout changes.
pub const SCHEMA_VERSION: u32 = 1;

pub fn loss_csv(losses: &[LossReport]) -> String {
    let mut out = String::from("schema_version,stage,episode,l_cls,l_meta,l_drl,total\n");
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    for r in losses {
        let stage = r.stage.as_str();
        let episode = counters.entry(stage).or_insert(0);
        writeln!(
            out,
            "{SCHEMA_VERSION},{stage},{episode},{},{},{},{}",
            r.l_cls, r.l_meta, r.l_drl, r.total
        )
        .unwrap();
        *episode += 1;
    }
    out
}

/// One evaluated run inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// Grouping columns, e.g. `[("variant", "drl_on")]`.
    pub keys: Vec<(&'static str, String)>,
    pub seed: u64,
    pub eval: EvalReport,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Data rows in input order, then one summary row (mean and sample stddev)
/// per distinct key tuple in first-seen order.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let key_names: Vec<&str> = rows.first().map(|r| r.keys.iter().map(|(k, _)| *k).collect()).unwrap_or_default();
    let mut out = format!(
        "schema_version,row,{},seed,query_accuracy,class_separation,query_accuracy_std,class_separation_std\n",
        key_names.join(",")
    );
    let mut groups: Vec<(Vec<String>, Vec<&SweepRow>)> = Vec::new();
    for r in rows {
        let key: Vec<String> = r.keys.iter().map(|(_, v)| v.clone()).collect();
        writeln!(
            out,
            "{SCHEMA_VERSION},run,{},{},{},{},,",
            key.join(","),
            r.seed,
            r.eval.query_accuracy,
            fmt_opt(r.eval.class_separation)
        )
        .unwrap();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    for (key, members) in &groups {
        let accs: Vec<f64> = members.iter().map(|r| r.eval.query_accuracy).collect();
        let seps: Vec<f64> = members.iter().filter_map(|r| r.eval.class_separation).collect();
        let (acc_mean, acc_std) = mean_std(&accs);
        let (sep_mean, sep_std) = mean_std(&seps);
        let sep = |v: f64| if seps.is_empty() { String::new() } else { v.to_string() };
        writeln!(
            out,
            "{SCHEMA_VERSION},summary,{},,{acc_mean},{},{acc_std},{}",
            key.join(","),
            sep(sep_mean),
            sep(sep_std)
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub config: TrainConfig,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub outputs: BTreeMap<String, PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub losses: Option<Vec<LossReport>>,
}

impl Manifest {
    pub fn new(command: &str, config: &TrainConfig, seeds: Vec<u64>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            config_hash: config_hash(config),
            seeds,
            outputs: BTreeMap::new(),
            eval: None,
            losses: None,
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(path)
    }
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Writes `contents` under `dir` and records it in the manifest.
pub fn emit(dir: &Path, name: &str, contents: &str, manifest: &mut Manifest) -> CliResult<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    manifest.outputs.insert(name.to_string(), path.clone());
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stddev_is_sample_stddev() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.2909944487358056).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn hash_tracks_config() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.relevance.depth = 3;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
