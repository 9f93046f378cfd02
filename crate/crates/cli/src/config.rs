use std::path::Path;

use drl::training::TrainConfig;
use toml::{Table, Value};

use crate::args::Common;
use crate::{CliError, CliResult};

/// Resolves the run config: defaults, then the config file, then `--set`
/// overrides, then dedicated flags.
pub fn resolve(common: &Common) -> CliResult<TrainConfig> {
    let mut table = match &common.config {
        Some(path) => load_table(path)?,
        None => Table::new(),
    };
    for item in &common.overrides {
        apply_override(&mut table, item)?;
    }
    let text = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
    let mut cfg: TrainConfig = toml::from_str(&text).map_err(|e| CliError::Config(describe(&text, &e)))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(shots) = common.shots {
        cfg.train.shots = shots;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `section.key: message` when the error points at a single key.
fn describe(text: &str, err: &toml::de::Error) -> String {
    let Some(span) = err.span() else {
        return err.message().to_string();
    };
    let mut section = String::new();
    let mut key = None;
    let mut offset = 0;
    for line in text.lines() {
        let end = offset + line.len();
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
        } else if offset <= span.start && span.start <= end {
            key = trimmed.split('=').next().map(|k| k.trim().trim_matches('"').to_string());
            break;
        }
        offset = end + 1;
    }
    match key {
        Some(k) if section.is_empty() => format!("{k}: {}", err.message()),
        Some(k) => format!("{section}.{k}: {}", err.message()),
        None => err.message().to_string(),
    }
}

/// Reads a TOML config, or the `config` object of a run manifest (`.json`).
pub fn load_table(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg = manifest
            .get("config")
            .ok_or_else(|| CliError::Config(format!("{}: manifest has no `config`", path.display())))?;
        let cfg: TrainConfig = serde_json::from_value(cfg.clone())
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        return to_table(&cfg);
    }
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
}

pub fn to_table(cfg: &TrainConfig) -> CliResult<Table> {
    Table::try_from(cfg).map_err(|e| CliError::Other(e.to_string()))
}

/// Applies `section.key=value`. The value is read as a TOML literal and
/// falls back to a bare string, so `relevance.metric=cosine` works unquoted.
pub fn apply_override(table: &mut Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{item}` has an empty key")));
    }
    let value = parse_literal(raw.trim());
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: `{part}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
