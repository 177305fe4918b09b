//! Run configuration from presets, `key = value` files and flags.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use shapeprior_core::training::TrainConfig;

use crate::Usage;

pub fn preset(name: &str) -> Result<TrainConfig> {
    match name {
        "toy" => Ok(TrainConfig::toy()),
        "paper" => Ok(TrainConfig::paper()),
        "tiny" => Ok(TrainConfig {
            net: shapeprior_core::network::NetConfig::tiny(),
            batch_size: 2,
            ..TrainConfig::toy()
        }),
        other => Err(anyhow!(Usage(format!(
            "--preset: unknown preset {other:?} (expected toy, paper or tiny)"
        )))),
    }
}

/// Reads `key = value` lines; blank lines and `#` comments are skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            anyhow!(Usage(format!(
                "{}:{}: expected key = value, found {line:?}",
                path.display(),
                i + 1
            )))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses a `--set key=value` flag.
pub fn parse_set(raw: &str) -> Result<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| anyhow!(Usage(format!("--set: expected key=value, found {raw:?}"))))
}

/// Applies pairs in order; unknown keys are usage errors naming the source.
pub fn apply(cfg: &mut TrainConfig, pairs: &[(String, String)], source: &str) -> Result<()> {
    for (k, v) in pairs {
        if k == "preset" {
            continue;
        }
        cfg.set(k, v)
            .map_err(|e| anyhow!(Usage(format!("{source}: {e}"))))?;
    }
    Ok(())
}

/// Seed from `PCSP_SEED`, used when neither flags nor the config file set
/// one.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("PCSP_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| anyhow!(Usage(format!("PCSP_SEED: not an integer: {v:?}")))),
        Err(_) => Ok(None),
    }
}
