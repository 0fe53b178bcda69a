//! Layered run configuration: compiled defaults, then a JSON config
//! file, then FCL_SEED, then command-line overrides. The resolved value
//! is snapshotted into each run directory and reloads to an equal
//! RunConfig.

use std::path::{Path, PathBuf};

use fcl_core::contrastive::ContrastiveConfig;
use fcl_core::corpus::ZipfCorpusConfig;
use fcl_core::error::{Error, Result};
use fcl_core::eval::EvalConfig;
use fcl_core::model::ModelConfig;
use fcl_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Directory receiving run artifacts (checkpoint, logs, reports).
    pub run_dir: PathBuf,
    /// Directory holding corpus and vocabulary files.
    pub corpus_dir: PathBuf,
    /// File stem shared by the corpus files, e.g. `zipf.train.src`.
    pub stem: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            run_dir: PathBuf::from("runs/default"),
            corpus_dir: PathBuf::from("corpus"),
            stem: "zipf".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; fills train.seed unless that key is set explicitly.
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: ZipfCorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            paths: PathsConfig::default(),
            corpus: ZipfCorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            contrastive: ContrastiveConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn corpus_file(&self, split: &str, side: &str) -> PathBuf {
        self.paths
            .corpus_dir
            .join(format!("{}.{split}.{side}", self.paths.stem))
    }

    pub fn vocab_file(&self, side: &str) -> PathBuf {
        self.paths
            .corpus_dir
            .join(format!("{}.{side}.vocab.tsv", self.paths.stem))
    }

    /// Write the fully resolved configuration into `dir/config.json`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        std::fs::write(dir.join("config.json"), json + "\n")?;
        Ok(())
    }

    /// Reload a snapshot; file values only, no environment consulted.
    pub fn load_snapshot(path: &Path) -> Result<RunConfig> {
        let mut overlay = json_object();
        merge_file(&mut overlay, path)?;
        finish(overlay)
    }
}

// ── merge machinery ─────────────────────────────────────────────────

fn json_object() -> Value {
    Value::Object(serde_json::Map::new())
}

fn deep_merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Insert `value` at a dotted path, creating objects along the way.
fn set_dotted(root: &mut Value, key: &str, value: Value) {
    let mut slot = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if !slot.is_object() {
            *slot = json_object();
        }
        let map = slot.as_object_mut().unwrap();
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return;
        }
        slot = map.entry(part.to_string()).or_insert_with(json_object);
    }
}

/// Reject keys that do not exist in the canonical default layout.
fn check_known(overlay: &Value, canonical: &Value, path: &str) -> Result<()> {
    let (Value::Object(o), Value::Object(c)) = (overlay, canonical) else {
        return Ok(());
    };
    for (k, v) in o {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match c.get(k) {
            None => return Err(Error::InvalidConfig(format!("unknown config key '{full}'"))),
            Some(cv) => check_known(v, cv, &full)?,
        }
    }
    Ok(())
}

/// Values parse as JSON when they can (numbers, booleans), otherwise
/// stay strings, so `--train.max_epochs 10` and `--objective fcl` both
/// land with the right type.
fn coerce(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// The contrastive strength and scale factor are commonly thought of as
/// training knobs; accept them under either namespace.
fn normalize_key(key: &str) -> &str {
    match key {
        "train.lambda" => "contrastive.lambda",
        "train.gamma" => "contrastive.gamma",
        k => k,
    }
}

fn merge_file(overlay: &mut Value, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Msg(format!("config file {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config file {}: {e}", path.display())))?;
    deep_merge(overlay, &v);
    Ok(())
}

fn finish(overlay: Value) -> Result<RunConfig> {
    let canonical = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    check_known(&overlay, &canonical, "")?;
    let mut merged = canonical;
    deep_merge(&mut merged, &overlay);
    // The global seed drives training unless train.seed was given.
    if overlay.pointer("/train/seed").is_none() {
        let seed = merged.get("seed").cloned().expect("seed key");
        set_dotted(&mut merged, "train.seed", seed);
    }
    serde_json::from_value(merged).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
}

/// Resolve the effective configuration. Precedence, lowest first:
/// defaults, config file, FCL_SEED (global seed only, skipped when a
/// seed override is present), command-line overrides.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut overlay = json_object();
    if let Some(path) = file {
        merge_file(&mut overlay, path)?;
    }
    if !overrides.iter().any(|(k, _)| k == "seed") {
        if let Ok(raw) = std::env::var("FCL_SEED") {
            let seed: u64 = raw.parse().map_err(|_| {
                Error::InvalidConfig(format!("FCL_SEED '{raw}' is not an unsigned integer"))
            })?;
            set_dotted(&mut overlay, "seed", Value::from(seed));
        }
    }
    for (key, raw) in overrides {
        set_dotted(&mut overlay, normalize_key(key), coerce(raw));
    }
    finish(overlay)
}
