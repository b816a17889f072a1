//! Experiment configuration file: TOML with sections `[backbone]`,
//! `[data]`, `[hypernet]`, `[regime]` and `[output]`, plus a top-level
//! `seed`. Unknown keys are rejected with a spelling suggestion.
//!
//! Seed derivation: the language grid uses `seed`, backbone pretraining
//! `seed ^ 0x5052`, and each training run `seed + run offset` as chosen by
//! the caller (0 for a single run).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::error::{HxError, Result};
use crate::hypernet::HypernetConfig;
use crate::model::MadxConfig;
use crate::trainer::{DataConfig, FewshotConfig, TrainConfig};

pub const SEED_ENV: &str = "HYPERX_SEED";
pub const PRETRAIN_SEED_OFFSET: u64 = 0x5052;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSection {
    #[serde(flatten)]
    pub model: BackboneConfig,
    pub pretrain: PretrainConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeSection {
    pub system: String,
    pub regime: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub madx: MadxConfig,
    pub fewshot: FewshotConfig,
}

impl Default for RegimeSection {
    fn default() -> Self {
        Self {
            system: "hyperx".into(),
            regime: "mixed_language".into(),
            partition: None,
            task: None,
            train: TrainConfig::default(),
            madx: MadxConfig::default(),
            fewshot: FewshotConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub name: String,
    /// Any of `jsonl`, `csv`, `table`.
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), name: "desk".into(), formats: vec!["jsonl".into(), "csv".into(), "table".into()] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneSection,
    pub data: DataConfig,
    pub hypernet: HypernetConfig,
    pub regime: RegimeSection,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            backbone: BackboneSection::default(),
            data: DataConfig::default(),
            hypernet: HypernetConfig::default(),
            regime: RegimeSection::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Keys that may appear but are absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 2] = ["regime.partition", "regime.task"];

fn collect_keys(prefix: &str, table: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let toml::Value::Table(t) = v {
            collect_keys(&path, t, out);
        }
        out.push(path);
    }
}

fn suggestion(unknown: &str, known: &[String]) -> Option<String> {
    let (parent, leaf) = unknown.rsplit_once('.').unwrap_or(("", unknown));
    let leaf_of = |k: &str| k.rsplit_once('.').map_or(k, |(_, l)| l).to_string();
    let score = |k: &String| strsim::levenshtein(leaf, &leaf_of(k));
    let siblings: Vec<&String> = known.iter().filter(|k| k.rsplit_once('.').map_or("", |(p, _)| p) == parent).collect();
    let best_sibling = siblings.iter().copied().min_by_key(|k| score(k)).filter(|k| score(k) <= 3);
    best_sibling.or_else(|| known.iter().min_by_key(|k| score(k)).filter(|k| score(k) <= 2)).cloned()
}

impl ExperimentConfig {
    /// Parses TOML, rejecting every unknown key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| HxError::Config(e.to_string()))?;
        let defaults = toml::Table::try_from(Self::default()).map_err(|e| HxError::Config(e.to_string()))?;
        let mut known = Vec::new();
        collect_keys("", &defaults, &mut known);
        known.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
        let mut given = Vec::new();
        collect_keys("", &table, &mut given);
        let unknown: Vec<String> = given
            .iter()
            .filter(|k| !known.contains(k))
            .map(|k| match suggestion(k, &known) {
                Some(s) => format!("{k} (did you mean {s}?)"),
                None => k.clone(),
            })
            .collect();
        if !unknown.is_empty() {
            return Err(HxError::Config(format!("unknown configuration keys: {}", unknown.join(", "))));
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| HxError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HxError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `HYPERX_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().map_err(|_| HxError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            log::info!("{SEED_ENV} overrides seed {} with {seed}", self.seed);
            self.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.model.validate()?;
        self.hypernet.validate()?;
        let formats = ["jsonl", "csv", "table"];
        if let Some(f) = self.output.formats.iter().find(|f| !formats.contains(&f.as_str())) {
            return Err(HxError::Config(format!("unknown output format {f:?}")));
        }
        if self.data.pivot.is_empty() {
            return Err(HxError::Config("pivot language name is empty".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HxError::Config(e.to_string()))
    }
}
