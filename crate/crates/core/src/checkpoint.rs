//! On-disk layout of backbone checkpoints and training runs.
//!
//! A parameter directory holds one `HXT1` file per named parameter
//! (`{name}.hxt`) and an `index.json` listing names in store order. Flat
//! adapter vectors are never stored; generated adapters are rebuilt from the
//! hypernetwork, whose flat output order is D, d_bias, U, u_bias (each
//! row-major).
//!
//! ```text
//! {backbone dir}/manifest.json  loss_curve.json  params/
//! runs/{name}/manifest.json  metrics.jsonl  checkpoints/best/
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use numcore::io::{load_tensor, save_tensor};
use numcore::ParamStore;
use serde::{Deserialize, Serialize};

use crate::adapters::Census;
use crate::backbone::{Backbone, BackboneConfig, PretrainConfig, Pretrained};
use crate::error::{HxError, Result};
use crate::trainer::{MetricRecord, TaskLanguagePair};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
pub const PARAMS: &str = "params";
pub const LOSS_CURVE: &str = "loss_curve.json";
pub const BEST: &str = "checkpoints/best";

const INDEX: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Writes every parameter of `store` under `dir`.
pub fn save_params(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        save_tensor(&dir.join(format!("{name}.hxt")), t)?;
        index.push(IndexEntry { name: name.to_string(), shape: t.shape().to_vec(), trainable: t.requires_grad() });
    }
    fs::write(dir.join(INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Reads a parameter directory back into a fresh store.
pub fn load_params(dir: &Path) -> Result<ParamStore> {
    let index: Vec<IndexEntry> = read_json(&dir.join(INDEX))?;
    let mut store = ParamStore::new();
    for e in index {
        let t = load_tensor(&dir.join(format!("{}.hxt", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(HxError::Config(format!("{} has shape {:?}, index says {:?}", e.name, t.shape(), e.shape)));
        }
        store.add(e.name, t.with_requires_grad(e.trainable))?;
    }
    Ok(store)
}

/// Overwrites the values of `store` with every tensor found under `dir`.
/// Names missing from `store` are an error.
pub fn restore_params(dir: &Path, store: &mut ParamStore) -> Result<usize> {
    let saved = load_params(dir)?;
    for (_, name, t) in saved.iter() {
        let id = store.id(name)?;
        let trainable = store.get(id).requires_grad();
        store.assign(id, t.clone().with_requires_grad(trainable))?;
    }
    Ok(saved.len())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HxError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HxError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Short description of the source revision, or `unknown` outside git.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Creates `dir`, refusing to reuse an existing one.
pub fn create_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(HxError::Usage(format!("{} already exists; runs are write-once", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneManifest {
    pub config: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub seed: u64,
    pub steps: u64,
    pub corpus_hash: String,
    pub languages: Vec<String>,
    pub masking: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub git_describe: String,
}

pub fn masking_note(rate: f64) -> String {
    format!("rate {rate}; of masked positions 80% [MASK], 10% random token, 10% unchanged")
}

pub fn save_backbone(dir: &Path, pre: &Pretrained, manifest: &BackboneManifest) -> Result<()> {
    create_fresh_dir(dir)?;
    save_params(&dir.join(PARAMS), &pre.store)?;
    write_json(&dir.join(LOSS_CURVE), &pre.loss_curve)?;
    write_json(&dir.join(MANIFEST), manifest)
}

pub fn load_backbone(dir: &Path) -> Result<(Pretrained, BackboneManifest)> {
    let manifest: BackboneManifest = read_json(&dir.join(MANIFEST))?;
    let mut store = load_params(&dir.join(PARAMS))?;
    let mut backbone = Backbone::attach(&store, manifest.config.clone())?;
    backbone.freeze(&mut store, false);
    let loss_curve: Vec<f64> = read_json(&dir.join(LOSS_CURVE))?;
    let pre = Pretrained {
        store,
        backbone,
        loss_curve,
        initial_loss: manifest.initial_loss,
        final_loss: manifest.final_loss,
        corpus_hash: manifest.corpus_hash.clone(),
    };
    Ok((pre, manifest))
}

/// Frozen record of one training or few-shot run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub kind: String,
    pub system: String,
    pub regime: String,
    pub partition: Option<String>,
    pub task: Option<String>,
    pub seed: u64,
    pub git_describe: String,
    /// Fully resolved configuration file.
    pub config: String,
    pub backbone_dir: PathBuf,
    pub backbone_corpus_hash: String,
    pub masking: String,
    pub census: Census,
    pub train_pairs: Vec<TaskLanguagePair>,
    pub zero_shot_pairs: Vec<TaskLanguagePair>,
    pub best_step: u64,
    pub best_score: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub history: Vec<MetricRecord>,
    /// Extra fields of few-shot runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot: Option<FewshotRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotRecord {
    pub source_run: PathBuf,
    pub pair: TaskLanguagePair,
    pub k: usize,
    pub mode: String,
    pub head: String,
    pub sampled: Vec<usize>,
    pub score: f64,
    pub epoch_losses: Vec<f64>,
}

pub fn metrics_jsonl(history: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes a complete run directory. `dir` must not exist yet.
pub fn save_run(dir: &Path, manifest: &RunManifest, store: &ParamStore) -> Result<()> {
    create_fresh_dir(dir)?;
    save_params(&dir.join(BEST), store)?;
    fs::write(dir.join(METRICS), metrics_jsonl(&manifest.history)?)?;
    write_json(&dir.join(MANIFEST), manifest)
}

pub fn load_run_manifest(dir: &Path) -> Result<RunManifest> {
    read_json(&dir.join(MANIFEST))
}
