//! The three trainable systems built around a pretrained backbone: Hyper-X,
//! full fine-tuning, and the MAD-X adapter stack.

use std::collections::BTreeMap;

use numcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterProvider, Census, MadxStack, StaticAdapters};
use crate::backbone::{Backbone, MaskedTokens, Mode, Pretrained, TokenBatch};
use crate::error::{HxError, Result};
use crate::hypernet::{HyperAdapters, HyperNet, HypernetConfig, SourceRegistry};
use crate::synthdata::{BIO_LABELS, CATEGORY_LABELS};

pub const TASK_POS: &str = "pos";
pub const TASK_NER: &str = "ner";
pub const TASK_MLM: &str = "mlm";
/// The downstream tasks, in registration order.
pub const DOWNSTREAM_TASKS: [&str; 2] = [TASK_POS, TASK_NER];

/// Label set of a downstream task.
pub fn task_labels(task: &str) -> Result<Vec<String>> {
    match task {
        TASK_POS => Ok(CATEGORY_LABELS.iter().map(|s| s.to_string()).collect()),
        TASK_NER => Ok(BIO_LABELS.iter().map(|s| s.to_string()).collect()),
        other => Err(HxError::UnknownSource(format!("task {other}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Hyperx,
    FullFinetune,
    Madx,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Hyperx => "hyperx",
            SystemKind::FullFinetune => "full_finetune",
            SystemKind::Madx => "madx",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hyperx" => Ok(Self::Hyperx),
            "full_finetune" => Ok(Self::FullFinetune),
            "madx" => Ok(Self::Madx),
            other => Err(HxError::Usage(format!("unknown system {other:?} (hyperx, full_finetune, madx)"))),
        }
    }
}

/// Token classification head `head.{task}.{w|b}`.
#[derive(Debug, Clone)]
pub struct Head {
    pub labels: Vec<String>,
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    pub fn register<R: Rng>(store: &mut ParamStore, name: &str, labels: Vec<String>, hidden: usize, rng: &mut R) -> Result<Self> {
        let n = labels.len();
        let w = store.add(format!("head.{name}.w"), Tensor::randn(&[hidden, n], 0.02, rng).with_requires_grad(true))?;
        let b = store.add(format!("head.{name}.b"), Tensor::zeros(&[n]).with_requires_grad(true))?;
        Ok(Self { labels, w, b })
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// A sentence as token ids with one label index per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedExample {
    pub ids: Vec<u32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MadxConfig {
    pub language_bottleneck: usize,
    pub task_bottleneck: usize,
}

impl Default for MadxConfig {
    fn default() -> Self {
        // 256:48 in the original, scaled with the desk bottleneck of 16
        Self { language_bottleneck: 16, task_bottleneck: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub kind: SystemKind,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub heads: BTreeMap<String, Head>,
    pub hypernet: Option<HyperNet>,
    pub language_adapters: BTreeMap<String, StaticAdapters>,
    pub task_adapters: BTreeMap<String, StaticAdapters>,
}

impl Model {
    fn with_heads<R: Rng>(kind: SystemKind, pre: &Pretrained, tasks: &[&str], rng: &mut R) -> Result<Self> {
        let mut store = pre.store.clone();
        let mut heads = BTreeMap::new();
        for &t in tasks {
            heads.insert(t.to_string(), Head::register(&mut store, t, task_labels(t)?, pre.backbone.config.hidden, rng)?);
        }
        Ok(Self {
            kind,
            store,
            backbone: pre.backbone.clone(),
            heads,
            hypernet: None,
            language_adapters: BTreeMap::new(),
            task_adapters: BTreeMap::new(),
        })
    }

    /// Hyper-X over a frozen backbone with trainable layer norms. Every
    /// language in `languages` gets an embedding; MLM is a registered task.
    pub fn hyperx<R: Rng>(pre: &Pretrained, languages: &[String], config: HypernetConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::with_heads(SystemKind::Hyperx, pre, &DOWNSTREAM_TASKS, rng)?;
        let mut registry = SourceRegistry::new();
        for t in DOWNSTREAM_TASKS.iter().chain([&TASK_MLM]) {
            registry.register_task(t)?;
        }
        for l in languages {
            registry.register_language(l)?;
        }
        let c = &m.backbone.config;
        let net = HyperNet::new(&mut m.store, registry, config, c.num_layers, c.hidden, rng)?;
        m.backbone.freeze(&mut m.store, true);
        m.hypernet = Some(net);
        Ok(m)
    }

    /// Every backbone weight trainable, no adapters.
    pub fn full_finetune<R: Rng>(pre: &Pretrained, rng: &mut R) -> Result<Self> {
        let mut m = Self::with_heads(SystemKind::FullFinetune, pre, &DOWNSTREAM_TASKS, rng)?;
        m.backbone.unfreeze(&mut m.store);
        Ok(m)
    }

    /// Frozen backbone with one language adapter per language and one task
    /// adapter per downstream task, trained on `task_language`.
    pub fn madx<R: Rng>(pre: &Pretrained, languages: &[String], task_language: &str, config: &MadxConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::with_heads(SystemKind::Madx, pre, &DOWNSTREAM_TASKS, rng)?;
        m.backbone.freeze(&mut m.store, false);
        let c = m.backbone.config.clone();
        for l in languages {
            let a = StaticAdapters::register(&mut m.store, TASK_MLM, l, c.num_layers, c.hidden, config.language_bottleneck, rng)?;
            m.language_adapters.insert(l.clone(), a);
        }
        for t in DOWNSTREAM_TASKS {
            let a = StaticAdapters::register(&mut m.store, t, task_language, c.num_layers, c.hidden, config.task_bottleneck, rng)?;
            m.task_adapters.insert(t.to_string(), a);
        }
        Ok(m)
    }

    pub fn hidden(&self) -> usize {
        self.backbone.config.hidden
    }

    pub fn census(&self) -> Census {
        Census::of(&self.store)
    }

    pub fn head(&self, task: &str) -> Result<&Head> {
        self.heads.get(task).ok_or_else(|| HxError::UnknownSource(format!("task {task}")))
    }

    /// Whether this model can produce adapters for (task, language).
    pub fn check_source(&self, task: &str, language: &str) -> Result<()> {
        match self.kind {
            SystemKind::Hyperx => {
                let net = self.hypernet.as_ref().expect("hyperx has a hypernetwork");
                net.registry.task_id(task)?;
                net.registry.language_id(language)?;
            }
            SystemKind::Madx => {
                if !self.language_adapters.contains_key(language) {
                    return Err(HxError::UnknownSource(format!("language {language}")));
                }
            }
            SystemKind::FullFinetune => {}
        }
        if task != TASK_MLM {
            self.head(task)?;
        }
        Ok(())
    }

    fn with_provider<T>(&self, task: &str, language: &str, f: impl FnOnce(Option<&dyn AdapterProvider>) -> Result<T>) -> Result<T> {
        self.check_source(task, language)?;
        match self.kind {
            SystemKind::FullFinetune => f(None),
            SystemKind::Hyperx => {
                let net = self.hypernet.as_ref().expect("hyperx has a hypernetwork");
                let p = HyperAdapters { net, task: net.registry.task_id(task)?, language: net.registry.language_id(language)? };
                f(Some(&p))
            }
            SystemKind::Madx => {
                let stack = MadxStack {
                    language: &self.language_adapters[language],
                    task: if task == TASK_MLM { None } else { self.task_adapters.get(task) },
                };
                f(Some(&stack))
            }
        }
    }

    /// Per-token logits `[tokens, labels]` for every non-padding position.
    pub fn tag_logits<'a>(&'a self, tape: &mut Tape<'a>, task: &str, language: &str, batch: &TokenBatch, mode: &mut Mode) -> Result<Var> {
        self.tag_logits_with_head(tape, task, task, language, batch, mode)
    }

    /// Like [`Model::tag_logits`] but reading out through the head `head`
    /// while generating adapters for `task`.
    pub fn tag_logits_with_head<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        task: &str,
        head: &str,
        language: &str,
        batch: &TokenBatch,
        mode: &mut Mode,
    ) -> Result<Var> {
        let h = self.head(head)?;
        let layers = self.with_provider(task, language, |p| self.backbone.encode(tape, &self.store, batch, p, mode))?;
        let last = *layers.last().expect("at least one layer");
        let x = tape.gather(last, &batch.positions())?;
        let (w, b) = (tape.param(&self.store, h.w), tape.param(&self.store, h.b));
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    pub fn tag_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        task: &str,
        head: &str,
        language: &str,
        examples: &[&TaggedExample],
        mode: &mut Mode,
    ) -> Result<Var> {
        let seqs: Vec<&[u32]> = examples.iter().map(|e| e.ids.as_slice()).collect();
        let batch = TokenBatch::new(&seqs)?;
        let targets: Vec<usize> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
        let logits = self.tag_logits_with_head(tape, task, head, language, &batch, mode)?;
        Ok(tape.cross_entropy(logits, &targets)?)
    }

    pub fn mlm_loss<'a>(&'a self, tape: &mut Tape<'a>, language: &str, masked: &MaskedTokens, mode: &mut Mode) -> Result<Var> {
        self.with_provider(TASK_MLM, language, |p| self.backbone.mlm_loss(tape, &self.store, masked, p, mode))
    }

    /// Predicted label indices per sentence.
    pub fn predict(&self, task: &str, head: &str, language: &str, seqs: &[&[u32]], batch_size: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            let batch = TokenBatch::new(chunk)?;
            let mut tape = Tape::new();
            let logits = self.tag_logits_with_head(&mut tape, task, head, language, &batch, &mut Mode::Eval)?;
            let n = tape.shape(logits)[1];
            let mut rows = tape.value(logits).chunks(n).map(|r| {
                r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best })
            });
            for s in chunk {
                out.push(rows.by_ref().take(s.len()).collect());
            }
        }
        Ok(out)
    }

    /// Byte image of the backbone's non-layer-norm weights.
    pub fn backbone_fingerprint(&self) -> Vec<u8> {
        self.backbone.frozen_fingerprint(&self.store)
    }

    /// Byte image of one language's embedding row (Hyper-X only).
    pub fn language_embedding(&self, language: &str) -> Result<Vec<f64>> {
        let net = self.hypernet.as_ref().ok_or_else(|| HxError::Usage("model has no hypernetwork".into()))?;
        let i = net.registry.language_id(language)?;
        Ok(self.store.get(net.lang_emb()).row(i).to_vec())
    }

    /// Adds a fresh head under `name` and freezes everything else.
    pub fn replace_head_only<R: Rng>(&mut self, name: &str, labels: Vec<String>, rng: &mut R) -> Result<()> {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_trainable(id, false);
        }
        let hidden = self.hidden();
        let head = Head::register(&mut self.store, name, labels, hidden, rng)?;
        self.heads.insert(name.to_string(), head);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_pretrained() -> Pretrained {
        let cfg = BackboneConfig { num_layers: 2, hidden: 8, num_heads: 2, ff_dim: 16, vocab_size: 30, max_len: 10, dropout: 0.0 };
        let mut store = ParamStore::new();
        let mut backbone = Backbone::init(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        backbone.freeze(&mut store, false);
        Pretrained { store, backbone, loss_curve: vec![], initial_loss: 0.0, final_loss: 0.0, corpus_hash: String::new() }
    }

    fn langs() -> Vec<String> {
        vec!["en".into(), "u1".into()]
    }

    #[test]
    fn trainable_sets() {
        let pre = tiny_pretrained();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hx = Model::hyperx(&pre, &langs(), HypernetConfig { bottleneck: 2, ..Default::default() }, &mut rng).unwrap();
        let c = hx.census();
        assert_eq!(c.get("backbone").trainable, 0);
        assert!(c.get("layer_norm").trainable > 0);
        let ft = Model::full_finetune(&pre, &mut rng).unwrap();
        assert_eq!(ft.census().get("backbone").frozen, 0);
        let mx = Model::madx(&pre, &langs(), "en", &MadxConfig { language_bottleneck: 4, task_bottleneck: 2 }, &mut rng).unwrap();
        let c = mx.census();
        assert_eq!(c.get("backbone").trainable + c.get("layer_norm").trainable, 0);
        // two language stacks at b=4 plus two task stacks at b=2, over two layers
        let per = |b: usize| 2 * (2 * 8 * b + b + 8);
        assert_eq!(c.get("adapters").trainable, 2 * per(4) + 2 * per(2));
    }

    #[test]
    fn unknown_sources() {
        let pre = tiny_pretrained();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hx = Model::hyperx(&pre, &langs(), HypernetConfig { bottleneck: 2, ..Default::default() }, &mut rng).unwrap();
        assert!(matches!(hx.check_source("pos", "zz"), Err(HxError::UnknownSource(_))));
        assert!(matches!(hx.check_source("dep", "en"), Err(HxError::UnknownSource(_))));
        assert!(hx.check_source("ner", "u1").is_ok());
    }

    #[test]
    fn predictions_align_with_lengths() {
        let pre = tiny_pretrained();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hx = Model::hyperx(&pre, &langs(), HypernetConfig { bottleneck: 2, ..Default::default() }, &mut rng).unwrap();
        let a: Vec<u32> = vec![3, 4, 5];
        let b: Vec<u32> = vec![6];
        let p = hx.predict("pos", "pos", "en", &[&a, &b, &a], 2).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 1, 3]);
        assert!(p.iter().flatten().all(|&l| l < 8));
    }
}
