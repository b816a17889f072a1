//! Compact post-LN transformer encoder pretrained with masked language
//! modelling, then frozen for adaptation.
//!
//! Parameter names are stable dot-delimited paths (`layer.2.ffn.w1`); layer
//! norms are the only names containing `.ln.`.

use std::collections::BTreeSet;

use numcore::{adam_step, AdamConfig, LrSchedule, OptimizerState, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterProvider;
use crate::error::{HxError, Result};
use crate::synthdata::{fnv1a, AnnotatedSentence, Vocab, MASK_ID, NUM_SPECIAL, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { num_layers: 4, hidden: 64, num_heads: 4, ff_dim: 256, vocab_size: 2048, max_len: 64, dropout: 0.1 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return Err(HxError::Config("backbone dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(HxError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HxError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size <= NUM_SPECIAL as usize {
            return Err(HxError::Config("vocabulary too small".into()));
        }
        Ok(())
    }
}

/// Forward-pass mode. Dropout only fires in training.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Right-padded batch of token ids in row-major `[batch, seq]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(seqs: &[&[u32]]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(HxError::DegenerateBatch("empty batch or empty sequence".into()));
        }
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD_ID; seqs.len() * seq];
        let mut mask = vec![false; seqs.len() * seq];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * seq..b * seq + s.len()].copy_from_slice(s);
            mask[b * seq..b * seq + s.len()].iter_mut().for_each(|m| *m = true);
        }
        Ok(Self { ids, mask, batch: seqs.len(), seq, lengths: seqs.iter().map(|s| s.len()).collect() })
    }

    /// Flat indices of non-padding positions.
    pub fn positions(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    attn_ln_g: ParamId,
    attn_ln_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ffn_ln_g: ParamId,
    ffn_ln_b: ParamId,
}

/// Handles to a backbone's parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    token_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
    mlm_w: ParamId,
    mlm_b: ParamId,
    frozen: bool,
}

pub fn is_layer_norm(name: &str) -> bool {
    name.contains(".ln.")
}

fn parameter_shapes(c: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (c.hidden, c.ff_dim);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![c.vocab_size, h]),
        ("embeddings.position".to_string(), vec![c.max_len, h]),
        ("embeddings.ln.gamma".to_string(), vec![h]),
        ("embeddings.ln.beta".to_string(), vec![h]),
    ];
    for i in 0..c.num_layers {
        let p = |s: &str| format!("layer.{i}.{s}");
        out.extend([
            (p("attn.wq"), vec![h, h]),
            (p("attn.bq"), vec![h]),
            (p("attn.wk"), vec![h, h]),
            (p("attn.bk"), vec![h]),
            (p("attn.wv"), vec![h, h]),
            (p("attn.bv"), vec![h]),
            (p("attn.wo"), vec![h, h]),
            (p("attn.bo"), vec![h]),
            (p("attn.ln.gamma"), vec![h]),
            (p("attn.ln.beta"), vec![h]),
            (p("ffn.w1"), vec![h, f]),
            (p("ffn.b1"), vec![f]),
            (p("ffn.w2"), vec![f, h]),
            (p("ffn.b2"), vec![h]),
            (p("ffn.ln.gamma"), vec![h]),
            (p("ffn.ln.beta"), vec![h]),
        ]);
    }
    out.push(("mlm.w".to_string(), vec![h, c.vocab_size]));
    out.push(("mlm.b".to_string(), vec![c.vocab_size]));
    out
}

impl Backbone {
    /// Adds freshly initialised backbone parameters to `store`.
    pub fn init<R: Rng>(store: &mut ParamStore, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        for (name, shape) in parameter_shapes(&config) {
            let t = if name.ends_with("gamma") {
                Tensor::ones(&shape)
            } else if shape.len() == 1 || name.ends_with("beta") {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, 0.02, rng)
            };
            store.add(name, t.with_requires_grad(true))?;
        }
        Self::attach(store, config)
    }

    /// Resolves handles for a backbone whose parameters are already in `store`.
    pub fn attach(store: &ParamStore, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        for (name, shape) in parameter_shapes(&config) {
            let t = store.by_name(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(HxError::Config(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        let id = |n: &str| store.id(n);
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = |s: &str| store.id(&format!("layer.{i}.{s}"));
                Ok(LayerIds {
                    wq: p("attn.wq")?,
                    bq: p("attn.bq")?,
                    wk: p("attn.wk")?,
                    bk: p("attn.bk")?,
                    wv: p("attn.wv")?,
                    bv: p("attn.bv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    attn_ln_g: p("attn.ln.gamma")?,
                    attn_ln_b: p("attn.ln.beta")?,
                    w1: p("ffn.w1")?,
                    b1: p("ffn.b1")?,
                    w2: p("ffn.w2")?,
                    b2: p("ffn.b2")?,
                    ffn_ln_g: p("ffn.ln.gamma")?,
                    ffn_ln_b: p("ffn.ln.beta")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let frozen = parameter_shapes(&config)
            .iter()
            .all(|(n, _)| is_layer_norm(n) || !store.by_name(n).map(|t| t.requires_grad()).unwrap_or(false));
        Ok(Self {
            token_emb: id("embeddings.token")?,
            pos_emb: id("embeddings.position")?,
            emb_ln_g: id("embeddings.ln.gamma")?,
            emb_ln_b: id("embeddings.ln.beta")?,
            layers,
            mlm_w: id("mlm.w")?,
            mlm_b: id("mlm.b")?,
            config,
            frozen,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        parameter_shapes(&self.config).iter().map(|(n, _)| store.id(n).expect("attached")).collect()
    }

    pub fn layer_norm_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        self.param_ids(store).into_iter().filter(|&id| is_layer_norm(store.name(id))).collect()
    }

    pub fn non_layer_norm_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        self.param_ids(store).into_iter().filter(|&id| !is_layer_norm(store.name(id))).collect()
    }

    /// Freezes every backbone weight; layer norms stay trainable when asked.
    pub fn freeze(&mut self, store: &mut ParamStore, train_layer_norms: bool) {
        for id in self.param_ids(store) {
            let ln = is_layer_norm(store.name(id));
            store.set_trainable(id, ln && train_layer_norms);
        }
        self.frozen = true;
    }

    pub fn unfreeze(&mut self, store: &mut ParamStore) {
        for id in self.param_ids(store) {
            store.set_trainable(id, true);
        }
        self.frozen = false;
    }

    /// Byte image of all non-layer-norm weights, for freeze checks.
    pub fn frozen_fingerprint(&self, store: &ParamStore) -> Vec<u8> {
        self.non_layer_norm_ids(store).into_iter().flat_map(|id| store.get(id).to_le_bytes()).collect()
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if let Some(&bad) = batch.ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(HxError::Vocabulary { id: bad, vocab: self.config.vocab_size });
        }
        if batch.seq > self.config.max_len {
            return Err(HxError::Truncation { len: batch.seq, max: self.config.max_len });
        }
        Ok(())
    }

    fn dropout<'a>(&self, tape: &mut Tape<'a>, x: Var, mode: &mut Mode) -> Result<Var> {
        match mode {
            Mode::Train(rng) if self.config.dropout > 0.0 => Ok(tape.dropout(x, self.config.dropout, *rng)?),
            _ => Ok(x),
        }
    }

    fn affine<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (tape.param(store, w), tape.param(store, b));
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    /// Runs the encoder, returning each layer's output as `[batch*seq, hidden]`.
    ///
    /// With an adapter provider, every layer's output passes through that
    /// layer's adapter before feeding the next layer.
    pub fn encode<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        batch: &TokenBatch,
        adapters: Option<&dyn AdapterProvider>,
        mode: &mut Mode,
    ) -> Result<Vec<Var>> {
        self.check_batch(batch)?;
        let ids: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let tok = tape.param(store, self.token_emb);
        let pos = tape.param(store, self.pos_emb);
        let te = tape.gather(tok, &ids)?;
        let pe = tape.gather(pos, &positions)?;
        let x = tape.add(te, pe)?;
        let (g, b) = (tape.param(store, self.emb_ln_g), tape.param(store, self.emb_ln_b));
        let x = tape.layer_norm(x, g, b)?;
        let mut x = self.dropout(tape, x, mode)?;

        let mut outputs = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let q = Self::affine(tape, store, x, l.wq, l.bq)?;
            let k = Self::affine(tape, store, x, l.wk, l.bk)?;
            let v = Self::affine(tape, store, x, l.wv, l.bv)?;
            let att = tape.attention(q, k, v, batch.batch, batch.seq, self.config.num_heads, &batch.mask)?;
            let att = Self::affine(tape, store, att, l.wo, l.bo)?;
            let att = self.dropout(tape, att, mode)?;
            let res = tape.add(x, att)?;
            let (g, b) = (tape.param(store, l.attn_ln_g), tape.param(store, l.attn_ln_b));
            let a = tape.layer_norm(res, g, b)?;

            let f = Self::affine(tape, store, a, l.w1, l.b1)?;
            let f = tape.gelu(f)?;
            let f = Self::affine(tape, store, f, l.w2, l.b2)?;
            let f = self.dropout(tape, f, mode)?;
            let res = tape.add(a, f)?;
            let (g, b) = (tape.param(store, l.ffn_ln_g), tape.param(store, l.ffn_ln_b));
            let mut out = tape.layer_norm(res, g, b)?;
            if let Some(p) = adapters {
                out = p.apply(tape, store, i, out)?;
            }
            outputs.push(out);
            x = out;
        }
        Ok(outputs)
    }

    /// MLM logits for selected flat positions of the final layer.
    pub fn mlm_logits<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, hidden: Var, positions: &[usize]) -> Result<Var> {
        let h = tape.gather(hidden, positions)?;
        Self::affine(tape, store, h, self.mlm_w, self.mlm_b)
    }

    /// Masked-LM loss over the masked positions only.
    pub fn mlm_loss<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        masked: &MaskedTokens,
        adapters: Option<&dyn AdapterProvider>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let layers = self.encode(tape, store, &masked.inputs, adapters, mode)?;
        let last = *layers.last().expect("at least one layer");
        let logits = self.mlm_logits(tape, store, last, &masked.positions)?;
        Ok(tape.cross_entropy(logits, &masked.targets)?)
    }
}

/// A batch with some positions replaced for masked-LM training.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTokens {
    pub inputs: TokenBatch,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Selects positions with probability `rate` (at least one per batch) and
/// applies the 80/10/10 mask/random/keep replacement.
pub fn mask_tokens<R: Rng>(batch: &TokenBatch, rate: f64, vocab_size: usize, rng: &mut R) -> Result<MaskedTokens> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(HxError::Config(format!("mask rate {rate} must lie strictly between 0 and 1")));
    }
    let candidates = batch.positions();
    if candidates.is_empty() {
        return Err(HxError::DegenerateBatch("no maskable positions".into()));
    }
    let mut positions: Vec<usize> = candidates.iter().copied().filter(|_| rng.gen::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(*candidates.choose(rng).expect("non-empty"));
    }
    let mut inputs = batch.clone();
    let mut targets = Vec::with_capacity(positions.len());
    for &p in &positions {
        targets.push(batch.ids[p] as usize);
        let r: f64 = rng.gen();
        if r < 0.8 {
            inputs.ids[p] = MASK_ID;
        } else if r < 0.9 {
            inputs.ids[p] = rng.gen_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    Ok(MaskedTokens { inputs, positions, targets })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub mask_rate: f64,
    pub sentences_per_language: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 32, lr: 1e-3, warmup: 500, mask_rate: 0.15, sentences_per_language: 2000 }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub store: ParamStore,
    pub backbone: Backbone,
    /// Training loss at every step.
    pub loss_curve: Vec<f64>,
    /// Held-out MLM loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub corpus_hash: String,
}

pub fn corpus_hash(corpus: &[AnnotatedSentence]) -> String {
    let h = fnv1a(corpus.iter().flat_map(|s| {
        s.language.bytes().chain([0xff]).chain(s.tokens.iter().flat_map(|t| t.bytes().chain([0u8]))).chain([0xfe])
    }));
    format!("{h:016x}")
}

/// Mean MLM loss over fixed evaluation batches (deterministic masks).
pub fn evaluate_mlm(
    backbone: &Backbone,
    store: &ParamStore,
    batches: &[TokenBatch],
    mask_rate: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for b in batches {
        let masked = mask_tokens(b, mask_rate, backbone.config.vocab_size, &mut rng)?;
        let mut tape = Tape::new();
        let l = backbone.mlm_loss(&mut tape, store, &masked, None, &mut Mode::Eval)?;
        total += tape.scalar(l);
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Pretrains a fresh backbone with MLM on `corpus`, which must contain
/// only languages listed in `seen`. The result is frozen.
pub fn pretrain(
    corpus: &[AnnotatedSentence],
    seen: &BTreeSet<String>,
    vocab: &Vocab,
    config: BackboneConfig,
    opts: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    if let Some(s) = corpus.iter().find(|s| !seen.contains(&s.language)) {
        return Err(HxError::Contamination(s.language.clone()));
    }
    if corpus.is_empty() {
        return Err(HxError::DegenerateBatch("empty pretraining corpus".into()));
    }
    if vocab.len() != config.vocab_size {
        return Err(HxError::Config(format!(
            "vocabulary has {} entries but backbone expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let encoded: Vec<Vec<u32>> = corpus
        .iter()
        .map(|s| {
            let mut ids = vocab.encode(&s.tokens).0;
            ids.truncate(config.max_len);
            ids
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut backbone = Backbone::init(&mut store, config, &mut rng)?;

    // held-out evaluation batches: a fixed slice of the corpus
    let eval_idx: Vec<usize> = (0..encoded.len()).step_by((encoded.len() / 64).max(1)).take(64).collect();
    let eval_batches: Vec<TokenBatch> = eval_idx
        .chunks(16)
        .map(|c| TokenBatch::new(&c.iter().map(|&i| encoded[i].as_slice()).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let eval_seed = seed ^ 0xe7a1;
    let initial_loss = evaluate_mlm(&backbone, &store, &eval_batches, opts.mask_rate, eval_seed)?;

    let schedule = LrSchedule::WarmupLinear { peak: opts.lr, warmup: opts.warmup, total: opts.steps };
    let mut state = OptimizerState::new(&store, AdamConfig::default(), schedule);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut loss_curve = Vec::with_capacity(opts.steps as usize);
    for step in 0..opts.steps {
        let mut seqs = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            seqs.push(encoded[order[cursor]].as_slice());
            cursor += 1;
        }
        let batch = TokenBatch::new(&seqs)?;
        let masked = mask_tokens(&batch, opts.mask_rate, config_vocab(&backbone), &mut rng)?;
        store.zero_grad();
        let (loss, grads) = {
            let mut tape = Tape::new();
            let l = backbone.mlm_loss(&mut tape, &store, &masked, None, &mut Mode::Train(&mut rng))?;
            (tape.scalar(l), tape.backward(l)?)
        };
        if !loss.is_finite() {
            return Err(HxError::Diverged { step, detail: "non-finite pretraining loss".into() });
        }
        store.accumulate(&grads)?;
        let lr = state.scheduled_lr();
        adam_step(&mut store, &mut state, lr)?;
        loss_curve.push(loss);
    }
    backbone.freeze(&mut store, false);
    let final_loss = evaluate_mlm(&backbone, &store, &eval_batches, opts.mask_rate, eval_seed)?;
    Ok(Pretrained { store, backbone, loss_curve, initial_loss, final_loss, corpus_hash: corpus_hash(corpus) })
}

fn config_vocab(b: &Backbone) -> usize {
    b.config.vocab_size
}
