//! Training regimes, partitions of the task-language grid, homogeneous
//! batch sampling, the main training loop, and few-shot fine-tuning.
//!
//! Seed offsets: batch order uses `seed`, masking `seed ^ 0x4d4c4d`,
//! dropout `seed ^ 0x44524f50`, few-shot sampling `seed ^ 0x4653`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use numcore::{adam_step, AdamConfig, LrSchedule, NumError, OptimizerState, ParamId, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{mask_tokens, Mode, TokenBatch};
use crate::error::{HxError, Result};
use crate::evalkit::{metric_for, score_examples};
use crate::model::{task_labels, Model, SystemKind, TaggedExample, DOWNSTREAM_TASKS, TASK_MLM};
use crate::synthdata::{AnnotatedSentence, GridConfig, LanguageGrid, Split, Vocab};

const MASK_SEED: u64 = 0x4d4c4d;
const DROPOUT_SEED: u64 = 0x4452_4f50;
const FEWSHOT_SEED: u64 = 0x4653;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskLanguagePair {
    pub task: String,
    pub language: String,
}

impl TaskLanguagePair {
    pub fn new(task: &str, language: &str) -> Self {
        Self { task: task.into(), language: language.into() }
    }
}

impl fmt::Display for TaskLanguagePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.task, self.language)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskData {
    pub train: Vec<TaggedExample>,
    pub dev: Vec<TaggedExample>,
    pub test: Vec<TaggedExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_languages: usize,
    pub num_unseen: usize,
    pub group_size: usize,
    pub group_share: f64,
    pub global_share: f64,
    pub name_share: f64,
    pub two_piece_rate: f64,
    pub pivot: String,
    pub train_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    /// Unlabelled sentences per language for backbone pretraining and the
    /// auxiliary MLM task.
    pub mlm_sentences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GridConfig::default();
        Self {
            num_languages: g.num_languages,
            num_unseen: g.num_unseen,
            group_size: g.group_size,
            group_share: g.group_share,
            global_share: g.global_share,
            name_share: g.name_share,
            two_piece_rate: g.two_piece_rate,
            pivot: g.pivot,
            train_sentences: 2000,
            dev_sentences: 200,
            test_sentences: 200,
            mlm_sentences: 2000,
        }
    }
}

impl DataConfig {
    pub fn grid_config(&self, vocab_size: usize) -> GridConfig {
        GridConfig {
            num_languages: self.num_languages,
            num_unseen: self.num_unseen,
            group_size: self.group_size,
            vocab_size,
            group_share: self.group_share,
            global_share: self.global_share,
            name_share: self.name_share,
            two_piece_rate: self.two_piece_rate,
            pivot: self.pivot.clone(),
            ..GridConfig::default()
        }
    }
}

/// Encodes sentences for one task.
pub fn to_examples(sentences: &[AnnotatedSentence], vocab: &Vocab, task: &str) -> Result<Vec<TaggedExample>> {
    let labels = task_labels(task)?;
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let tags = if task == DOWNSTREAM_TASKS[0] { &s.cat_tags } else { &s.bio_tags };
            if tags.len() != s.tokens.len() {
                return Err(HxError::Alignment(format!("sentence {i} of {} lacks {task} tags", s.language)));
            }
            let labels = tags
                .iter()
                .map(|t| labels.iter().position(|l| l == t).ok_or_else(|| HxError::Label { line: i, tag: t.clone() }))
                .collect::<Result<Vec<_>>>()?;
            Ok(TaggedExample { ids: vocab.encode(&s.tokens).0, labels })
        })
        .collect()
}

/// All encoded data of a grid.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub pivot: String,
    pub languages: Vec<String>,
    pub groups: BTreeMap<String, usize>,
    pub seen: BTreeSet<String>,
    pub tasks: BTreeMap<TaskLanguagePair, TaskData>,
    pub mlm: BTreeMap<String, Vec<Vec<u32>>>,
}

impl Datasets {
    pub fn from_grid(grid: &LanguageGrid, cfg: &DataConfig) -> Result<Self> {
        let mut tasks = BTreeMap::new();
        let mut mlm = BTreeMap::new();
        for lang in &grid.languages {
            let name = lang.name().to_string();
            let train = lang.sample_corpus(cfg.train_sentences.max(cfg.mlm_sentences), Split::Train)?;
            let dev = lang.sample_corpus(cfg.dev_sentences, Split::Dev)?;
            let test = lang.sample_corpus(cfg.test_sentences, Split::Test)?;
            for t in DOWNSTREAM_TASKS {
                tasks.insert(
                    TaskLanguagePair::new(t, &name),
                    TaskData {
                        train: to_examples(&train[..cfg.train_sentences], &grid.vocab, t)?,
                        dev: to_examples(&dev, &grid.vocab, t)?,
                        test: to_examples(&test, &grid.vocab, t)?,
                    },
                );
            }
            mlm.insert(name, train[..cfg.mlm_sentences].iter().map(|s| grid.vocab.encode(&s.tokens).0).collect());
        }
        Ok(Self {
            pivot: grid.pivot().to_string(),
            languages: grid.names(),
            groups: grid.groups().into_iter().collect(),
            seen: grid.names().into_iter().filter(|n| grid.seen(n)).collect(),
            tasks,
            mlm,
        })
    }

    pub fn pair(&self, task: &str, language: &str) -> Result<&TaskData> {
        self.tasks
            .get(&TaskLanguagePair::new(task, language))
            .ok_or_else(|| HxError::UnknownSource(format!("no data for ({task}, {language})")))
    }

    /// Number of training items a pair offers the sampler.
    pub fn train_size(&self, pair: &TaskLanguagePair) -> Result<usize> {
        if pair.task == TASK_MLM {
            self.mlm.get(&pair.language).map(Vec::len).ok_or_else(|| HxError::UnknownSource(format!("no MLM data for {}", pair.language)))
        } else {
            Ok(self.pair(&pair.task, &pair.language)?.train.len())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartitionId {
    A,
    B,
}

impl PartitionId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(HxError::Usage(format!("unknown partition {other:?} (A or B)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub id: PartitionId,
    pub train: BTreeSet<TaskLanguagePair>,
    /// Zero-shot pairs: the other partition's non-pivot training pairs.
    pub eval: BTreeSet<TaskLanguagePair>,
}

impl Partition {
    /// Languages with no downstream supervision in this partition.
    pub fn mlm_only_languages(&self, languages: &[String]) -> Vec<String> {
        languages.iter().filter(|l| !self.train.iter().any(|p| &p.language == *l)).cloned().collect()
    }
}

struct Cell {
    task: String,
    languages: Vec<String>,
}

/// Splits the downstream grid into two complementary partitions.
///
/// Assignment is per (relatedness group, task) cell, so a group never
/// supervises a task it is held out on; the pivot is supervised in both.
/// Among the most balanced assignments, those leaving an MLM-only language
/// in each partition and supervising every task in each partition beyond
/// the pivot are preferred; the seed picks among the remaining ties.
pub fn build_partitions(tasks: &[&str], groups: &BTreeMap<String, usize>, pivot: &str, seed: u64) -> Result<(Partition, Partition)> {
    if tasks.len() < 2 {
        return Err(HxError::Partition(format!("need at least two downstream tasks, got {}", tasks.len())));
    }
    if groups.len() < 2 || !groups.contains_key(pivot) {
        return Err(HxError::Partition("need the pivot and at least one other language".into()));
    }
    let mut by_group: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (l, g) in groups {
        if l != pivot {
            by_group.entry(*g).or_default().push(l.clone());
        }
    }
    let cells: Vec<Cell> = by_group
        .values()
        .flat_map(|langs| tasks.iter().map(move |t| Cell { task: t.to_string(), languages: langs.clone() }))
        .collect();
    if cells.len() < 2 {
        return Err(HxError::Partition("too few cells to form two partitions".into()));
    }
    let total: usize = cells.iter().map(|c| c.languages.len()).sum();
    let assignments: Vec<Vec<bool>> = if cells.len() <= 16 {
        (1..(1u32 << cells.len()) - 1).map(|m| (0..cells.len()).map(|i| m >> i & 1 == 1).collect()).collect()
    } else {
        // greedy: largest cells first onto the lighter side, in a seeded order
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.sort_by_key(|&i| std::cmp::Reverse(cells[i].languages.len()));
        let mut a = vec![false; cells.len()];
        let (mut na, mut nb) = (0, 0);
        for i in order {
            if na <= nb {
                a[i] = true;
                na += cells[i].languages.len();
            } else {
                nb += cells[i].languages.len();
            }
        }
        vec![a]
    };
    let size_a = |a: &[bool]| -> usize { cells.iter().zip(a).filter(|(_, &x)| x).map(|(c, _)| c.languages.len()).sum() };
    let imbalance = |a: &[bool]| -> usize { (2 * size_a(a)).abs_diff(total) };
    let best = assignments.iter().map(|a| imbalance(a)).min().expect("non-empty");
    let mut candidates: Vec<&Vec<bool>> = assignments.iter().filter(|a| imbalance(a) == best).collect();

    let langs_of = |a: &[bool], side: bool| -> BTreeSet<&str> {
        cells.iter().zip(a).filter(|(_, &x)| x == side).flat_map(|(c, _)| c.languages.iter().map(String::as_str)).collect()
    };
    let all_langs: BTreeSet<&str> = by_group.values().flatten().map(String::as_str).collect();
    let has_mlm_only = |a: &[bool]| [true, false].iter().all(|&side| langs_of(a, side).len() < all_langs.len());
    let covers_tasks = |a: &[bool]| {
        [true, false].iter().all(|&side| tasks.iter().all(|t| cells.iter().zip(a).any(|(c, &x)| x == side && c.task == *t)))
    };
    for pref in [&has_mlm_only as &dyn Fn(&[bool]) -> bool, &covers_tasks] {
        let kept: Vec<&Vec<bool>> = candidates.iter().copied().filter(|a| pref(a)).collect();
        if !kept.is_empty() {
            candidates = kept;
        }
    }
    let chosen = candidates[ChaCha8Rng::seed_from_u64(seed).gen_range(0..candidates.len())];

    let pivot_pairs: BTreeSet<TaskLanguagePair> = tasks.iter().map(|t| TaskLanguagePair::new(t, pivot)).collect();
    let side = |s: bool| -> BTreeSet<TaskLanguagePair> {
        cells
            .iter()
            .zip(chosen)
            .filter(|(_, &x)| x == s)
            .flat_map(|(c, _)| c.languages.iter().map(|l| TaskLanguagePair::new(&c.task, l)))
            .collect()
    };
    let (own_a, own_b) = (side(true), side(false));
    let a = Partition { id: PartitionId::A, train: own_a.union(&pivot_pairs).cloned().collect(), eval: own_b.clone() };
    let b = Partition { id: PartitionId::B, train: own_b.union(&pivot_pairs).cloned().collect(), eval: own_a };
    Ok((a, b))
}

/// Temperature-scaled, size-proportional choice among training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub pairs: Vec<TaskLanguagePair>,
    pub sizes: Vec<usize>,
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl SamplingPlan {
    pub fn new(entries: Vec<(TaskLanguagePair, usize)>, temperature: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(HxError::Sampling("no training pairs".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(HxError::Sampling(format!("temperature {temperature} must be finite and non-negative")));
        }
        if let Some((p, _)) = entries.iter().find(|(_, n)| *n == 0) {
            return Err(HxError::Sampling(format!("pair {p} has no training data")));
        }
        let raw: Vec<f64> = entries.iter().map(|(_, n)| (*n as f64).powf(temperature)).collect();
        let z: f64 = raw.iter().sum();
        let (pairs, sizes) = entries.into_iter().unzip();
        Ok(Self { pairs, sizes, weights: raw.iter().map(|w| w / z).collect(), temperature })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }
}

/// One homogeneous batch: every item is tagged with the pair it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pair: usize,
    pub items: Vec<(usize, usize)>,
}

impl Batch {
    pub fn is_homogeneous(&self) -> bool {
        self.items.iter().all(|&(p, _)| p == self.pair)
    }
}

/// Draws homogeneous batches, cycling through each pair's data in a fresh
/// shuffled order every epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    pub plan: SamplingPlan,
    batch_size: usize,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    pub epochs: Vec<u64>,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(plan: SamplingPlan, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(HxError::Sampling("batch size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orders = plan
            .sizes
            .iter()
            .map(|&n| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        let n = plan.pairs.len();
        Ok(Self { plan, batch_size, orders, cursors: vec![0; n], epochs: vec![0; n], rng })
    }

    pub fn next_batch(&mut self) -> Batch {
        let p = self.plan.draw(&mut self.rng);
        let mut items = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if self.cursors[p] == self.orders[p].len() {
                self.orders[p].shuffle(&mut self.rng);
                self.cursors[p] = 0;
                self.epochs[p] += 1;
                log::debug!("epoch {} of {} begins", self.epochs[p], self.plan.pairs[p]);
            }
            items.push((p, self.orders[p][self.cursors[p]]));
            self.cursors[p] += 1;
        }
        Batch { pair: p, items }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SingleTask,
    MultiTask,
    MixedLanguage,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::SingleTask => "single_task",
            Regime::MultiTask => "multi_task",
            Regime::MixedLanguage => "mixed_language",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single_task" => Ok(Self::SingleTask),
            "multi_task" => Ok(Self::MultiTask),
            "mixed_language" => Ok(Self::MixedLanguage),
            other => Err(HxError::Usage(format!("unknown regime {other:?} (single_task, multi_task, mixed_language)"))),
        }
    }
}

/// Optimisation settings shared by every regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Peak learning rate for adapter-based systems.
    pub peak_lr: f64,
    /// Peak learning rate when every backbone weight is trained.
    pub full_finetune_lr: f64,
    pub warmup: u64,
    pub eval_every: u64,
    pub temperature: f64,
    pub mlm_weight: f64,
    pub mask_rate: f64,
    /// MLM steps per language adapter in the MAD-X protocol.
    pub language_adapter_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            peak_lr: 1e-3,
            full_finetune_lr: 1e-4,
            warmup: 1000,
            eval_every: 500,
            temperature: 0.5,
            mlm_weight: 1.0,
            mask_rate: 0.15,
            language_adapter_steps: 2000,
        }
    }
}

/// Fully resolved configuration of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub partition: Option<PartitionId>,
    pub train_pairs: Vec<TaskLanguagePair>,
    pub eval_pairs: Vec<TaskLanguagePair>,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub temperature: f64,
    pub mlm_weight: f64,
    pub mask_rate: f64,
}

/// Resolves train and zero-shot pairs for a system under a regime.
///
/// Hyper-X always adds an MLM pair for every language; the baselines do
/// not (MAD-X runs MLM in its own adapter stage).
#[allow(clippy::too_many_arguments)]
pub fn plan_regime(
    kind: SystemKind,
    regime: Regime,
    partition: Option<PartitionId>,
    task: Option<&str>,
    data: &Datasets,
    train: &TrainConfig,
    partition_seed: u64,
    seed: u64,
) -> Result<RegimeConfig> {
    if partition.is_some() && regime != Regime::MixedLanguage {
        return Err(HxError::Usage("a partition only applies to the mixed_language regime".into()));
    }
    if kind == SystemKind::Madx && regime != Regime::SingleTask {
        return Err(HxError::Usage("madx only supports the single_task regime: its adapters do not allow standard multi-task training".into()));
    }
    let pivot = data.pivot.as_str();
    let others = || data.languages.iter().filter(|l| l.as_str() != pivot);
    let (mut train_pairs, eval_pairs): (Vec<_>, Vec<_>) = match regime {
        Regime::SingleTask => {
            let t = task.ok_or_else(|| HxError::Usage("single_task needs a task".into()))?;
            task_labels(t)?;
            (vec![TaskLanguagePair::new(t, pivot)], others().map(|l| TaskLanguagePair::new(t, l)).collect())
        }
        Regime::MultiTask => (
            DOWNSTREAM_TASKS.iter().map(|t| TaskLanguagePair::new(t, pivot)).collect(),
            DOWNSTREAM_TASKS.iter().flat_map(|t| others().map(move |l| TaskLanguagePair::new(t, l))).collect(),
        ),
        Regime::MixedLanguage => {
            let id = partition.ok_or_else(|| HxError::Usage("mixed_language needs a partition (A or B)".into()))?;
            let (a, b) = build_partitions(&DOWNSTREAM_TASKS, &data.groups, pivot, partition_seed)?;
            let p = if id == PartitionId::A { a } else { b };
            (p.train.into_iter().collect(), p.eval.into_iter().collect())
        }
    };
    if kind == SystemKind::Hyperx {
        train_pairs.extend(data.languages.iter().map(|l| TaskLanguagePair::new(TASK_MLM, l)));
    }
    let peak_lr = if kind == SystemKind::FullFinetune { train.full_finetune_lr } else { train.peak_lr };
    Ok(RegimeConfig {
        regime,
        partition,
        train_pairs,
        eval_pairs,
        steps: train.steps,
        batch_size: train.batch_size,
        peak_lr,
        warmup: train.warmup,
        eval_every: train.eval_every,
        seed,
        temperature: train.temperature,
        mlm_weight: train.mlm_weight,
        mask_rate: train.mask_rate,
    })
}

/// One evaluation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub task: String,
    pub language: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<MetricRecord>,
    pub best_step: u64,
    pub best_score: Option<f64>,
    pub last_score: Option<f64>,
    pub batches: u64,
    pub homogeneous_batches: u64,
    pub final_loss: f64,
}

fn diverged(step: u64, pair: &TaskLanguagePair, ids: &[&[u32]], e: HxError) -> HxError {
    match e {
        HxError::Num(NumError::NonFinite(op)) => {
            HxError::Diverged { step, detail: format!("non-finite value in {op} on batch {pair} with token ids {ids:?}") }
        }
        other => other,
    }
}

/// Mean dev score over the downstream pairs, recorded into `history`.
fn validate(model: &Model, pairs: &[TaskLanguagePair], data: &Datasets, step: u64, history: &mut Vec<MetricRecord>) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let scores = crate::par::map(pairs, |p| score_examples(model, &p.task, &p.task, &p.language, &data.pair(&p.task, &p.language)?.dev))?;
    for (p, s) in pairs.iter().zip(&scores) {
        history.push(MetricRecord {
            step,
            task: p.task.clone(),
            language: p.language.clone(),
            metric: metric_for(&p.task).into(),
            value: s.value,
        });
    }
    let mean = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
    history.push(MetricRecord { step, task: "validation".into(), language: "mean".into(), metric: "mean".into(), value: mean });
    Ok(Some(mean))
}

fn mlm_batch_loss<'a>(
    model: &'a Model,
    tape: &mut Tape<'a>,
    language: &str,
    seqs: &[&[u32]],
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
    mode: &mut Mode,
) -> Result<numcore::Var> {
    let tb = TokenBatch::new(seqs)?;
    let masked = mask_tokens(&tb, mask_rate, model.backbone.config.vocab_size, rng)?;
    model.mlm_loss(tape, language, &masked, mode)
}

fn trainable_snapshot(model: &Model) -> Vec<(ParamId, Vec<f64>)> {
    model.store.snapshot(&model.store.trainable_ids())
}

/// Runs one training regime on `model`'s currently trainable parameters
/// and leaves the best validation checkpoint in place.
pub fn train(model: &mut Model, cfg: &RegimeConfig, data: &Datasets) -> Result<TrainOutcome> {
    for p in &cfg.train_pairs {
        model.check_source(&p.task, &p.language)?;
    }
    if cfg.steps == 0 || cfg.eval_every == 0 {
        return Err(HxError::Config("steps and eval_every must be positive".into()));
    }
    let sizes = cfg.train_pairs.iter().map(|p| Ok((p.clone(), data.train_size(p)?))).collect::<Result<Vec<_>>>()?;
    let plan = SamplingPlan::new(sizes, cfg.temperature)?;
    let mut stream = BatchStream::new(plan, cfg.batch_size, cfg.seed)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MASK_SEED);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SEED);
    let schedule = LrSchedule::WarmupLinear { peak: cfg.peak_lr, warmup: cfg.warmup, total: cfg.steps };
    let mut state = OptimizerState::new(&model.store, AdamConfig::default(), schedule);
    let val_pairs: Vec<TaskLanguagePair> = cfg.train_pairs.iter().filter(|p| p.task != TASK_MLM).cloned().collect();

    let mut history = Vec::new();
    let (mut best_step, mut best_score, mut last_score) = (cfg.steps, None::<f64>, None);
    let mut best = None;
    let (mut homogeneous, mut final_loss) = (0u64, f64::NAN);
    for step in 0..cfg.steps {
        let batch = stream.next_batch();
        if !batch.is_homogeneous() {
            return Err(HxError::Sampling(format!("batch at step {step} mixes task-language pairs")));
        }
        homogeneous += 1;
        let pair = stream.plan.pairs[batch.pair].clone();
        model.store.zero_grad();
        let (loss, grads) = {
            let model_ref: &Model = model;
            let mut tape = Tape::new();
            let mut mode = Mode::Train(&mut drop_rng);
            if pair.task == TASK_MLM {
                let corpus = &data.mlm[&pair.language];
                let seqs: Vec<&[u32]> = batch.items.iter().map(|&(_, i)| corpus[i].as_slice()).collect();
                let l = mlm_batch_loss(model_ref, &mut tape, &pair.language, &seqs, cfg.mask_rate, &mut mask_rng, &mut mode)
                    .map_err(|e| diverged(step, &pair, &seqs, e))?;
                let l = tape.scale(l, cfg.mlm_weight)?;
                (tape.scalar(l), tape.backward(l)?)
            } else {
                let td = data.pair(&pair.task, &pair.language)?;
                let ex: Vec<&TaggedExample> = batch.items.iter().map(|&(_, i)| &td.train[i]).collect();
                let l = model_ref.tag_loss(&mut tape, &pair.task, &pair.task, &pair.language, &ex, &mut mode).map_err(|e| {
                    let ids: Vec<&[u32]> = ex.iter().map(|e| e.ids.as_slice()).collect();
                    diverged(step, &pair, &ids, e)
                })?;
                (tape.scalar(l), tape.backward(l)?)
            }
        };
        if !loss.is_finite() {
            return Err(HxError::Diverged { step, detail: format!("loss {loss} on batch {pair}") });
        }
        final_loss = loss;
        model.store.accumulate(&grads)?;
        let lr = state.scheduled_lr();
        adam_step(&mut model.store, &mut state, lr)?;

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            last_score = validate(model, &val_pairs, data, done, &mut history)?;
            if let Some(s) = last_score {
                if best_score.is_none_or(|b| s > b) {
                    best_score = Some(s);
                    best_step = done;
                    best = Some(trainable_snapshot(model));
                }
            }
        }
    }
    if let Some(snap) = best {
        model.store.restore(&snap);
    }
    Ok(TrainOutcome { history, best_step, best_score, last_score, batches: cfg.steps, homogeneous_batches: homogeneous, final_loss })
}

fn freeze_all(model: &mut Model) {
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.set_trainable(id, false);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadxOutcome {
    pub language: BTreeMap<String, TrainOutcome>,
    pub task: TrainOutcome,
}

/// The two-stage adapter protocol: each language adapter trained alone
/// with MLM, then the task adapter and head on the pivot with every
/// language adapter frozen.
pub fn train_madx(model: &mut Model, task_cfg: &RegimeConfig, language_steps: u64, data: &Datasets) -> Result<MadxOutcome> {
    if model.kind != SystemKind::Madx {
        return Err(HxError::Usage("train_madx needs a madx model".into()));
    }
    let [task_pair] = task_cfg.train_pairs.as_slice() else {
        return Err(HxError::Usage("madx trains exactly one task pair".into()));
    };
    let mut language = BTreeMap::new();
    let names: Vec<String> = model.language_adapters.keys().cloned().collect();
    for (i, l) in names.iter().enumerate() {
        freeze_all(model);
        model.language_adapters[l].set_trainable(&mut model.store, true);
        let cfg = RegimeConfig {
            train_pairs: vec![TaskLanguagePair::new(TASK_MLM, l)],
            eval_pairs: vec![],
            steps: language_steps,
            eval_every: language_steps,
            warmup: task_cfg.warmup.min(language_steps / 10),
            seed: task_cfg.seed.wrapping_add(1 + i as u64),
            ..task_cfg.clone()
        };
        language.insert(l.clone(), train(model, &cfg, data)?);
    }
    let frozen: Vec<Vec<u8>> = model.language_adapters.values().map(|a| a.fingerprint(&model.store)).collect();
    freeze_all(model);
    model.task_adapters[&task_pair.task].set_trainable(&mut model.store, true);
    let head = model.head(&task_pair.task)?.clone();
    model.store.set_trainable(head.w, true);
    model.store.set_trainable(head.b, true);
    let task = train(model, task_cfg, data)?;
    let after: Vec<Vec<u8>> = model.language_adapters.values().map(|a| a.fingerprint(&model.store)).collect();
    if frozen != after {
        return Err(HxError::Config("language adapters changed during task-adapter training".into()));
    }
    Ok(MadxOutcome { language, task })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewshotMode {
    ExistingTask,
    NewLabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewshotConfig {
    pub epochs: usize,
    /// Constant learning rate. Unset means the peak rate the source system
    /// was trained with.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub k_values: Vec<usize>,
    pub shots_per_label: Vec<usize>,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: None, batch_size: 8, k_values: vec![5, 10, 20, 50], shots_per_label: vec![2, 4, 8] }
    }
}

#[derive(Debug, Clone)]
pub struct FewshotOutcome {
    pub model: Model,
    pub pair: TaskLanguagePair,
    pub k: usize,
    pub mode: FewshotMode,
    /// Indices into the pair's training data.
    pub sampled: Vec<usize>,
    /// Head the predictions are read through.
    pub head: String,
    pub score: f64,
    pub epoch_losses: Vec<f64>,
}

/// Collapses entity types: `B-X` becomes `B-ENT`, `I-X` becomes `I-ENT`.
pub fn merged_entity_labels() -> Vec<String> {
    ["O", "B-ENT", "I-ENT"].iter().map(|s| s.to_string()).collect()
}

fn merge_example(e: &TaggedExample, labels: &[String]) -> TaggedExample {
    let labels = e
        .labels
        .iter()
        .map(|&l| match labels[l].split_once('-') {
            Some(("B", _)) => 1,
            Some(("I", _)) => 2,
            _ => 0,
        })
        .collect();
    TaggedExample { ids: e.ids.clone(), labels }
}

fn stratified_sample<R: Rng>(examples: &[TaggedExample], n_labels: usize, shots: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut chosen = BTreeSet::new();
    for label in 0..n_labels {
        let mut pool: Vec<usize> = (0..examples.len()).filter(|i| examples[*i].labels.contains(&label) && !chosen.contains(i)).collect();
        if pool.len() < shots {
            return Err(HxError::Sampling(format!("label {label} occurs in only {} unused sentences, {shots} requested", pool.len())));
        }
        pool.shuffle(rng);
        chosen.extend(pool.into_iter().take(shots));
    }
    Ok(chosen.into_iter().collect())
}

/// Fine-tunes a copy of `model` on `k` training sentences of `pair` (or,
/// for new label sets, `k` sentences per label) and scores its test data.
#[allow(clippy::too_many_arguments)]
pub fn fewshot_finetune(
    model: &Model,
    pair: &TaskLanguagePair,
    k: usize,
    mode: FewshotMode,
    data: &Datasets,
    cfg: &FewshotConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<FewshotOutcome> {
    let lr = cfg.lr.unwrap_or(if model.kind == SystemKind::FullFinetune { train.full_finetune_lr } else { train.peak_lr });
    let td = data.pair(&pair.task, &pair.language)?;
    model.check_source(&pair.task, &pair.language)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ FEWSHOT_SEED);
    let mut m = model.clone();
    let (head, train_set, test_set, sampled) = match mode {
        FewshotMode::ExistingTask => {
            if k > td.train.len() {
                return Err(HxError::Sampling(format!("{k} shots requested from {} sentences of {pair}", td.train.len())));
            }
            let sampled = rand::seq::index::sample(&mut rng, td.train.len(), k).into_vec();
            let train: Vec<TaggedExample> = sampled.iter().map(|&i| td.train[i].clone()).collect();
            (pair.task.clone(), train, td.test.clone(), sampled)
        }
        FewshotMode::NewLabelSet => {
            let old = m.head(&pair.task)?.labels.clone();
            if !old.iter().any(|l| l.starts_with("B-")) {
                return Err(HxError::Usage(format!("task {} has no span labels to merge", pair.task)));
            }
            let merged: Vec<TaggedExample> = td.train.iter().map(|e| merge_example(e, &old)).collect();
            let labels = merged_entity_labels();
            let sampled = if k == 0 { vec![] } else { stratified_sample(&merged, labels.len(), k, &mut rng)? };
            let head = format!("{}_merged", pair.task);
            m.replace_head_only(&head, labels, &mut rng)?;
            let train = sampled.iter().map(|&i| merged[i].clone()).collect();
            let test = td.test.iter().map(|e| merge_example(e, &old)).collect();
            (head, train, test, sampled)
        }
    };

    let mut epoch_losses = Vec::new();
    if !train_set.is_empty() {
        let mut state = OptimizerState::new(&m.store, AdamConfig::default(), LrSchedule::Constant { lr });
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SEED);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let ex: Vec<&TaggedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
                m.store.zero_grad();
                let (loss, grads) = {
                    let mut tape = Tape::new();
                    let l = m.tag_loss(&mut tape, &pair.task, &head, &pair.language, &ex, &mut Mode::Train(&mut drop_rng))?;
                    (tape.scalar(l), tape.backward(l)?)
                };
                total += loss;
                m.store.accumulate(&grads)?;
                adam_step(&mut m.store, &mut state, lr)?;
            }
            epoch_losses.push(total);
        }
    }
    let score = score_examples(&m, &pair.task, &head, &pair.language, &test_set)?.value;
    Ok(FewshotOutcome { model: m, pair: pair.clone(), k, mode, sampled, head, score, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_groups() -> BTreeMap<String, usize> {
        ["en", "s1", "s2", "s3", "s4", "s5", "u1", "u2"].iter().enumerate().map(|(i, l)| (l.to_string(), i / 2)).collect()
    }

    #[test]
    fn partitions_are_sound() {
        let groups = grid_groups();
        for seed in 0..20 {
            let (a, b) = build_partitions(&DOWNSTREAM_TASKS, &groups, "en", seed).unwrap();
            let strip = |s: &BTreeSet<TaskLanguagePair>| -> BTreeSet<TaskLanguagePair> {
                s.iter().filter(|p| p.language != "en").cloned().collect()
            };
            assert_eq!(strip(&a.train).len(), 7);
            assert_eq!(strip(&b.train).len(), 7);
            assert!(a.train.intersection(&b.train).all(|p| p.language == "en"));
            assert_eq!(a.train.intersection(&b.train).count(), 2);
            assert_eq!(strip(&a.train).union(&strip(&b.train)).count(), 14);
            assert_eq!(a.eval, strip(&b.train));
            let langs: Vec<String> = groups.keys().cloned().collect();
            assert!(!a.mlm_only_languages(&langs).is_empty());
            assert!(!b.mlm_only_languages(&langs).is_empty());
            for p in &a.eval {
                // no group-mate supervises the held-out task in A
                let g = groups[&p.language];
                assert!(!a.train.iter().any(|q| q.task == p.task && q.language != "en" && groups[&q.language] == g));
            }
        }
    }

    #[test]
    fn partition_errors() {
        let one: BTreeMap<String, usize> = [("en".to_string(), 0)].into_iter().collect();
        assert!(matches!(build_partitions(&DOWNSTREAM_TASKS, &one, "en", 0), Err(HxError::Partition(_))));
        assert!(matches!(build_partitions(&["pos"], &grid_groups(), "en", 0), Err(HxError::Partition(_))));
    }

    #[test]
    fn equal_pairs_sample_evenly() {
        let plan = SamplingPlan::new(vec![(TaskLanguagePair::new("pos", "en"), 500), (TaskLanguagePair::new("pos", "s1"), 500)], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hits = (0..10_000).filter(|_| plan.draw(&mut rng) == 0).count();
        assert!((hits as f64 / 10_000.0 - 0.5).abs() < 0.03);
    }

    #[test]
    fn near_zero_temperature_is_uniform() {
        let entries = [100, 1000, 10_000].iter().enumerate().map(|(i, &n)| (TaskLanguagePair::new("pos", &format!("l{i}")), n)).collect();
        let plan = SamplingPlan::new(entries, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        (0..30_000).for_each(|_| counts[plan.draw(&mut rng)] += 1);
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn sampling_errors() {
        assert!(SamplingPlan::new(vec![], 1.0).is_err());
        assert!(SamplingPlan::new(vec![(TaskLanguagePair::new("pos", "en"), 0)], 1.0).is_err());
    }

    #[test]
    fn stream_is_homogeneous_and_cycles() {
        let plan = SamplingPlan::new(vec![(TaskLanguagePair::new("pos", "en"), 5), (TaskLanguagePair::new("ner", "en"), 7)], 0.5).unwrap();
        let mut s = BatchStream::new(plan, 4, 3).unwrap();
        for _ in 0..200 {
            let b = s.next_batch();
            assert!(b.is_homogeneous());
            assert!(b.items.iter().all(|&(p, i)| i < [5, 7][p]));
        }
        assert!(s.epochs.iter().all(|&e| e > 0));
    }

    #[test]
    fn merged_labels() {
        let old: Vec<String> = crate::synthdata::BIO_LABELS.iter().map(|s| s.to_string()).collect();
        let e = TaggedExample { ids: vec![3; 5], labels: vec![0, 1, 2, 3, 4] };
        assert_eq!(merge_example(&e, &old).labels, vec![0, 1, 2, 1, 2]);
    }
}
