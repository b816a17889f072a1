//! One code path from a resolved configuration to trained, evaluated
//! models. The CLI and the acceptance suite both go through here.
//!
//! Seed offsets on top of the run seed: model initialisation uses
//! `seed ^ 0x494e4954`; everything inside training is documented in
//! [`crate::trainer`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{pretrain, Pretrained};
use crate::config::{ExperimentConfig, PRETRAIN_SEED_OFFSET};
use crate::error::{HxError, Result};
use crate::evalkit::{zero_shot_grid, EvalPair, EvalReport, PairEntry};
use crate::model::{Model, SystemKind, TASK_MLM};
use crate::synthdata::{build_grid, AnnotatedSentence, GrammarConfig, InventorySizes, LanguageGrid, Split};
use crate::trainer::{plan_regime, train, train_madx, Datasets, PartitionId, Regime, RegimeConfig, TaskLanguagePair, TrainOutcome};

const INIT_SEED: u64 = 0x494e_4954;

/// The synthetic grid and its encoded datasets.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub grid: LanguageGrid,
    pub data: Datasets,
}

impl Workbench {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let grid_cfg = cfg.data.grid_config(cfg.backbone.model.vocab_size);
        let grid = build_grid(&grid_cfg, &InventorySizes::default(), GrammarConfig::default(), cfg.seed)?;
        let data = Datasets::from_grid(&grid, &cfg.data)?;
        let longest = data
            .tasks
            .values()
            .flat_map(|t| t.train.iter().chain(&t.dev).chain(&t.test))
            .map(|e| e.ids.len())
            .chain(data.mlm.values().flatten().map(Vec::len))
            .max()
            .unwrap_or(0);
        if longest > cfg.backbone.model.max_len {
            return Err(HxError::Truncation { len: longest, max: cfg.backbone.model.max_len });
        }
        Ok(Self { grid, data })
    }

    /// Unlabelled text of the pretraining languages only.
    pub fn pretraining_corpus(&self, per_language: usize) -> Result<Vec<AnnotatedSentence>> {
        let mut out = Vec::new();
        for lang in self.grid.languages.iter().filter(|l| l.spec.seen_in_pretraining) {
            out.extend(lang.sample_corpus(per_language, Split::Train)?);
        }
        Ok(out)
    }
}

pub fn pretrain_backbone(cfg: &ExperimentConfig, wb: &Workbench) -> Result<Pretrained> {
    let corpus = wb.pretraining_corpus(cfg.backbone.pretrain.sentences_per_language)?;
    pretrain(
        &corpus,
        &wb.data.seen,
        &wb.grid.vocab,
        cfg.backbone.model.clone(),
        &cfg.backbone.pretrain,
        cfg.seed ^ PRETRAIN_SEED_OFFSET,
    )
}

/// What to train.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub system: SystemKind,
    pub regime: Regime,
    pub partition: Option<PartitionId>,
    pub task: Option<String>,
    pub seed: u64,
}

impl RunSpec {
    /// The run described by the `[regime]` section.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let r = &cfg.regime;
        Ok(Self {
            system: SystemKind::parse(&r.system)?,
            regime: Regime::parse(&r.regime)?,
            partition: r.partition.as_deref().map(PartitionId::parse).transpose()?,
            task: r.task.clone(),
            seed: cfg.seed,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub regime: RegimeConfig,
    pub outcome: TrainOutcome,
    /// Language-adapter stage of the MAD-X protocol.
    pub language_stage: BTreeMap<String, TrainOutcome>,
    pub report: EvalReport,
}

/// Resolves the regime. Partitions are always built from the config seed
/// so that A and B of one experiment are complementary.
pub fn plan(cfg: &ExperimentConfig, wb: &Workbench, spec: &RunSpec) -> Result<RegimeConfig> {
    plan_regime(spec.system, spec.regime, spec.partition, spec.task.as_deref(), &wb.data, &cfg.regime.train, cfg.seed, spec.seed)
}

/// Untrained model for `spec`.
pub fn build_model(cfg: &ExperimentConfig, wb: &Workbench, pre: &Pretrained, spec: &RunSpec) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ INIT_SEED);
    match spec.system {
        SystemKind::Hyperx => Model::hyperx(pre, &wb.data.languages, cfg.hypernet.clone(), &mut rng),
        SystemKind::FullFinetune => Model::full_finetune(pre, &mut rng),
        SystemKind::Madx => Model::madx(pre, &wb.data.languages, &wb.data.pivot, &cfg.regime.madx, &mut rng),
    }
}

/// Test-set scores for every downstream pair the regime trains or
/// transfers to. Pairs outside the training set are marked zero-shot.
pub fn evaluate(model: &Model, wb: &Workbench, regime: &RegimeConfig) -> Result<EvalReport> {
    let mut pairs: Vec<&TaskLanguagePair> = regime.train_pairs.iter().filter(|p| p.task != TASK_MLM).collect();
    pairs.extend(regime.eval_pairs.iter().filter(|p| !regime.train_pairs.contains(p)));
    let eval = pairs
        .into_iter()
        .map(|p| {
            Ok(EvalPair {
                task: p.task.clone(),
                language: p.language.clone(),
                examples: &wb.data.pair(&p.task, &p.language)?.test,
                zero_shot: !regime.train_pairs.contains(p),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::new(model.kind.name(), regime.regime.name(), &wb.data.pivot, wb.data.seen.clone());
    zero_shot_grid(model, &eval, report)
}

/// Builds, trains and evaluates one model.
pub fn run(cfg: &ExperimentConfig, wb: &Workbench, pre: &Pretrained, spec: &RunSpec) -> Result<RunResult> {
    let regime = plan(cfg, wb, spec)?;
    let mut model = build_model(cfg, wb, pre, spec)?;
    let (outcome, language_stage) = if spec.system == SystemKind::Madx {
        let m = train_madx(&mut model, &regime, cfg.regime.train.language_adapter_steps, &wb.data)?;
        (m.task, m.language)
    } else {
        (train(&mut model, &regime, &wb.data)?, BTreeMap::new())
    };
    let report = evaluate(&model, wb, &regime)?;
    Ok(RunResult { model, regime, outcome, language_stage, report })
}

/// Zero-shot entries of several complementary runs in one report, e.g.
/// both mixed-language partitions or one single-task run per task. Pivot
/// entries are kept from the first run that has them.
pub fn zero_shot_union(reports: &[&EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| HxError::Join("no reports to join".into()))?;
    let mut out = EvalReport { entries: Vec::new(), ..(*first).clone() };
    for r in reports {
        if r.system != first.system || r.pivot != first.pivot {
            return Err(HxError::Join(format!("cannot join {} with {}", r.system, first.system)));
        }
        let keep = |e: &&PairEntry| e.zero_shot || (e.language == r.pivot && out.get(&e.task, &e.language).is_none());
        let zs = EvalReport { entries: r.entries.iter().filter(keep).cloned().collect(), ..(*r).clone() };
        out.merge(&zs)?;
    }
    Ok(out)
}
