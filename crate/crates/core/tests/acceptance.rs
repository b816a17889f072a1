//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! With `ACCEPTANCE_STRICT=1` the process exits non-zero if any criterion
//! fails; otherwise failures are reported but do not fail `cargo test`.
//!
//! Everything runs against `configs/desk.toml`. `ACCEPTANCE_ONLY=1,8`
//! restricts a run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use hyperx::adapters::{adapter_size, AdapterProvider, Census, StaticAdapters};
use hyperx::backbone::{Backbone, BackboneConfig, Mode, Pretrained, TokenBatch};
use hyperx::checkpoint::metrics_jsonl;
use hyperx::config::ExperimentConfig;
use hyperx::evalkit::{error_reduction, majority_baseline, reduction, span_f1, EvalReport, PairEntry};
use hyperx::experiment::{build_model, plan, pretrain_backbone, run, zero_shot_union, RunResult, RunSpec, Workbench};
use hyperx::hypernet::{hypernet_census, HyperAdapters, HyperNet, HypernetConfig, SourceRegistry};
use hyperx::model::{Model, SystemKind, TaggedExample, DOWNSTREAM_TASKS, TASK_MLM};
use hyperx::trainer::{build_partitions, fewshot_finetune, train, train_madx, FewshotMode, PartitionId, Regime, TaskLanguagePair};
use hyperx::{HxError, Result};
use numcore::gradcheck::check_gradients;
use numcore::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const FEWSHOT_K: [usize; 4] = [5, 10, 20, 50];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn desk() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    ExperimentConfig::load(&path).expect("committed desk config parses")
}

fn languages(cfg: &ExperimentConfig) -> Vec<String> {
    let mut v = vec![cfg.data.pivot.clone()];
    let seen = cfg.data.num_languages - cfg.data.num_unseen;
    v.extend((1..seen).map(|i| format!("s{i}")));
    v.extend((1..=cfg.data.num_unseen).map(|i| format!("u{i}")));
    v
}

fn random_backbone(config: BackboneConfig, seed: u64) -> Pretrained {
    let mut store = ParamStore::new();
    let mut backbone = Backbone::init(&mut store, config, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid backbone");
    backbone.freeze(&mut store, false);
    Pretrained { store, backbone, loss_curve: vec![], initial_loss: 0.0, final_loss: 0.0, corpus_hash: String::new() }
}

fn random_seqs(rng: &mut ChaCha8Rng, n: usize, max_len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..n).map(|_| (0..rng.gen_range(1..=max_len)).map(|_| rng.gen_range(3..vocab as u32)).collect()).collect()
}

fn fill_generator(m: &mut Model, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    for name in ["hypernet.gen.w", "hypernet.gen.b"] {
        let id = m.store.id(name)?;
        let shape = m.store.get(id).shape().to_vec();
        let t = if std == 0.0 { Tensor::zeros(&shape) } else { Tensor::randn(&shape, std, rng) };
        m.store.assign(id, t)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 1

type OpFn = Box<dyn for<'t> Fn(&mut Tape<'t>, &'t ParamStore, &[ParamId]) -> numcore::Result<Var>>;

fn op<F>(f: F) -> OpFn
where
    F: for<'t> Fn(&mut Tape<'t>, &'t ParamStore, &[ParamId]) -> numcore::Result<Var> + 'static,
{
    Box::new(f)
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(tape: &mut Tape<'_>, y: Var) -> numcore::Result<Var> {
    let n = tape.value(y).len();
    let w = Tensor::new(tape.shape(y).to_vec(), (0..n).map(|i| ((i * 7 % 11) as f64 - 5.5) / 3.0).collect())?;
    let w = tape.constant(w);
    let m = tape.mul(y, w)?;
    tape.sum(m)
}

fn op_suite() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], op(|t, s, p| {
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.matmul(a, b)?;
            probe(t, y)
        })),
        ("add", vec![vec![3, 4], vec![3, 4]], op(|t, s, p| {
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.add(a, b)?;
            probe(t, y)
        })),
        ("add_row", vec![vec![3, 4], vec![4]], op(|t, s, p| {
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.add_row(a, b)?;
            probe(t, y)
        })),
        ("mul", vec![vec![2, 5], vec![2, 5]], op(|t, s, p| {
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.mul(a, b)?;
            probe(t, y)
        })),
        ("scale", vec![vec![2, 5]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.scale(a, -1.7)?;
            probe(t, y)
        })),
        ("relu", vec![vec![4, 6]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.relu(a)?;
            probe(t, y)
        })),
        ("gelu", vec![vec![4, 6]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.gelu(a)?;
            probe(t, y)
        })),
        ("softmax", vec![vec![3, 5]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.softmax(a)?;
            probe(t, y)
        })),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], op(|t, s, p| {
            let (x, g, b) = (t.param(s, p[0]), t.param(s, p[1]), t.param(s, p[2]));
            let y = t.layer_norm(x, g, b)?;
            probe(t, y)
        })),
        ("gather", vec![vec![5, 3]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.gather(a, &[4, 0, 4, 2])?;
            probe(t, y)
        })),
        ("cross_entropy", vec![vec![4, 6]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            t.cross_entropy(a, &[0, 5, 2, 2])
        })),
        ("dropout", vec![vec![4, 4]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.dropout(a, 0.3, &mut ChaCha8Rng::seed_from_u64(3))?;
            probe(t, y)
        })),
        ("concat", vec![vec![2, 3], vec![2, 2]], op(|t, s, p| {
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.concat(&[a, b])?;
            probe(t, y)
        })),
        ("reshape", vec![vec![2, 6]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.reshape(a, &[3, 4])?;
            probe(t, y)
        })),
        ("slice", vec![vec![1, 10]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.slice(a, 3, &[2, 3])?;
            probe(t, y)
        })),
        ("sum", vec![vec![3, 3]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.mul(a, a)?;
            t.sum(y)
        })),
        ("mean", vec![vec![3, 3]], op(|t, s, p| {
            let a = t.param(s, p[0]);
            let y = t.mul(a, a)?;
            t.mean(y)
        })),
        ("attention", vec![vec![6, 4], vec![6, 4], vec![6, 4]], op(|t, s, p| {
            let (q, k, v) = (t.param(s, p[0]), t.param(s, p[1]), t.param(s, p[2]));
            let y = t.attention(q, k, v, 2, 3, 2, &[true, true, true, true, true, false])?;
            probe(t, y)
        })),
    ]
}

fn gradient_correctness() -> Result<Verdict> {
    let mut worst_op = (0.0f64, "");
    for (name, shapes, f) in op_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, sh)| store.add(format!("p{i}"), Tensor::randn(sh, 1.0, &mut rng).with_requires_grad(true)))
            .collect::<numcore::Result<_>>()?;
        assert!(shapes.iter().all(|s| s.iter().product::<usize>() <= 64));
        let report = check_gradients(&mut store, &ids, 1e-5, 1e-6, |t, s| f(t, s, &ids))?;
        if report.max_rel_error > worst_op.0 {
            worst_op = (report.max_rel_error, name);
        }
    }

    // loss -> language embedding through the whole model
    let pre = random_backbone(BackboneConfig { num_layers: 1, hidden: 8, num_heads: 2, ff_dim: 16, vocab_size: 20, max_len: 8, dropout: 0.0 }, 1);
    let hc = HypernetConfig { task_dim: 3, lang_dim: 3, layer_dim: 3, proj_dim: 3, bottleneck: 2, biases: true };
    let langs: Vec<String> = ["en", "s1", "u1"].iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = Model::hyperx(&pre, &langs, hc, &mut rng)?;
    fill_generator(&mut model, 0.3, &mut rng)?;
    let params = model.census().total();
    let examples: Vec<TaggedExample> = random_seqs(&mut rng, 2, 8, 20)
        .into_iter()
        .map(|ids| TaggedExample { labels: ids.iter().map(|&i| i as usize % 5).collect(), ids })
        .collect();
    let refs: Vec<&TaggedExample> = examples.iter().collect();
    let net = model.hypernet.clone().expect("hyperx");
    let lang_emb = net.lang_emb();
    let mut store = std::mem::take(&mut model.store);
    let e2e = check_gradients(&mut store, &[lang_emb], 1e-5, 1e-6, |t, s| {
        model_loss(t, s, &model.backbone, &model.heads, &net, &refs).map_err(|e| numcore::NumError::Contract(e.to_string()))
    })?;
    let live = {
        let mut tape = Tape::new();
        let l = model_loss(&mut tape, &store, &model.backbone, &model.heads, &net, &refs)?;
        let g = tape.backward(l)?;
        g.get(lang_emb).is_some_and(|g| g.iter().any(|&x| x != 0.0))
    };
    let pass = worst_op.0 < 1e-4 && e2e.max_rel_error < 1e-3 && live && params <= 5_000;
    verdict(
        pass,
        format!(
            "{} ops, worst rel err {:.1e} ({}); end-to-end language embedding rel err {:.1e} on {} params",
            op_suite().len(),
            worst_op.0,
            worst_op.1,
            e2e.max_rel_error,
            params
        ),
    )
}

/// NER tagging loss of language `s1` built directly from the model parts,
/// so that finite differences can move the parameter store underneath.
fn model_loss<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    backbone: &Backbone,
    heads: &BTreeMap<String, hyperx::model::Head>,
    net: &HyperNet,
    examples: &[&TaggedExample],
) -> Result<Var> {
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.ids.as_slice()).collect();
    let batch = TokenBatch::new(&seqs)?;
    let provider = HyperAdapters { net, task: net.registry.task_id("ner")?, language: net.registry.language_id("s1")? };
    let layers = backbone.encode(tape, store, &batch, Some(&provider), &mut Mode::Eval)?;
    let x = tape.gather(*layers.last().expect("one layer"), &batch.positions())?;
    let h = &heads["ner"];
    let (w, b) = (tape.param(store, h.w), tape.param(store, h.b));
    let y = tape.matmul(x, w)?;
    let y = tape.add_row(y, b)?;
    let targets: Vec<usize> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
    Ok(tape.cross_entropy(y, &targets)?)
}

// ---------------------------------------------------------------- 2

fn identity_at_init(cfg: &ExperimentConfig) -> Result<Verdict> {
    let pre = random_backbone(cfg.backbone.model.clone(), 5);
    let langs = languages(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fresh = Model::hyperx(&pre, &langs, cfg.hypernet.clone(), &mut rng)?;
    let mut zeroed = fresh.clone();
    fill_generator(&mut zeroed, 0.0, &mut rng)?;
    let tasks: Vec<&str> = DOWNSTREAM_TASKS.iter().copied().chain([TASK_MLM]).collect();
    let vocab = cfg.backbone.model.vocab_size;
    let (mut equal, mut total) = (0, 0);
    for b in 0..100u64 {
        let seqs = random_seqs(&mut rng, 4, 24, vocab);
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let batch = TokenBatch::new(&refs)?;
        let (task, lang) = (tasks[rng.gen_range(0..tasks.len())], &langs[rng.gen_range(0..langs.len())]);
        let encode = |m: &Model, with: bool| -> Result<Vec<Vec<u64>>> {
            let mut drop = ChaCha8Rng::seed_from_u64(b);
            let mut mode = if b % 2 == 0 { Mode::Eval } else { Mode::Train(&mut drop) };
            let net = m.hypernet.as_ref().expect("hyperx");
            let provider = HyperAdapters { net, task: net.registry.task_id(task)?, language: net.registry.language_id(lang)? };
            let p: Option<&dyn AdapterProvider> = if with { Some(&provider) } else { None };
            let mut tape = Tape::new();
            let layers = m.backbone.encode(&mut tape, &m.store, &batch, p, &mut mode)?;
            Ok(layers.iter().map(|&v| tape.value(v).iter().map(|x| x.to_bits()).collect()).collect())
        };
        let plain = encode(&fresh, false)?;
        for m in [&fresh, &zeroed] {
            total += 1;
            if encode(m, true)? == plain {
                equal += 1;
            }
        }
    }
    verdict(equal == total, format!("{equal}/{total} adapted encodings bit-identical to the bare backbone (100 batches, fresh and all-zero generator)"))
}

// ---------------------------------------------------------------- 3

fn parameter_accounting(cfg: &ExperimentConfig) -> Result<Verdict> {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for (h, b) in [(768, 256), (64, 16), (32, 32), (8, 3)] {
        let mut store = ParamStore::new();
        StaticAdapters::register(&mut store, "pos", "en", 1, h, b, &mut rng)?;
        let counted = Census::of(&store).get("adapters").total();
        if counted != 2 * h * b + b + h || adapter_size(h, b, true) != counted {
            failures.push(format!("adapter h={h} b={b}: {counted}"));
        }
    }
    if adapter_size(768, 256, true) != 394_240 || adapter_size(64, 16, true) != 2_128 {
        failures.push("adapter reference sizes".into());
    }

    let registry = |langs: usize| -> Result<SourceRegistry> {
        let mut r = SourceRegistry::new();
        for t in ["pos", "ner", "mlm"] {
            r.register_task(t)?;
        }
        for i in 0..langs {
            r.register_language(&format!("l{i}"))?;
        }
        Ok(r)
    };
    let census = |c: &HypernetConfig, langs: usize, layers: usize, hidden: usize| -> Result<BTreeMap<String, usize>> {
        let mut store = ParamStore::new();
        HyperNet::new(&mut store, registry(langs)?, c.clone(), layers, hidden, &mut ChaCha8Rng::seed_from_u64(1))?;
        Ok(hypernet_census(&store))
    };
    let base_size = HypernetConfig { task_dim: 64, lang_dim: 64, layer_dim: 64, proj_dim: 32, bottleneck: 256, biases: true };
    for (c, langs, layers, hidden, expect_gen) in [(&base_size, 12, 12, 768, Some(13_009_920)), (&cfg.hypernet, 8, cfg.backbone.model.num_layers, cfg.backbone.model.hidden, None)] {
        let shared = census(c, langs, layers, hidden)?;
        let da = 2 * hidden * c.bottleneck + c.bottleneck + hidden;
        let ds = c.task_dim + c.lang_dim + c.layer_dim;
        let want_gen = (c.proj_dim + 1) * da;
        let want_emb = 3 * c.task_dim + langs * c.lang_dim + layers * c.layer_dim;
        let want_proj = ds * c.proj_dim + c.proj_dim + c.proj_dim * c.proj_dim + c.proj_dim;
        if shared["generator"] != want_gen || expect_gen.is_some_and(|g| g != want_gen) {
            failures.push(format!("generator at h={hidden}: {}", shared["generator"]));
        }
        if shared["embeddings"] != want_emb || shared["projector"] != want_proj {
            failures.push(format!("embeddings/projector at h={hidden}"));
        }
        if shared["total"] != shared["embeddings"] + shared["projector"] + shared["generator"] {
            failures.push("census additivity".into());
        }
        let per_layer = census(c, langs, 1, hidden)?;
        if shared["total"] >= layers * per_layer["total"] {
            failures.push(format!("shared {} not below {} x {}", shared["total"], layers, per_layer["total"]));
        }
    }

    let pre = random_backbone(cfg.backbone.model.clone(), 2);
    let m = Model::hyperx(&pre, &languages(cfg), cfg.hypernet.clone(), &mut rng)?;
    let hc = hypernet_census(&m.store);
    let parts: usize = ["embeddings", "projector", "generator", "layer_norm", "heads"].iter().map(|k| hc[*k]).sum();
    if hc["total"] != parts || hc["total"] != m.census().trainable() {
        failures.push("model census does not add up".into());
    }
    verdict(failures.is_empty(), if failures.is_empty() { "all censuses equal their closed forms".to_string() } else { failures.join("; ") })
}

// ---------------------------------------------------------------- 4

fn regime_soundness(cfg: &ExperimentConfig) -> Result<Verdict> {
    let mut failures = Vec::new();
    let wb = Workbench::build(cfg)?;
    let pivot = wb.data.pivot.clone();
    let all: BTreeSet<TaskLanguagePair> =
        wb.data.tasks.keys().filter(|p| p.language != pivot).cloned().collect();
    for seed in 0..50 {
        let (a, b) = build_partitions(&DOWNSTREAM_TASKS, &wb.data.groups, &pivot, seed)?;
        let own = |s: &BTreeSet<TaskLanguagePair>| -> BTreeSet<TaskLanguagePair> { s.iter().filter(|p| p.language != pivot).cloned().collect() };
        let (oa, ob) = (own(&a.train), own(&b.train));
        let pivots_in_both = DOWNSTREAM_TASKS.iter().all(|t| {
            let p = TaskLanguagePair::new(t, &pivot);
            a.train.contains(&p) && b.train.contains(&p)
        });
        let sound = oa.is_disjoint(&ob)
            && oa.union(&ob).cloned().collect::<BTreeSet<_>>() == all
            && pivots_in_both
            && a.eval == ob
            && b.eval == oa;
        if !sound {
            failures.push(format!("partition seed {seed}"));
        }
    }

    // a full-length run on a reduced model
    let mut small = cfg.clone();
    small.backbone.model.num_layers = 1;
    small.backbone.model.hidden = 16;
    small.backbone.model.ff_dim = 32;
    small.backbone.pretrain.steps = 200;
    small.backbone.pretrain.warmup = 20;
    small.backbone.pretrain.sentences_per_language = 200;
    small.data.train_sentences = 200;
    small.data.mlm_sentences = 200;
    small.data.dev_sentences = 20;
    small.data.test_sentences = 20;
    small.hypernet = HypernetConfig { task_dim: 4, lang_dim: 4, layer_dim: 4, proj_dim: 4, bottleneck: 4, biases: true };
    small.regime.train.steps = 20_000;
    small.regime.train.batch_size = 4;
    small.regime.train.eval_every = 5_000;
    small.regime.train.warmup = 1_000;
    small.regime.train.language_adapter_steps = 200;
    small.regime.madx.language_bottleneck = 4;
    small.regime.madx.task_bottleneck = 2;
    let wb = Workbench::build(&small)?;
    let pre = pretrain_backbone(&small, &wb)?;

    let spec = RunSpec { system: SystemKind::Hyperx, regime: Regime::MixedLanguage, partition: Some(PartitionId::A), task: None, seed: small.seed };
    let regime = plan(&small, &wb, &spec)?;
    let mut model = build_model(&small, &wb, &pre, &spec)?;
    let before = model.backbone_fingerprint();
    let out = train(&mut model, &regime, &wb.data)?;
    let hx_frozen = before == model.backbone_fingerprint();
    let homogeneous = out.batches == 20_000 && out.homogeneous_batches == out.batches;

    let spec = RunSpec { system: SystemKind::Madx, regime: Regime::SingleTask, partition: None, task: Some("ner".into()), seed: small.seed };
    let mut regime = plan(&small, &wb, &spec)?;
    regime.steps = 1_000;
    regime.eval_every = 500;
    let mut model = build_model(&small, &wb, &pre, &spec)?;
    let before = model.backbone_fingerprint();
    let ln_before: Vec<Vec<f64>> = model.backbone.layer_norm_ids(&model.store).iter().map(|&id| model.store.get(id).data().to_vec()).collect();
    train_madx(&mut model, &regime, small.regime.train.language_adapter_steps, &wb.data)?;
    let madx_frozen = before == model.backbone_fingerprint()
        && ln_before == model.backbone.layer_norm_ids(&model.store).iter().map(|&id| model.store.get(id).data().to_vec()).collect::<Vec<_>>();

    if !homogeneous {
        failures.push(format!("{} of {} batches homogeneous", out.homogeneous_batches, out.batches));
    }
    if !hx_frozen || !madx_frozen {
        failures.push("backbone weights moved".into());
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("50 partition draws sound; {}/{} batches homogeneous; frozen backbone byte-identical", out.homogeneous_batches, out.batches)
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 5, 6, 7

struct SeedRuns {
    seed: u64,
    wb: Workbench,
    mixed: Vec<RunResult>,
    english: RunResult,
    finetune: Vec<RunResult>,
}

fn seed_runs(cfg: &ExperimentConfig, offset: u64) -> Result<SeedRuns> {
    let mut cfg = cfg.clone();
    cfg.seed += offset;
    let seed = cfg.seed;
    let t = Instant::now();
    let wb = Workbench::build(&cfg)?;
    let pre = pretrain_backbone(&cfg, &wb)?;
    let spec = |system, regime, partition, task: Option<&str>| RunSpec { system, regime, partition, task: task.map(str::to_string), seed };
    let mixed = [PartitionId::A, PartitionId::B]
        .into_iter()
        .map(|p| run(&cfg, &wb, &pre, &spec(SystemKind::Hyperx, Regime::MixedLanguage, Some(p), None)))
        .collect::<Result<Vec<_>>>()?;
    let english = run(&cfg, &wb, &pre, &spec(SystemKind::Hyperx, Regime::MultiTask, None, None))?;
    let finetune = DOWNSTREAM_TASKS
        .iter()
        .map(|t| run(&cfg, &wb, &pre, &spec(SystemKind::FullFinetune, Regime::SingleTask, None, Some(t))))
        .collect::<Result<Vec<_>>>()?;
    eprintln!("  seed {seed}: backbone and five runs in {:.0?}", t.elapsed());
    Ok(SeedRuns { seed, wb, mixed, english, finetune })
}

fn suite(cfg: &ExperimentConfig) -> &'static std::result::Result<Vec<SeedRuns>, String> {
    static SUITE: OnceLock<std::result::Result<Vec<SeedRuns>, String>> = OnceLock::new();
    SUITE.get_or_init(|| (0..SEEDS).map(|s| seed_runs(cfg, s)).collect::<Result<Vec<_>>>().map_err(|e| e.to_string()))
}

fn suite_or_err(cfg: &ExperimentConfig) -> Result<&'static [SeedRuns]> {
    suite(cfg).as_deref().map_err(|e| HxError::Usage(format!("seed suite failed: {e}")))
}

fn union(runs: &[RunResult]) -> Result<EvalReport> {
    zero_shot_union(&runs.iter().map(|r| &r.report).collect::<Vec<_>>())
}

fn zero_shot_direction(cfg: &ExperimentConfig) -> Result<Verdict> {
    let (mut beats_ft, mut beats_en) = (0, 0);
    let mut rows = Vec::new();
    for s in suite_or_err(cfg)? {
        let mixed = union(&s.mixed)?.zero_shot_mean().unwrap_or(f64::NAN);
        let ft = union(&s.finetune)?.zero_shot_mean().unwrap_or(f64::NAN);
        let en = s.english.report.zero_shot_mean().unwrap_or(f64::NAN);
        beats_ft += usize::from(mixed > ft);
        beats_en += usize::from(mixed >= en);
        rows.push(format!("s{}: {:.1}/{:.1}/{:.1}", s.seed, 100.0 * mixed, 100.0 * en, 100.0 * ft));
    }
    verdict(
        beats_ft >= 4 && beats_en >= 4,
        format!("mixed > full fine-tune in {beats_ft}/5, mixed >= English-only in {beats_en}/5 (mixed/en/ft: {})", rows.join(", ")),
    )
}

fn mlm_only_languages(cfg: &ExperimentConfig) -> Result<Verdict> {
    let mut good = 0;
    let mut rows = Vec::new();
    for s in suite_or_err(cfg)? {
        let mut ok = true;
        let mut checked = 0;
        for r in &s.mixed {
            let supervised: BTreeSet<&str> = r.regime.train_pairs.iter().filter(|p| p.task != TASK_MLM).map(|p| p.language.as_str()).collect();
            for lang in s.wb.data.languages.iter().filter(|l| !supervised.contains(l.as_str())) {
                for task in DOWNSTREAM_TASKS {
                    let score = r.report.get(task, lang).map_or(f64::NAN, |e| e.value);
                    let labels = &r.model.head(task)?.labels;
                    let majority = majority_baseline(task, labels, &s.wb.data.pair(task, lang)?.test)?;
                    checked += 1;
                    ok &= score > majority;
                    rows.push(format!("s{} {task}/{lang} {:.1}>{:.1}", s.seed, 100.0 * score, 100.0 * majority));
                }
            }
        }
        good += usize::from(ok && checked > 0);
    }
    verdict(good >= 4, format!("above majority in {good}/5 seeds ({})", rows.join(", ")))
}

/// Scores indexed by (init, task, language) then k; k = 0 is zero-shot.
type Curves = BTreeMap<(String, String, String), BTreeMap<usize, f64>>;

fn fewshot_curves(cfg: &ExperimentConfig, s: &SeedRuns) -> Result<Curves> {
    let mut out = Curves::new();
    let unseen: Vec<&String> = s.wb.data.languages.iter().filter(|l| !s.wb.data.seen.contains(*l)).collect();
    for lang in unseen {
        for task in DOWNSTREAM_TASKS {
            let zero_shot_mixed = s
                .mixed
                .iter()
                .find(|r| r.report.get(task, lang).is_some_and(|e| e.zero_shot))
                .ok_or_else(|| HxError::Usage(format!("({task}, {lang}) is zero-shot in neither partition")))?;
            for (init, r) in [("english", &s.english), ("mixed", zero_shot_mixed)] {
                let curve = out.entry((init.to_string(), task.to_string(), lang.clone())).or_default();
                curve.insert(0, r.report.get(task, lang).map_or(f64::NAN, |e| e.value));
                let pair = TaskLanguagePair::new(task, lang);
                for k in FEWSHOT_K {
                    let f = fewshot_finetune(&r.model, &pair, k, FewshotMode::ExistingTask, &s.wb.data, &cfg.regime.fewshot, &cfg.regime.train, s.seed)?;
                    curve.insert(k, f.score);
                }
            }
        }
    }
    Ok(out)
}

fn fewshot_trend(cfg: &ExperimentConfig) -> Result<Verdict> {
    let runs = suite_or_err(cfg)?;
    let per_seed: Vec<Curves> = runs.iter().map(|s| fewshot_curves(cfg, s)).collect::<Result<_>>()?;
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for key in per_seed[0].keys() {
        let mean: Vec<(usize, f64)> = per_seed[0][key]
            .keys()
            .map(|&k| (k, per_seed.iter().map(|c| c[key][&k]).sum::<f64>() / per_seed.len() as f64))
            .collect();
        rows.push(format!("{}/{}/{}: {}", key.0, key.1, key.2, mean.iter().map(|(_, v)| format!("{:.1}", 100.0 * v)).collect::<Vec<_>>().join(" ")));
        for w in mean.windows(2) {
            if w[1].1 < w[0].1 - 0.01 {
                failures.push(format!("{}/{}/{} drops from k={} to k={}", key.0, key.1, key.2, w[0].0, w[1].0));
            }
        }
    }
    let at5 = |c: &Curves, init: &str| -> f64 {
        let v: Vec<f64> = c.iter().filter(|(k, _)| k.0 == init).map(|(_, curve)| curve[&5]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let dominates = per_seed.iter().filter(|c| at5(c, "mixed") > at5(c, "english")).count();
    if dominates < 4 {
        failures.push(format!("mixed init ahead at k=5 in only {dominates}/5 seeds"));
    }
    verdict(
        failures.is_empty(),
        format!(
            "mixed init ahead at k=5 in {dominates}/5 seeds; mean curves k=0,5,10,20,50: {}{}",
            rows.join("; "),
            if failures.is_empty() { String::new() } else { format!("; FAILED: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 8

fn tags(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn points(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn metric_oracles() -> Result<Verdict> {
    let mut failures = Vec::new();
    // (pred, gold, precision, recall, f1) counted by hand
    let span_cases = [
        (vec!["B-PER I-PER O B-LOC"], vec!["B-PER I-PER O B-PER"], 0.5, 0.5, 0.5),
        (vec!["B-PER O", "B-LOC I-LOC I-LOC"], vec!["B-PER O", "B-LOC I-LOC O"], 0.5, 0.5, 0.5),
        (vec!["B-PER I-PER B-PER"], vec!["B-PER I-PER I-PER"], 0.0, 0.0, 0.0),
        (vec!["I-LOC I-LOC O B-PER"], vec!["B-LOC I-LOC O B-PER"], 1.0, 1.0, 1.0),
        (vec!["B-PER O O", "O O"], vec!["B-PER O B-LOC", "B-PER O"], 1.0, 1.0 / 3.0, 0.5),
        (vec!["O O"], vec!["O O"], 1.0, 1.0, 1.0),
    ];
    for (i, (p, g, wp, wr, wf)) in span_cases.iter().enumerate() {
        let pred: Vec<Vec<String>> = p.iter().map(|s| tags(s)).collect();
        let gold: Vec<Vec<String>> = g.iter().map(|s| tags(s)).collect();
        let s = span_f1(&pred, &gold)?;
        if points(s.precision) != points(*wp) || points(s.recall) != points(*wr) || points(s.f1) != points(*wf) {
            failures.push(format!("span case {i}: {s:?}"));
        }
    }

    let known = reduction(0.611, 0.695).unwrap_or(f64::NAN);
    if format!("{known:.1}") != "21.6" {
        failures.push(format!("61.1 -> 69.5 gives {known:.3}"));
    }
    for (base, sys, want) in [(0.5, 0.75, "50.0"), (0.8, 0.7, "-50.0"), (0.9, 0.9, "0.0")] {
        let r = reduction(base, sys).unwrap_or(f64::NAN);
        if format!("{r:.1}") != want {
            failures.push(format!("reduction({base}, {sys}) = {r}"));
        }
    }
    if reduction(1.0, 0.9).is_some() {
        failures.push("perfect baseline should be undefined".into());
    }

    let seen: BTreeSet<String> = ["en", "s1"].iter().map(|s| s.to_string()).collect();
    let report = |system: &str, vals: [f64; 3]| {
        let mut r = EvalReport::new(system, "single_task", "en", seen.clone());
        for (lang, v) in ["en", "s1", "u1"].iter().zip(vals) {
            r.entries.push(PairEntry { task: "pos".into(), language: lang.to_string(), metric: "accuracy".into(), value: v, zero_shot: *lang != "en", no_spans: false });
        }
        r
    };
    let er = error_reduction(&report("hyperx", [0.9, 0.695, 0.5]), &report("full_finetune", [0.9, 0.611, 0.4]))?;
    let agg = er.aggregates["pos"];
    // seen: s1 only; unseen: u1; all: mean of s1 and u1 (the pivot is excluded)
    let want = [
        (0.389 - 0.305) / 0.389 * 100.0,
        (0.6 - 0.5) / 0.6 * 100.0,
        ((1.0 - 0.5055) - (1.0 - 0.5975)) / (1.0 - 0.5055) * 100.0,
    ];
    for (got, want) in agg.iter().zip(want) {
        if got.map(|g| format!("{g:.1}")) != Some(format!("{want:.1}")) {
            failures.push(format!("aggregate reduction {got:?} vs {want:.3}"));
        }
    }
    if er.per_pair[&("pos".to_string(), "s1".to_string())].map(|v| format!("{v:.1}")).as_deref() != Some("21.6") {
        failures.push("per-pair reduction".into());
    }
    verdict(failures.is_empty(), if failures.is_empty() { format!("span F1 and error reduction oracles hold; 61.1 -> 69.5 gives {known:.1}%") } else { failures.join("; ") })
}

// ---------------------------------------------------------------- 9

fn pipeline_bytes(cfg: &ExperimentConfig) -> Result<Vec<u8>> {
    let wb = Workbench::build(cfg)?;
    let pre = pretrain_backbone(cfg, &wb)?;
    let mut out: Vec<u8> = pre.loss_curve.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect();
    let specs = [
        RunSpec { system: SystemKind::Hyperx, regime: Regime::MixedLanguage, partition: Some(PartitionId::B), task: None, seed: cfg.seed },
        RunSpec { system: SystemKind::FullFinetune, regime: Regime::SingleTask, partition: None, task: Some("pos".into()), seed: cfg.seed },
        RunSpec { system: SystemKind::Madx, regime: Regime::SingleTask, partition: None, task: Some("ner".into()), seed: cfg.seed },
    ];
    for spec in &specs {
        let r = run(cfg, &wb, &pre, spec)?;
        out.extend(metrics_jsonl(&r.outcome.history)?.into_bytes());
        for o in r.language_stage.values() {
            out.extend(metrics_jsonl(&o.history)?.into_bytes());
        }
        out.extend(r.report.to_jsonl()?.into_bytes());
    }
    Ok(out)
}

fn determinism(cfg: &ExperimentConfig) -> Result<Verdict> {
    let mut small = cfg.clone();
    small.backbone.model.num_layers = 1;
    small.backbone.model.hidden = 16;
    small.backbone.model.ff_dim = 32;
    small.backbone.pretrain.steps = 100;
    small.backbone.pretrain.warmup = 10;
    small.backbone.pretrain.sentences_per_language = 100;
    small.data.train_sentences = 100;
    small.data.mlm_sentences = 100;
    small.data.dev_sentences = 20;
    small.data.test_sentences = 20;
    small.regime.train.steps = 200;
    small.regime.train.eval_every = 50;
    small.regime.train.warmup = 20;
    small.regime.train.language_adapter_steps = 50;
    let a = pipeline_bytes(&small)?;
    let b = pipeline_bytes(&small)?;
    verdict(a == b && !a.is_empty(), format!("two full pipeline runs, {} history bytes, identical: {}", a.len(), a == b))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let cfg = desk();
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    type Criterion<'c> = (usize, &'static str, Box<dyn Fn() -> Result<Verdict> + 'c>);
    let criteria: Vec<Criterion> = vec![
        (1, "gradient correctness", Box::new(gradient_correctness)),
        (2, "identity at init", Box::new(|| identity_at_init(&cfg))),
        (3, "parameter accounting", Box::new(|| parameter_accounting(&cfg))),
        (4, "regime soundness", Box::new(|| regime_soundness(&cfg))),
        (5, "zero-shot transfer direction", Box::new(|| zero_shot_direction(&cfg))),
        (6, "MLM-only languages", Box::new(|| mlm_only_languages(&cfg))),
        (7, "few-shot trend", Box::new(|| fewshot_trend(&cfg))),
        (8, "metric oracles", Box::new(metric_oracles)),
        (9, "determinism", Box::new(|| determinism(&cfg))),
    ];
    let (mut failed, mut ran) = (0, 0);
    for (n, name, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let v = check().unwrap_or_else(|e| Verdict { pass: false, detail: format!("error: {e}") });
        failed += usize::from(!v.pass);
        println!("{} {n} {name} [{:.0?}]: {}", if v.pass { "PASS" } else { "FAIL" }, t.elapsed(), v.detail);
    }
    println!("{failed} of {ran} criteria failed");
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
