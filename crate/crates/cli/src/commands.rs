use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hyperx::backbone::{corpus_hash, Pretrained};
use hyperx::checkpoint::{
    create_fresh_dir, git_describe, load_backbone, load_run_manifest, masking_note, read_json, restore_params, save_backbone, save_run,
    write_json, BackboneManifest, FewshotRecord, RunManifest, BEST,
};
use hyperx::config::ExperimentConfig;
use hyperx::evalkit::{comparison_csv, comparison_table, error_reduction, report_tasks, EvalReport};
use hyperx::experiment::{build_model, evaluate, plan, pretrain_backbone, run, zero_shot_union, RunSpec, Workbench};
use hyperx::model::{Model, DOWNSTREAM_TASKS};
use hyperx::trainer::{fewshot_finetune, FewshotMode, MetricRecord, TaskLanguagePair};
use hyperx::{HxError, Result};

use crate::Format;

const REPORT: &str = "report.json";

pub struct Overrides {
    pub system: Option<String>,
    pub regime: Option<String>,
    pub partition: Option<String>,
    pub task: Option<String>,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(HxError::Config(format!("config file {} not found", path.display())));
    }
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    Ok(cfg)
}

fn default_backbone_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.join(format!("{}-backbone", cfg.output.name))
}

pub fn pretrain(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = out.unwrap_or_else(|| default_backbone_dir(&cfg));
    if dir.exists() {
        return Err(HxError::Usage(format!("{} already exists; choose another --out", dir.display())));
    }
    let wb = Workbench::build(&cfg)?;
    log::info!("pretraining {} steps on {} languages", cfg.backbone.pretrain.steps, wb.data.seen.len());
    let pre = pretrain_backbone(&cfg, &wb)?;
    let manifest = BackboneManifest {
        config: cfg.backbone.model.clone(),
        pretrain: cfg.backbone.pretrain.clone(),
        seed: cfg.seed,
        steps: cfg.backbone.pretrain.steps,
        corpus_hash: pre.corpus_hash.clone(),
        languages: wb.data.seen.iter().cloned().collect(),
        masking: masking_note(cfg.backbone.pretrain.mask_rate),
        initial_loss: pre.initial_loss,
        final_loss: pre.final_loss,
        git_describe: git_describe(),
    };
    save_backbone(&dir, &pre, &manifest)?;
    println!("final MLM loss {:.4} (initial {:.4})", pre.final_loss, pre.initial_loss);
    println!("backbone checkpoint: {}", dir.display());
    Ok(())
}

/// Loads a backbone and checks it was pretrained on this config's corpus.
fn matching_backbone(cfg: &ExperimentConfig, wb: &Workbench, dir: &Path) -> Result<Pretrained> {
    if !dir.join("manifest.json").is_file() {
        return Err(HxError::Config(format!("no backbone checkpoint at {}; run `hyperx pretrain` first", dir.display())));
    }
    let (pre, manifest) = load_backbone(dir)?;
    if manifest.config != cfg.backbone.model {
        return Err(HxError::Config(format!("backbone at {} was built with a different [backbone] section", dir.display())));
    }
    let expected = corpus_hash(&wb.pretraining_corpus(manifest.pretrain.sentences_per_language)?);
    if expected != manifest.corpus_hash {
        return Err(HxError::Config(format!(
            "backbone at {} was pretrained on another corpus (seed {} vs {})",
            dir.display(),
            manifest.seed,
            cfg.seed
        )));
    }
    Ok(pre)
}

fn run_name(cfg: &ExperimentConfig) -> String {
    let r = &cfg.regime;
    let mut name = format!("{}-{}-{}", cfg.output.name, r.system, r.regime);
    for part in [&r.partition, &r.task].into_iter().flatten() {
        name.push('-');
        name.push_str(part);
    }
    format!("{name}-s{}", cfg.seed)
}

fn write_report_files(dir: &Path, cfg: &ExperimentConfig, report: &EvalReport) -> Result<()> {
    write_json(&dir.join(REPORT), report)?;
    for f in &cfg.output.formats {
        match f.as_str() {
            "jsonl" => fs::write(dir.join("report.jsonl"), report.to_jsonl()?)?,
            "csv" => {
                for t in report.tasks() {
                    fs::write(dir.join(format!("report_{t}.csv")), comparison_csv(std::slice::from_ref(report), &t)?)?;
                }
            }
            _ => {
                for t in report.tasks() {
                    fs::write(dir.join(format!("report_{t}.txt")), comparison_table(std::slice::from_ref(report), &t)?)?;
                }
            }
        }
    }
    Ok(())
}

pub fn train(config: &Path, o: Overrides, backbone: Option<PathBuf>, name: Option<String>) -> Result<()> {
    let mut cfg = load_config(config)?;
    let r = &mut cfg.regime;
    if let Some(s) = o.system {
        r.system = s;
    }
    if let Some(s) = o.regime {
        r.regime = s;
    }
    if o.partition.is_some() {
        r.partition = o.partition;
    }
    if o.task.is_some() {
        r.task = o.task;
    }
    cfg.validate()?;
    let spec = RunSpec::from_config(&cfg)?;
    let wb = Workbench::build(&cfg)?;
    let planned = plan(&cfg, &wb, &spec)?;
    let dir = cfg.output.dir.join(name.unwrap_or_else(|| run_name(&cfg)));
    if dir.exists() {
        return Err(HxError::Usage(format!("{} already exists; runs are write-once", dir.display())));
    }
    let backbone_dir = backbone.unwrap_or_else(|| default_backbone_dir(&cfg));
    let pre = matching_backbone(&cfg, &wb, &backbone_dir)?;
    log::info!("training {} under {} for {} steps", cfg.regime.system, cfg.regime.regime, planned.steps);
    let result = run(&cfg, &wb, &pre, &spec)?;
    let mut history: Vec<MetricRecord> = Vec::new();
    for (lang, o) in &result.language_stage {
        history.push(MetricRecord {
            step: o.batches,
            task: format!("language_adapter:{lang}"),
            language: lang.clone(),
            metric: "final_mlm_loss".into(),
            value: o.final_loss,
        });
    }
    history.extend(result.outcome.history.iter().cloned());
    let manifest = RunManifest {
        name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        kind: "train".into(),
        system: cfg.regime.system.clone(),
        regime: cfg.regime.regime.clone(),
        partition: cfg.regime.partition.clone(),
        task: cfg.regime.task.clone(),
        seed: cfg.seed,
        git_describe: git_describe(),
        config: cfg.to_toml()?,
        backbone_dir: backbone_dir.clone(),
        backbone_corpus_hash: pre.corpus_hash.clone(),
        masking: masking_note(cfg.regime.train.mask_rate),
        census: result.model.census(),
        train_pairs: result.regime.train_pairs.clone(),
        zero_shot_pairs: result.regime.eval_pairs.clone(),
        best_step: result.outcome.best_step,
        best_score: result.outcome.best_score,
        best_checkpoint: PathBuf::from(BEST),
        history,
        fewshot: None,
    };
    save_run(&dir, &manifest, &result.model.store)?;
    write_report_files(&dir, &cfg, &result.report)?;
    if let Some(m) = result.report.zero_shot_mean() {
        println!("zero-shot mean {:.2} over {} pairs", 100.0 * m, result.report.entries.iter().filter(|e| e.zero_shot).count());
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

struct LoadedRun {
    cfg: ExperimentConfig,
    wb: Workbench,
    manifest: RunManifest,
    model: Model,
    spec: RunSpec,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = load_run_manifest(dir)?;
    if manifest.kind != "train" {
        return Err(HxError::Usage(format!("{} is a {} run; only training runs can be reloaded", dir.display(), manifest.kind)));
    }
    let cfg = ExperimentConfig::from_toml(&manifest.config)?;
    let spec = RunSpec::from_config(&cfg)?;
    let wb = Workbench::build(&cfg)?;
    let pre = matching_backbone(&cfg, &wb, &manifest.backbone_dir)?;
    let mut model = build_model(&cfg, &wb, &pre, &spec)?;
    restore_params(&dir.join(&manifest.best_checkpoint), &mut model.store)?;
    Ok(LoadedRun { cfg, wb, manifest, model, spec })
}

fn render(reports: &[EvalReport], format: Format) -> Result<String> {
    let mut out = String::new();
    for t in report_tasks() {
        if !reports.iter().any(|r| r.tasks().contains(t)) {
            continue;
        }
        match format {
            Format::Csv => {
                out.push_str(&format!("# {t}\n"));
                out.push_str(&comparison_csv(reports, t)?);
            }
            Format::Table => {
                out.push_str(&comparison_table(reports, t)?);
                out.push('\n');
            }
            Format::Jsonl => {}
        }
    }
    if format == Format::Jsonl {
        for r in reports {
            out.push_str(&r.to_jsonl()?);
        }
    }
    Ok(out)
}

pub fn eval(runs: &[PathBuf], format: Format) -> Result<()> {
    let mut reports = Vec::new();
    for dir in runs {
        let run = load_run(dir)?;
        let regime = plan(&run.cfg, &run.wb, &run.spec)?;
        let mut report = evaluate(&run.model, &run.wb, &regime)?;
        report.system = run.manifest.name.clone();
        reports.push(report);
    }
    print!("{}", render(&reports, format)?);
    Ok(())
}

pub fn fewshot(run_dir: &Path, languages: Vec<String>, tasks: Vec<String>, k: Vec<usize>, new_labels: bool) -> Result<()> {
    let run = load_run(run_dir)?;
    let data = &run.wb.data;
    let languages = if languages.is_empty() {
        data.languages.iter().filter(|l| !data.seen.contains(*l)).cloned().collect()
    } else {
        languages
    };
    let tasks = if tasks.is_empty() { DOWNSTREAM_TASKS.iter().map(|t| t.to_string()).collect() } else { tasks };
    let (mode, mode_name) = if new_labels { (FewshotMode::NewLabelSet, "new_label_set") } else { (FewshotMode::ExistingTask, "existing_task") };
    let fc = &run.cfg.regime.fewshot;
    let ks = match (k.is_empty(), new_labels) {
        (false, _) => k,
        (true, false) => fc.k_values.clone(),
        (true, true) => fc.shots_per_label.clone(),
    };
    let jobs: Vec<(TaskLanguagePair, usize)> =
        tasks.iter().flat_map(|t| languages.iter().flat_map(|l| ks.iter().map(|&k| (TaskLanguagePair::new(t, l), k)).collect::<Vec<_>>())).collect();
    let parent = run_dir.parent().unwrap_or(Path::new("."));
    let dirs: Vec<PathBuf> = jobs
        .iter()
        .map(|(p, k)| parent.join(format!("{}-fewshot-{}-{}-{}{}", run.manifest.name, p.task, p.language, if new_labels { "shots" } else { "k" }, k)))
        .collect();
    if let Some(d) = dirs.iter().find(|d| d.exists()) {
        return Err(HxError::Usage(format!("{} already exists; runs are write-once", d.display())));
    }
    let outcomes = hyperx::par::map(&jobs, |(p, k)| fewshot_finetune(&run.model, p, *k, mode, data, fc, &run.cfg.regime.train, run.cfg.seed))?;
    for ((o, dir), (p, k)) in outcomes.iter().zip(&dirs).zip(&jobs) {
        let history = vec![MetricRecord {
            step: fc.epochs as u64,
            task: p.task.clone(),
            language: p.language.clone(),
            metric: hyperx::evalkit::metric_for(&p.task).into(),
            value: o.score,
        }];
        let manifest = RunManifest {
            name: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            kind: "fewshot".into(),
            census: o.model.census(),
            train_pairs: vec![p.clone()],
            zero_shot_pairs: vec![],
            best_step: fc.epochs as u64,
            best_score: Some(o.score),
            history,
            fewshot: Some(FewshotRecord {
                source_run: run_dir.to_path_buf(),
                pair: p.clone(),
                k: *k,
                mode: mode_name.into(),
                head: o.head.clone(),
                sampled: o.sampled.clone(),
                score: o.score,
                epoch_losses: o.epoch_losses.clone(),
            }),
            git_describe: git_describe(),
            ..run.manifest.clone()
        };
        save_run(dir, &manifest, &o.model.store)?;
        println!("{p} k={k}: {:.2}", 100.0 * o.score);
    }
    Ok(())
}

/// Reports of several run directories, complementary runs of one
/// system and regime joined into a single column.
fn joined_reports(runs: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut groups: BTreeMap<String, (usize, Vec<EvalReport>)> = BTreeMap::new();
    for (i, dir) in runs.iter().enumerate() {
        let m = load_run_manifest(dir)?;
        if m.kind != "train" {
            return Err(HxError::Usage(format!("{} is not a training run", dir.display())));
        }
        let report: EvalReport = read_json(&dir.join(REPORT))?;
        let label = format!("{}:{}", m.system, m.regime);
        groups.entry(label).or_insert((i, Vec::new())).1.push(report);
    }
    let mut ordered: Vec<(usize, String, Vec<EvalReport>)> = groups.into_iter().map(|(l, (i, r))| (i, l, r)).collect();
    ordered.sort_by_key(|(i, _, _)| *i);
    ordered
        .into_iter()
        .map(|(_, label, reports)| {
            let refs: Vec<&EvalReport> = reports.iter().collect();
            let mut joined = if refs.len() == 1 { reports[0].clone() } else { zero_shot_union(&refs)? };
            joined.system = label;
            Ok(joined)
        })
        .collect()
}

pub fn report(runs: &[PathBuf], baseline: Option<&str>, format: Format, out: Option<PathBuf>) -> Result<()> {
    let reports = joined_reports(runs)?;
    let mut text = render(&reports, format)?;
    if let Some(b) = baseline {
        let matches: Vec<&EvalReport> = reports.iter().filter(|r| r.system == b || r.system.split(':').next() == Some(b)).collect();
        let base = match matches.as_slice() {
            [one] => *one,
            [] => return Err(HxError::Usage(format!("no run matches baseline {b:?}"))),
            _ => return Err(HxError::Usage(format!("baseline {b:?} is ambiguous; use system:regime"))),
        };
        text.push_str(&format!("error reduction (%) w.r.t. {}\n", base.system));
        text.push_str("system,task,seen,unseen,all\n");
        let only = |r: &EvalReport, task: &str| EvalReport { entries: r.entries.iter().filter(|e| e.task == task).cloned().collect(), ..r.clone() };
        for r in reports.iter().filter(|r| r.system != base.system) {
            for task in r.tasks().intersection(&base.tasks()) {
                let er = error_reduction(&only(r, task), &only(base, task))?;
                let agg = er.aggregates[task];
                let f = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
                text.push_str(&format!("{},{task},{},{},{}\n", r.system, f(agg[0]), f(agg[1]), f(agg[2])));
            }
        }
    }
    print!("{text}");
    if let Some(dir) = out {
        create_fresh_dir(&dir)?;
        let ext = match format {
            Format::Csv => "csv",
            Format::Table => "txt",
            Format::Jsonl => "jsonl",
        };
        fs::write(dir.join(format!("report.{ext}")), &text)?;
        write_json(&dir.join("runs.json"), &runs)?;
    }
    Ok(())
}
