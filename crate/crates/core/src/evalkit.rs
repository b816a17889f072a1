//! Span F1, tagging accuracy, zero-shot grid evaluation, error-reduction
//! reports and the tabular exports built on them.
//!
//! Scores are fractions in `[0, 1]`; tables print them as percentages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{HxError, Result};
use crate::model::{Model, TaggedExample, TASK_NER, TASK_POS};

/// A labelled span: type and token range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

/// Extracts spans from a BIO sequence. An `I-X` that does not continue an
/// `X` span opens a new one, as the CoNLL scorer does.
pub fn extract_spans(tags: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, label) = match tag.split_once('-') {
            Some((p, l)) if p == "B" || p == "I" => (p, l),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && open.as_ref().is_some_and(|(l, _)| l == label);
        if !continues {
            if let Some((l, s)) = open.take() {
                spans.push(Span { label: l, start: s, end: i });
            }
            if prefix != "O" {
                open = Some((label.to_string(), i));
            }
        }
    }
    if let Some((l, s)) = open {
        spans.push(Span { label: l, start: s, end: tags.len() });
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Neither gold nor prediction contained a span; scored as 1.0.
    pub no_spans: bool,
}

fn check_aligned<T>(pred: &[Vec<T>], gold: &[Vec<T>]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(HxError::Alignment(format!("{} predicted sentences for {} gold", pred.len(), gold.len())));
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(HxError::Alignment(format!("sentence {i}: {} predicted tags for {} gold", p.len(), g.len())));
        }
    }
    Ok(())
}

/// Micro-averaged exact-match span F1.
pub fn span_f1(pred: &[Vec<String>], gold: &[Vec<String>]) -> Result<SpanScore> {
    check_aligned(pred, gold)?;
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let ps: BTreeSet<Span> = extract_spans(p).into_iter().collect();
        let gs: BTreeSet<Span> = extract_spans(g).into_iter().collect();
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    if np == 0 && ng == 0 {
        return Ok(SpanScore { precision: 1.0, recall: 1.0, f1: 1.0, no_spans: true });
    }
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let recall = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(SpanScore { precision, recall, f1, no_spans: false })
}

/// Token-level accuracy over all tokens.
pub fn tag_accuracy<T: PartialEq>(pred: &[Vec<T>], gold: &[Vec<T>]) -> Result<f64> {
    check_aligned(pred, gold)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(HxError::UndefinedMetric("accuracy over an empty evaluation set".into()));
    }
    let correct: usize = pred.iter().zip(gold).map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count()).sum();
    Ok(correct as f64 / total as f64)
}

/// Metric name used for a task.
pub fn metric_for(task: &str) -> &'static str {
    if task == TASK_POS {
        "accuracy"
    } else {
        "f1"
    }
}

/// Scores of one (task, language) evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub value: f64,
    pub no_spans: bool,
}

/// Scores `examples` with predictions read through head `head`. Heads
/// whose labels are BIO tags are scored by span F1, others by accuracy.
pub fn score_examples(model: &Model, task: &str, head: &str, language: &str, examples: &[TaggedExample]) -> Result<PairScore> {
    if examples.is_empty() {
        return Err(HxError::UndefinedMetric(format!("no evaluation data for ({task}, {language})")));
    }
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.ids.as_slice()).collect();
    let pred = model.predict(task, head, language, &seqs, 64)?;
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    let labels = &model.head(head)?.labels;
    if labels.iter().any(|l| l.starts_with("B-")) {
        let to_str = |v: &Vec<Vec<usize>>| -> Vec<Vec<String>> {
            v.iter().map(|s| s.iter().map(|&i| labels[i].clone()).collect()).collect()
        };
        let s = span_f1(&to_str(&pred), &to_str(&gold))?;
        Ok(PairScore { value: s.f1, no_spans: s.no_spans })
    } else {
        Ok(PairScore { value: tag_accuracy(&pred, &gold)?, no_spans: false })
    }
}

/// Score of the trivial predictor: the most frequent gold label for
/// accuracy tasks, all-`O` for span tasks.
pub fn majority_baseline(task: &str, labels: &[String], examples: &[TaggedExample]) -> Result<f64> {
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    if labels.iter().any(|l| l.starts_with("B-")) {
        let o = labels.iter().position(|l| l == "O").ok_or_else(|| HxError::Config(format!("{task} labels lack O")))?;
        let to_str = |v: &Vec<Vec<usize>>| -> Vec<Vec<String>> {
            v.iter().map(|s| s.iter().map(|&i| labels[i].clone()).collect()).collect()
        };
        let pred: Vec<Vec<usize>> = gold.iter().map(|s| vec![o; s.len()]).collect();
        Ok(span_f1(&to_str(&pred), &to_str(&gold))?.f1)
    } else {
        let mut counts = vec![0usize; labels.len()];
        gold.iter().flatten().for_each(|&l| counts[l] += 1);
        let best = (0..counts.len()).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
        let pred: Vec<Vec<usize>> = gold.iter().map(|s| vec![best; s.len()]).collect();
        tag_accuracy(&pred, &gold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub task: String,
    pub language: String,
    pub metric: String,
    pub value: f64,
    pub zero_shot: bool,
    pub no_spans: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub regime: String,
    pub baseline: Option<String>,
    pub pivot: String,
    /// Languages seen in backbone pretraining.
    pub seen: BTreeSet<String>,
    pub entries: Vec<PairEntry>,
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl EvalReport {
    pub fn new(system: &str, regime: &str, pivot: &str, seen: BTreeSet<String>) -> Self {
        Self { system: system.into(), regime: regime.into(), baseline: None, pivot: pivot.into(), seen, entries: Vec::new() }
    }

    pub fn get(&self, task: &str, language: &str) -> Option<&PairEntry> {
        self.entries.iter().find(|e| e.task == task && e.language == language)
    }

    pub fn tasks(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.task.clone()).collect()
    }

    pub fn languages(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.language.clone()).collect()
    }

    /// Means over one task's entries; the pivot never counts.
    pub fn aggregates(&self, task: &str) -> Aggregates {
        let pick = |f: &dyn Fn(&PairEntry) -> bool| -> Vec<f64> {
            self.entries.iter().filter(|e| e.task == task && e.language != self.pivot && f(e)).map(|e| e.value).collect()
        };
        Aggregates {
            seen: mean(&pick(&|e| self.seen.contains(&e.language))),
            unseen: mean(&pick(&|e| !self.seen.contains(&e.language))),
            all: mean(&pick(&|_| true)),
        }
    }

    /// Mean over every non-pivot zero-shot entry, all tasks together.
    pub fn zero_shot_mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.entries.iter().filter(|e| e.zero_shot && e.language != self.pivot).map(|e| e.value).collect();
        mean(&v)
    }

    /// Merges entries of another report on disjoint pairs.
    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        for e in &other.entries {
            if self.get(&e.task, &e.language).is_some() {
                return Err(HxError::Join(format!("pair ({}, {}) present in both reports", e.task, e.language)));
            }
            self.entries.push(e.clone());
        }
        self.entries.sort_by(|a, b| (&a.task, &a.language).cmp(&(&b.task, &b.language)));
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            let rec = serde_json::json!({
                "system": self.system,
                "regime": self.regime,
                "task": e.task,
                "language": e.language,
                "metric": e.metric,
                "value": e.value,
                "zero_shot": e.zero_shot,
                "no_spans": e.no_spans,
            });
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Everything a grid evaluation needs about one pair.
pub struct EvalPair<'d> {
    pub task: String,
    pub language: String,
    pub examples: &'d [TaggedExample],
    pub zero_shot: bool,
}

fn eval_one(model: &Model, p: &EvalPair) -> Result<PairEntry> {
    let s = score_examples(model, &p.task, &p.task, &p.language, p.examples)?;
    Ok(PairEntry {
        task: p.task.clone(),
        language: p.language.clone(),
        metric: metric_for(&p.task).into(),
        value: s.value,
        zero_shot: p.zero_shot,
        no_spans: s.no_spans,
    })
}

/// Scores every pair's test data. Pairs are evaluated in parallel when the
/// `parallel` feature is on; the report order does not depend on it.
pub fn zero_shot_grid(model: &Model, pairs: &[EvalPair], mut report: EvalReport) -> Result<EvalReport> {
    for p in pairs {
        model.check_source(&p.task, &p.language)?;
    }
    let entries = crate::par::map(pairs, |p| eval_one(model, p))?;
    report.entries.extend(entries);
    report.entries.sort_by(|a, b| (&a.task, &a.language).cmp(&(&b.task, &b.language)));
    Ok(report)
}

/// Reduction of error relative to a baseline score, in percent. `None`
/// when the baseline is perfect.
pub fn reduction(base: f64, system: f64) -> Option<f64> {
    let (eb, es) = (1.0 - base, 1.0 - system);
    if eb == 0.0 {
        None
    } else {
        Some((eb - es) / eb * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReduction {
    pub system: String,
    pub baseline: String,
    /// (task, language) → percent, or `None` where undefined.
    pub per_pair: BTreeMap<(String, String), Option<f64>>,
    /// task → (seen, unseen, all) reductions of the aggregate means.
    pub aggregates: BTreeMap<String, [Option<f64>; 3]>,
}

pub fn error_reduction(system: &EvalReport, baseline: &EvalReport) -> Result<ErrorReduction> {
    let key = |r: &EvalReport| -> BTreeSet<(String, String, String)> {
        r.entries.iter().map(|e| (e.task.clone(), e.language.clone(), e.metric.clone())).collect()
    };
    if key(system) != key(baseline) {
        return Err(HxError::Join(format!(
            "{} and {} do not cover the same pairs with the same metrics",
            system.system, baseline.system
        )));
    }
    let mut per_pair = BTreeMap::new();
    for e in &system.entries {
        let b = baseline.get(&e.task, &e.language).expect("same pairs");
        per_pair.insert((e.task.clone(), e.language.clone()), reduction(b.value, e.value));
    }
    let mut aggregates = BTreeMap::new();
    for t in system.tasks() {
        let (s, b) = (system.aggregates(&t), baseline.aggregates(&t));
        let r = |x: Option<f64>, y: Option<f64>| x.zip(y).and_then(|(x, y)| reduction(y, x));
        aggregates.insert(t, [r(s.seen, b.seen), r(s.unseen, b.unseen), r(s.all, b.all)]);
    }
    Ok(ErrorReduction { system: system.system.clone(), baseline: baseline.system.clone(), per_pair, aggregates })
}

fn check_joinable(reports: &[EvalReport], task: &str) -> Result<String> {
    let metrics: BTreeSet<&str> =
        reports.iter().flat_map(|r| r.entries.iter().filter(|e| e.task == task).map(|e| e.metric.as_str())).collect();
    if metrics.len() > 1 {
        return Err(HxError::Join(format!("task {task} scored with different metrics: {metrics:?}")));
    }
    let pivots: BTreeSet<&str> = reports.iter().map(|r| r.pivot.as_str()).collect();
    if pivots.len() > 1 {
        return Err(HxError::Join(format!("reports disagree on the pivot language: {pivots:?}")));
    }
    metrics.into_iter().next().map(str::to_string).ok_or_else(|| HxError::Join(format!("no report scores task {task}")))
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// CSV grid for one task: a row per language, a column per system, then
/// the seen/unseen/all aggregate rows.
pub fn comparison_csv(reports: &[EvalReport], task: &str) -> Result<String> {
    check_joinable(reports, task)?;
    let languages: BTreeSet<String> = reports.iter().flat_map(|r| r.languages()).collect();
    let mut out = String::from("language");
    for r in reports {
        write!(out, ",{}", r.system).expect("string write");
    }
    out.push('\n');
    for l in &languages {
        out.push_str(l);
        for r in reports {
            write!(out, ",{}", pct(r.get(task, l).map(|e| e.value))).expect("string write");
        }
        out.push('\n');
    }
    for (name, pick) in [("seen", 0), ("unseen", 1), ("all", 2)] {
        out.push_str(name);
        for r in reports {
            let a = r.aggregates(task);
            write!(out, ",{}", pct([a.seen, a.unseen, a.all][pick])).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Plain-text table: pivot row, seen block, unseen block, aggregates.
pub fn comparison_table(reports: &[EvalReport], task: &str) -> Result<String> {
    let metric = check_joinable(reports, task)?;
    let pivot = reports[0].pivot.clone();
    let seen = reports[0].seen.clone();
    let languages: BTreeSet<String> = reports.iter().flat_map(|r| r.languages()).collect();
    let width = reports.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6) + 2;
    let mut out = String::new();
    writeln!(out, "{task} ({metric})").expect("string write");
    let row = |out: &mut String, name: &str, vals: Vec<String>| {
        write!(out, "{name:<10}").expect("string write");
        for v in vals {
            write!(out, "{v:>width$}").expect("string write");
        }
        out.push('\n');
    };
    row(&mut out, "", reports.iter().map(|r| r.system.clone()).collect());
    let value = |l: &str| reports.iter().map(|r| pct(r.get(task, l).map(|e| e.value))).collect::<Vec<_>>();
    if languages.contains(&pivot) {
        row(&mut out, &pivot, value(&pivot));
    }
    for block in [true, false] {
        out.push_str(if block { "-- seen\n" } else { "-- unseen\n" });
        for l in languages.iter().filter(|l| **l != pivot && seen.contains(*l) == block) {
            row(&mut out, l, value(l));
        }
    }
    out.push_str("--\n");
    for (name, pick) in [("seen", 0), ("unseen", 1), ("all", 2)] {
        let vals = reports
            .iter()
            .map(|r| {
                let a = r.aggregates(task);
                pct([a.seen, a.unseen, a.all][pick])
            })
            .collect();
        row(&mut out, name, vals);
    }
    Ok(out)
}

/// Default task list for the exports.
pub fn report_tasks() -> [&'static str; 2] {
    [TASK_POS, TASK_NER]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn span_hand_oracle() {
        let gold = vec![tags("B-PER I-PER O B-LOC O")];
        let pred = vec![tags("B-PER I-PER O O B-LOC")];
        let s = span_f1(&pred, &gold).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn span_edges() {
        let gold = vec![tags("B-PER O")];
        assert_eq!(span_f1(&gold, &gold).unwrap().f1, 1.0);
        assert_eq!(span_f1(&[tags("O O")], &gold).unwrap().f1, 0.0);
        let empty = span_f1(&[tags("O O")], &[tags("O O")]).unwrap();
        assert!(empty.no_spans && empty.f1 == 1.0);
        assert!(matches!(span_f1(&[tags("O")], &gold), Err(HxError::Alignment(_))));
    }

    #[test]
    fn lenient_span_starts() {
        assert_eq!(extract_spans(&tags("O I-PER I-PER B-LOC I-PER")), vec![
            Span { label: "PER".into(), start: 1, end: 3 },
            Span { label: "LOC".into(), start: 3, end: 4 },
            Span { label: "PER".into(), start: 4, end: 5 },
        ]);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(tag_accuracy(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 0]]).unwrap(), 0.75);
        assert!(matches!(tag_accuracy::<usize>(&[], &[]), Err(HxError::UndefinedMetric(_))));
    }

    #[test]
    fn reduction_values() {
        let r = reduction(0.611, 0.695).unwrap();
        assert_eq!((r * 10.0).round() / 10.0, 21.6);
        assert_eq!(reduction(0.5, 0.5), Some(0.0));
        assert_eq!(reduction(0.4, 1.0), Some(100.0));
        assert_eq!(reduction(1.0, 0.9), None);
    }

    fn report(system: &str, vals: &[(&str, &str, f64)]) -> EvalReport {
        let mut r = EvalReport::new(system, "mixed_language", "en", ["en", "s1"].iter().map(|s| s.to_string()).collect());
        for (t, l, v) in vals {
            r.entries.push(PairEntry {
                task: t.to_string(),
                language: l.to_string(),
                metric: metric_for(t).into(),
                value: *v,
                zero_shot: *l != "en",
                no_spans: false,
            });
        }
        r
    }

    #[test]
    fn aggregates_exclude_pivot() {
        let r = report("hx", &[("pos", "en", 0.9), ("pos", "s1", 0.6), ("pos", "u1", 0.4)]);
        let a = r.aggregates("pos");
        assert_eq!(a.seen, Some(0.6));
        assert_eq!(a.unseen, Some(0.4));
        assert!((a.all.unwrap() - 0.5).abs() < 1e-15);
        assert!((r.zero_shot_mean().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn error_reduction_join() {
        let a = report("hx", &[("pos", "s1", 0.695)]);
        let b = report("ft", &[("pos", "s1", 0.611)]);
        let er = error_reduction(&a, &b).unwrap();
        let v = er.per_pair[&("pos".to_string(), "s1".to_string())].unwrap();
        assert!((v - 21.593).abs() < 1e-3);
        assert!(error_reduction(&a, &report("ft", &[("pos", "u1", 0.5)])).is_err());
        assert!(error_reduction(&a, &a).unwrap().per_pair.values().all(|v| *v == Some(0.0)));
    }

    #[test]
    fn csv_shape() {
        let vals = [("pos", "en", 0.9), ("pos", "s1", 0.6), ("pos", "u1", 0.4)];
        let rs = vec![report("a", &vals), report("b", &vals), report("c", &vals)];
        let csv = comparison_csv(&rs, "pos").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
        let table = comparison_table(&rs, "pos").unwrap();
        assert!(table.contains("-- unseen"));
        let mut bad = report("d", &vals);
        bad.entries[0].metric = "f1".into();
        assert!(matches!(comparison_csv(&[rs[0].clone(), bad], "pos"), Err(HxError::Join(_))));
    }

    #[test]
    fn majority_values() {
        let labels: Vec<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let ex = vec![TaggedExample { ids: vec![3, 3, 3], labels: vec![1, 1, 0] }];
        assert!((majority_baseline("pos", &labels, &ex).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let bio: Vec<String> = ["O", "B-PER", "I-PER"].iter().map(|s| s.to_string()).collect();
        let ex = vec![TaggedExample { ids: vec![3, 3], labels: vec![1, 2] }];
        assert_eq!(majority_baseline(TASK_NER, &bio, &ex).unwrap(), 0.0);
    }
}
