//! Task metrics and the benchmark aggregation: per-task scores, their
//! average and size/performance ratios against a reference model.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kv::KvDocument;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} gold items")));
    }
    Ok(())
}

/// Fraction of exactly matching items.
pub fn accuracy<T: PartialEq>(predictions: &[T], gold: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), gold.len())?;
    if gold.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// A decoded entity: type and half-open token range.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Tag<'_> {
    match tag.split_once('-') {
        Some(("B", kind)) => Tag::Begin(kind),
        Some(("I", kind)) => Tag::Inside(kind),
        _ => match tag {
            "B" => Tag::Begin(""),
            "I" => Tag::Inside(""),
            // "O" and anything unrecognized.
            _ => Tag::Outside,
        },
    }
}

/// Decodes BIO tags into entities. An `I-X` that does not continue an `X`
/// entity opens a new one, as if it were `B-X`.
pub fn entity_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Entity> {
    let mut out = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = parse_tag(tag.as_ref());
        let continues = matches!((tag, open), (Tag::Inside(k), Some((o, _))) if k == o);
        if continues {
            continue;
        }
        if let Some((kind, start)) = open.take() {
            out.push(Entity {
                kind: kind.to_string(),
                start,
                end: i,
            });
        }
        open = match tag {
            Tag::Begin(k) | Tag::Inside(k) => Some((k, i)),
            Tag::Outside => None,
        };
    }
    if let Some((kind, start)) = open {
        out.push(Entity {
            kind: kind.to_string(),
            start,
            end: tags.len(),
        });
    }
    out
}

/// Micro-averaged precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Entity counts that add up across sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntityCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EntityCounts {
    pub fn add<S: AsRef<str>>(&mut self, pred: &[S], gold: &[S]) -> Result<()> {
        check_lengths(pred.len(), gold.len())?;
        let p = entity_spans(pred);
        let g = entity_spans(gold);
        let mut remaining: HashMap<&Entity, usize> = HashMap::new();
        for e in &g {
            *remaining.entry(e).or_default() += 1;
        }
        for e in &p {
            if let Some(n) = remaining.get_mut(e).filter(|n| **n > 0) {
                *n -= 1;
                self.correct += 1;
            }
        }
        self.predicted += p.len();
        self.gold += g.len();
        Ok(())
    }

    /// With no entities on either side the tagging is perfect and every
    /// score is 1.
    pub fn scores(&self) -> PrfScores {
        if self.predicted == 0 && self.gold == 0 {
            return PrfScores {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.correct, self.predicted);
        let recall = ratio(self.correct, self.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrfScores { precision, recall, f1 }
    }
}

/// Entity-level scores for one tag sequence: an entity counts only on an
/// exact type and boundary match.
pub fn entity_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<PrfScores> {
    let mut counts = EntityCounts::default();
    counts.add(pred, gold)?;
    Ok(counts.scores())
}

/// Entity-level scores micro-averaged over sentences.
pub fn entity_f1_corpus<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<PrfScores> {
    check_lengths(pred.len(), gold.len())?;
    let mut counts = EntityCounts::default();
    for (p, g) in pred.iter().zip(gold) {
        counts.add(p, g)?;
    }
    Ok(counts.scores())
}

/// Micro-averaged per-token F1 over all labels. With exactly one prediction
/// per token this equals token accuracy.
pub fn token_f1<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    if gold.is_empty() {
        return Err(Error::InvalidArgument("token F1 of an empty set".into()));
    }
    let tp = pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64;
    // Every miss is one false positive and one false negative.
    let misses = gold.len() as f64 - tp;
    Ok(2.0 * tp / (2.0 * tp + 2.0 * misses))
}

/// Answer normalization for extractive QA: lowercase, drop punctuation,
/// drop articles and collapse whitespace.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerNormalizer {
    pub articles: Vec<String>,
}

pub const SPANISH_ARTICLES: [&str; 8] = ["el", "la", "los", "las", "un", "una", "unos", "unas"];

impl Default for AnswerNormalizer {
    fn default() -> Self {
        Self {
            articles: SPANISH_ARTICLES.iter().map(|a| a.to_string()).collect(),
        }
    }
}

impl AnswerNormalizer {
    pub fn tokens(&self, text: &str) -> Vec<String> {
        let lowered = text.to_lowercase();
        let cleaned: String = lowered
            .chars()
            .map(|c| {
                if c.is_alphanumeric() || c.is_whitespace() {
                    c
                } else {
                    ' '
                }
            })
            .collect();
        cleaned
            .split_whitespace()
            .filter(|w| !self.articles.iter().any(|a| a == w))
            .map(str::to_string)
            .collect()
    }

    pub fn normalize(&self, text: &str) -> String {
        self.tokens(text).join(" ")
    }

    /// 1 when the normalized prediction equals any normalized gold answer.
    pub fn exact_match<S: AsRef<str>>(&self, prediction: &str, golds: &[S]) -> Result<f64> {
        check_golds(golds.len())?;
        let p = self.normalize(prediction);
        Ok(golds.iter().any(|g| self.normalize(g.as_ref()) == p) as u8 as f64)
    }

    /// Best token-bag F1 against any gold answer.
    pub fn f1<S: AsRef<str>>(&self, prediction: &str, golds: &[S]) -> Result<f64> {
        check_golds(golds.len())?;
        let p = self.tokens(prediction);
        Ok(golds
            .iter()
            .map(|g| bag_f1(&p, &self.tokens(g.as_ref())))
            .fold(0.0, f64::max))
    }
}

fn check_golds(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("no gold answers".into()));
    }
    Ok(())
}

fn bag_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return (pred.is_empty() && gold.is_empty()) as u8 as f64;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut common = 0;
    for p in pred {
        if let Some(n) = counts.get_mut(p.as_str()).filter(|n| **n > 0) {
            *n -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn qa_em<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<f64> {
    AnswerNormalizer::default().exact_match(prediction, golds)
}

pub fn qa_f1<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<f64> {
    AnswerNormalizer::default().f1(prediction, golds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// Entity or token F1 (tagging tasks).
    F1,
    Accuracy,
    /// F1 and exact match, averaged into one score.
    QaF1Em,
}

/// The eight benchmark tasks in report order, with the metric each reports.
pub const BENCHMARK_TASKS: [(&str, MetricKind); 8] = [
    ("pos", MetricKind::F1),
    ("ner", MetricKind::F1),
    ("mldoc", MetricKind::Accuracy),
    ("paws-x", MetricKind::Accuracy),
    ("xnli", MetricKind::Accuracy),
    ("mlqa", MetricKind::QaF1Em),
    ("sqac", MetricKind::QaF1Em),
    ("xquad", MetricKind::QaF1Em),
];

/// One number per task on the 0-100 scale. QA tasks average F1 and EM; the
/// others pass their metric through. `metrics` maps `f1`, `em` or `accuracy`
/// to values.
pub fn task_score(kind: MetricKind, metrics: &BTreeMap<String, f64>) -> Result<f64> {
    let get = |key: &str| {
        metrics
            .get(key)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing metric {key:?}")))
    };
    match kind {
        MetricKind::F1 => get("f1"),
        MetricKind::Accuracy => get("accuracy"),
        MetricKind::QaF1Em => Ok((get("f1")? + get("em")?) / 2.0),
    }
}

/// Arithmetic mean of exactly the eight task scores.
pub fn evaluation_average(scores: &[f64]) -> Result<f64> {
    if scores.len() != BENCHMARK_TASKS.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} task scores, got {}",
            BENCHMARK_TASKS.len(),
            scores.len()
        )));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `(reference size / model size, model average / reference average)`.
pub fn comparison_ratios(model_params: f64, model_avg: f64, ref_params: f64, ref_avg: f64) -> Result<(f64, f64)> {
    if [model_params, model_avg, ref_params, ref_avg]
        .iter()
        .any(|x| !(*x > 0.0 && x.is_finite()))
    {
        return Err(Error::InvalidArgument("ratio inputs must be positive".into()));
    }
    Ok((ref_params / model_params, model_avg / ref_avg))
}

/// Truncates to two decimals. The small epsilon keeps values such as
/// 0.29 * 100 from dropping a digit.
pub fn truncate2(x: f64) -> f64 {
    (x * 100.0 + 1e-9).floor() / 100.0
}

/// Two-decimal rendering by truncation.
pub fn render_score(x: f64) -> String {
    format!("{:.2}", truncate2(x))
}

/// `22x`, `1x` or `0.87x`: truncated to two decimals, integers without
/// decimals.
pub fn render_ratio(x: f64) -> String {
    let t = truncate2(x);
    if t.fract() == 0.0 {
        format!("{}x", t as i64)
    } else {
        format!("{t:.2}x")
    }
}

/// `110M`-style rendering of a parameter count.
pub fn render_parameters(count: u64) -> String {
    format!("{}M", (count as f64 / 1e6).round() as u64)
}

/// Raw per-task metrics for one model, as stored in a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScores {
    pub model: String,
    pub parameters: u64,
    /// Task name to metrics (`f1`, `em`, `accuracy`).
    pub tasks: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ModelScores {
    /// Reads `model`, `parameters` and `<task>.<metric>` entries.
    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let mut tasks: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (key, _) in doc.entries() {
            if let Some((task, metric)) = key.split_once('.') {
                tasks
                    .entry(task.to_string())
                    .or_default()
                    .insert(metric.to_string(), doc.require(key)?);
            }
        }
        Ok(Self {
            model: doc.require("model")?,
            parameters: doc.require("parameters")?,
            tasks,
        })
    }

    /// Scores of one task from metrics on the 0-1 scale, stored on the 0-100
    /// scale of score files.
    pub fn from_metrics(model: &str, parameters: u64, task: &str, metrics: &BTreeMap<String, f64>) -> Self {
        let scaled = metrics.iter().map(|(k, v)| (k.clone(), v * 100.0)).collect();
        Self {
            model: model.to_string(),
            parameters,
            tasks: BTreeMap::from([(task.to_string(), scaled)]),
        }
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.set("model", &self.model);
        doc.set("parameters", self.parameters);
        for (task, metrics) in &self.tasks {
            for (metric, value) in metrics {
                doc.set(&format!("{task}.{metric}"), value);
            }
        }
        doc
    }

    /// Scores of the eight benchmark tasks in report order.
    pub fn task_scores(&self) -> Result<Vec<f64>> {
        BENCHMARK_TASKS
            .iter()
            .map(|(task, kind)| {
                let metrics = self
                    .tasks
                    .get(*task)
                    .ok_or_else(|| Error::InvalidArgument(format!("{}: no scores for {task}", self.model)))?;
                task_score(*kind, metrics)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub parameters: u64,
    pub task_scores: Vec<f64>,
    pub average: f64,
    pub size_ratio: f64,
    pub performance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub reference: String,
    pub rows: Vec<ReportRow>,
}

impl EvaluationReport {
    /// Aggregates every model against the one named `reference`. Rows keep
    /// the input order.
    pub fn build(models: &[ModelScores], reference: &str) -> Result<Self> {
        let reference_scores = models
            .iter()
            .find(|m| m.model == reference)
            .ok_or_else(|| Error::InvalidArgument(format!("reference model {reference:?} not among the inputs")))?;
        let ref_avg = evaluation_average(&reference_scores.task_scores()?)?;
        let ref_params = reference_scores.parameters as f64;
        let mut rows = Vec::with_capacity(models.len());
        for m in models {
            let task_scores = m.task_scores()?;
            let average = evaluation_average(&task_scores)?;
            let (size_ratio, performance_ratio) = comparison_ratios(m.parameters as f64, average, ref_params, ref_avg)?;
            rows.push(ReportRow {
                model: m.model.clone(),
                parameters: m.parameters,
                task_scores,
                average,
                size_ratio,
                performance_ratio,
            });
        }
        Ok(Self {
            reference: reference.to_string(),
            rows,
        })
    }

    const COLUMNS: [&'static str; 5] = ["Model", "Parameters", "Evaluation Average", "Size", "Performance"];

    fn cells(&self) -> Vec<[String; 5]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    render_parameters(r.parameters),
                    render_score(r.average),
                    render_ratio(r.size_ratio),
                    render_ratio(r.performance_ratio),
                ]
            })
            .collect()
    }

    /// Tab-separated rendering with per-task scores after the summary columns.
    pub fn to_tsv(&self) -> String {
        let mut out = Self::COLUMNS.join("\t");
        for (task, _) in BENCHMARK_TASKS {
            write!(out, "\t{task}").expect("string write");
        }
        out.push('\n');
        for (row, cells) in self.rows.iter().zip(self.cells()) {
            out.push_str(&cells.join("\t"));
            for s in &row.task_scores {
                write!(out, "\t{s}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Column-aligned text table.
    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let mut widths = Self::COLUMNS.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |values: &[String]| {
            let padded: Vec<String> = values
                .iter()
                .zip(widths)
                .enumerate()
                .map(
                    |(i, (v, w))| {
                        if i == 0 {
                            format!("{v:<w$}")
                        } else {
                            format!("{v:>w$}")
                        }
                    },
                )
                .collect();
            padded.join("  ").trim_end().to_string()
        };
        let header: Vec<String> = Self::COLUMNS.iter().map(|c| c.to_string()).collect();
        let mut out = line(&header);
        out.push('\n');
        let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}
