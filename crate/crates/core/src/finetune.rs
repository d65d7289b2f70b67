//! Task heads, single-configuration fine-tuning and the hyperparameter grid
//! search with dev-set selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::autograd::{Graph, Var};
use crate::data::{Example, Splits};
use crate::encoder::{
    add_linear_head, dense, encode_on_tape, gradients, pooled_on_tape, trim_padding, GradientSet, Mode, ParameterSet,
};
use crate::error::{Error, Result};
use crate::kv::KvDocument;
use crate::metrics::{accuracy, entity_f1_corpus, token_f1, AnswerNormalizer};
use crate::optim::{lamb_step, OptimizerSettings, OptimizerState};
use crate::schedule::{lr_at, TrainingSchedule};
use crate::seeding::{stream, Purpose};
use crate::tokenizer::{encode, encode_with, encode_words, EncodedSequence, SubwordVocabulary, Truncation};

/// Prefix of the task head tensors.
pub const TASK_HEAD: &str = "head.task";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    TokenClassification,
    SequenceClassification,
    SpanQa,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::TokenClassification => "token-classification",
            TaskKind::SequenceClassification => "sequence-classification",
            TaskKind::SpanQa => "span-qa",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            TaskKind::TokenClassification,
            TaskKind::SequenceClassification,
            TaskKind::SpanQa,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Empty for span QA.
    pub label_names: Vec<String>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, label_names: Vec<String>) -> Result<Self> {
        let spec = Self { kind, label_names };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::SpanQa if !self.label_names.is_empty() => Err(Error::Config("span QA takes no label set".into())),
            TaskKind::SpanQa => Ok(()),
            _ if self.label_names.len() < 2 => Err(Error::Config(format!(
                "classification needs at least 2 labels, got {:?}",
                self.label_names
            ))),
            _ => Ok(()),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    /// Width of the head's output layer.
    pub fn head_outputs(&self) -> usize {
        match self.kind {
            TaskKind::SpanQa => 2,
            _ => self.num_labels(),
        }
    }

    pub fn label_id(&self, name: &str) -> Result<usize> {
        self.label_names
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::Validation(format!("unknown label {name:?}")))
    }

    /// Entity F1 applies when the labels are BIO tags.
    pub fn is_bio(&self) -> bool {
        self.kind == TaskKind::TokenClassification
            && self.label_names.iter().any(|l| l.starts_with("B-"))
            && self
                .label_names
                .iter()
                .all(|l| l == "O" || l.starts_with("B-") || l.starts_with("I-"))
    }

    /// Stores the task as `task.kind` and `task.labels` entries.
    pub fn write_metadata(&self, doc: &mut KvDocument) {
        doc.set("task.kind", self.kind.name());
        doc.set_list("task.labels", &self.label_names);
    }

    pub fn from_metadata(doc: &KvDocument) -> Result<Self> {
        let kind: String = doc.require("task.kind")?;
        let kind = TaskKind::from_name(&kind).ok_or_else(|| Error::Config(format!("unknown task kind {kind:?}")))?;
        Self::new(kind, doc.require_list("task.labels")?)
    }

    pub(crate) fn check_example(&self, example: &Example) -> Result<()> {
        let ok = matches!(
            (self.kind, example),
            (TaskKind::TokenClassification, Example::Tagged { .. })
                | (
                    TaskKind::SequenceClassification,
                    Example::Text { .. } | Example::Pair { .. }
                )
                | (TaskKind::SpanQa, Example::Qa { .. })
        );
        if !ok {
            return Err(Error::Validation(format!(
                "example does not fit a {} task",
                self.kind.name()
            )));
        }
        if let Example::Tagged { words, tags } = example {
            if words.len() != tags.len() || words.is_empty() {
                return Err(Error::Validation(
                    "tagged example with mismatched words and tags".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Returns a copy of `params` with a freshly initialized task head:
/// per-position for token classification, on the `[CLS]` representation for
/// sequence classification, and a start/end pair per position for span QA.
pub fn attach_head(params: &ParameterSet, task: &TaskSpec, seed: u64) -> Result<ParameterSet> {
    task.validate()?;
    let mut out = params.clone();
    add_linear_head(&mut out, TASK_HEAD, task.head_outputs(), seed)?;
    Ok(out)
}

/// Head outputs in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskLogits {
    /// `batch x seq x labels`.
    Token(ndarray::Array3<f64>),
    /// `batch x labels`.
    Sequence(Array2<f64>),
    /// Two `batch x seq` arrays.
    Span { start: Array2<f64>, end: Array2<f64> },
}

enum Head {
    Rows(Var),
    Span { start: Var, end: Var },
}

fn head_on_tape(g: &mut Graph<'_>, batch: &[EncodedSequence], kind: TaskKind) -> Result<Head> {
    let out = encode_on_tape(g, batch)?;
    Ok(match kind {
        TaskKind::TokenClassification => Head::Rows(dense(g, out.hidden, TASK_HEAD)?),
        TaskKind::SequenceClassification => {
            let pooled = pooled_on_tape(g, &out)?;
            Head::Rows(dense(g, pooled, TASK_HEAD)?)
        }
        TaskKind::SpanQa => {
            let both = dense(g, out.hidden, TASK_HEAD)?;
            Head::Span {
                start: g.column(both, 0, out.seq)?,
                end: g.column(both, 1, out.seq)?,
            }
        }
    })
}

pub fn task_logits(params: &ParameterSet, batch: &[EncodedSequence], kind: TaskKind) -> Result<TaskLogits> {
    let mut g = Graph::frozen(params);
    Ok(match head_on_tape(&mut g, batch, kind)? {
        Head::Rows(v) if kind == TaskKind::TokenClassification => {
            let values = g.value(v).clone();
            let labels = values.ncols();
            let seq = batch[0].len();
            TaskLogits::Token(
                values
                    .into_shape_with_order((batch.len(), seq, labels))
                    .expect("rows are batch * seq"),
            )
        }
        Head::Rows(v) => TaskLogits::Sequence(g.value(v).clone()),
        Head::Span { start, end } => TaskLogits::Span {
            start: g.value(start).clone(),
            end: g.value(end).clone(),
        },
    })
}

/// A predicted answer. `found` is false when no position pair qualified, in
/// which case the text is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedAnswer {
    pub text: String,
    /// Character range in the context.
    pub char_span: (usize, usize),
    /// Token positions `(i, j)`.
    pub tokens: (usize, usize),
    pub found: bool,
}

/// Picks `(i, j)` maximizing `start[i] + end[j]` with `i <= j`,
/// `j - i < max_answer_tokens` and both positions inside the context
/// (`offsets[p]` is `Some`). The first maximum in `(i, j)` order wins.
pub fn extract_answer_span(
    start_logits: &[f64],
    end_logits: &[f64],
    context: &str,
    offsets: &[Option<(usize, usize)>],
    max_answer_tokens: usize,
) -> ExtractedAnswer {
    let n = start_logits.len().min(end_logits.len()).min(offsets.len());
    let mut best: Option<(f64, usize, usize)> = None;
    for i in (0..n).filter(|&i| offsets[i].is_some()) {
        let last = (i + max_answer_tokens).min(n);
        for j in (i..last).filter(|&j| offsets[j].is_some()) {
            let score = start_logits[i] + end_logits[j];
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, i, j));
            }
        }
    }
    match best {
        None => ExtractedAnswer {
            text: String::new(),
            char_span: (0, 0),
            tokens: (0, 0),
            found: false,
        },
        Some((_, i, j)) => {
            let (from, to) = (offsets[i].expect("candidate").0, offsets[j].expect("candidate").1);
            ExtractedAnswer {
                text: context.chars().skip(from).take(to.saturating_sub(from)).collect(),
                char_span: (from, to),
                tokens: (i, j),
                found: true,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Target {
    /// Label per position; only the first piece of each word is labeled.
    Tokens(Vec<Option<usize>>),
    Class(usize),
    Span {
        start: usize,
        end: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Feature {
    seq: EncodedSequence,
    target: Target,
    /// Tagging: position of each word's first piece, `None` when truncated.
    word_positions: Vec<Option<usize>>,
    /// QA: context offsets per position (`None` outside the context).
    context_offsets: Vec<Option<(usize, usize)>>,
}

fn encode_example(example: &Example, task: &TaskSpec, vocab: &SubwordVocabulary, max_len: usize) -> Result<Feature> {
    task.check_example(example)?;
    match example {
        Example::Tagged { words, tags } => {
            let (seq, word_index) = encode_words(words, max_len, vocab)?;
            let mut labels = vec![None; seq.len()];
            let mut word_positions = vec![None; words.len()];
            for (p, w) in word_index.iter().enumerate() {
                if let Some(w) = *w {
                    if word_positions[w].is_none() {
                        word_positions[w] = Some(p);
                        labels[p] = Some(task.label_id(&tags[w])?);
                    }
                }
            }
            Ok(Feature {
                seq,
                target: Target::Tokens(labels),
                word_positions,
                context_offsets: Vec::new(),
            })
        }
        Example::Text { text, label } => Ok(Feature {
            seq: encode(text, None, max_len, vocab)?,
            target: Target::Class(task.label_id(label)?),
            word_positions: Vec::new(),
            context_offsets: Vec::new(),
        }),
        Example::Pair { text_a, text_b, label } => Ok(Feature {
            seq: encode(text_a, Some(text_b), max_len, vocab)?,
            target: Target::Class(task.label_id(label)?),
            word_positions: Vec::new(),
            context_offsets: Vec::new(),
        }),
        Example::Qa {
            question,
            context,
            answers,
            ..
        } => {
            let seq = encode_with(question, Some(context), max_len, vocab, Truncation::OnlySecond)?;
            let context_offsets: Vec<Option<(usize, usize)>> = (0..seq.len())
                .map(|p| {
                    if seq.segment_ids[p] == 1 {
                        seq.char_offsets[p]
                    } else {
                        None
                    }
                })
                .collect();
            // Answers cut off by truncation point at [CLS].
            let (mut start, mut end) = (0, 0);
            if let Some(answer) = answers.first() {
                let (from, to) = (answer.start, answer.start + answer.text.chars().count());
                let s = context_offsets
                    .iter()
                    .position(|o| o.is_some_and(|(a, b)| a <= from && from < b));
                let e = context_offsets
                    .iter()
                    .position(|o| o.is_some_and(|(a, b)| a < to && to <= b));
                if let (Some(s), Some(e)) = (s, e) {
                    if s <= e {
                        (start, end) = (s, e);
                    }
                }
            }
            Ok(Feature {
                seq,
                target: Target::Span { start, end },
                word_positions: Vec::new(),
                context_offsets,
            })
        }
    }
}

fn encode_all(
    examples: &[Example],
    task: &TaskSpec,
    vocab: &SubwordVocabulary,
    max_len: usize,
) -> Result<Vec<Feature>> {
    examples
        .iter()
        .map(|e| encode_example(e, task, vocab, max_len))
        .collect()
}

/// Number of loss terms a feature contributes.
fn target_count(feature: &Feature) -> usize {
    match &feature.target {
        Target::Tokens(labels) => labels.iter().flatten().count(),
        Target::Class(_) | Target::Span { .. } => 1,
    }
}

/// Summed loss over `features`, divided by `denominator`. For span QA each
/// example contributes the mean of its start and end cross-entropies.
fn loss_on_tape(g: &mut Graph<'_>, features: &[&Feature], kind: TaskKind, denominator: f64) -> Result<Var> {
    let mut batch: Vec<EncodedSequence> = features.iter().map(|f| f.seq.clone()).collect();
    trim_padding(&mut batch);
    let seq = batch[0].len();
    let scale = 1.0 / denominator;
    match head_on_tape(g, &batch, kind)? {
        Head::Rows(logits) if kind == TaskKind::TokenClassification => {
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for (b, f) in features.iter().enumerate() {
                if let Target::Tokens(labels) = &f.target {
                    for (p, label) in labels.iter().enumerate().take(seq) {
                        if let Some(label) = label {
                            rows.push(b * seq + p);
                            targets.push(*label);
                        }
                    }
                }
            }
            if rows.is_empty() {
                return Ok(g.constant(Array2::zeros((1, 1))));
            }
            let picked = g.gather(logits, &rows)?;
            g.cross_entropy(picked, &targets, scale)
        }
        Head::Rows(logits) => {
            let targets: Vec<usize> = features
                .iter()
                .map(|f| match f.target {
                    Target::Class(c) => c,
                    _ => unreachable!("sequence targets"),
                })
                .collect();
            g.cross_entropy(logits, &targets, scale)
        }
        Head::Span { start, end } => {
            let (mut s, mut e) = (Vec::new(), Vec::new());
            for f in features {
                if let Target::Span { start, end } = f.target {
                    s.push(start.min(seq - 1));
                    e.push(end.min(seq - 1));
                }
            }
            let ls = g.cross_entropy(start, &s, scale)?;
            let le = g.cross_entropy(end, &e, scale)?;
            g.weighted_sum(&[(ls, 0.5), (le, 0.5)])
        }
    }
}

/// Metric values on the 0-1 scale keyed by `accuracy`, `f1`, `em`,
/// `precision` and `recall`.
pub type Metrics = BTreeMap<String, f64>;

/// The value grid search maximizes: entity or token F1 for tagging, accuracy
/// for classification, F1 for QA.
pub fn primary_metric(kind: TaskKind, metrics: &Metrics) -> f64 {
    let key = match kind {
        TaskKind::SequenceClassification => "accuracy",
        _ => "f1",
    };
    metrics.get(key).copied().unwrap_or(0.0)
}

const EVAL_BATCH: usize = 32;

fn evaluate_features(
    params: &ParameterSet,
    task: &TaskSpec,
    examples: &[Example],
    features: &[Feature],
    max_answer_tokens: usize,
) -> Result<Metrics> {
    let mut metrics = Metrics::new();
    if features.is_empty() {
        return Ok(metrics);
    }
    let fallback = task.label_names.iter().position(|l| l == "O").unwrap_or(0);
    let mut predicted_tags: Vec<Vec<String>> = Vec::new();
    let mut gold_tags: Vec<Vec<String>> = Vec::new();
    let mut predicted_labels = Vec::new();
    let mut gold_labels = Vec::new();
    let (mut f1_sum, mut em_sum) = (0.0, 0.0);
    let normalizer = AnswerNormalizer::default();
    for (chunk, chunk_examples) in features.chunks(EVAL_BATCH).zip(examples.chunks(EVAL_BATCH)) {
        let mut batch: Vec<EncodedSequence> = chunk.iter().map(|f| f.seq.clone()).collect();
        trim_padding(&mut batch);
        let logits = task_logits(params, &batch, task.kind)?;
        for (b, (feature, example)) in chunk.iter().zip(chunk_examples).enumerate() {
            match (&logits, example) {
                (TaskLogits::Token(values), Example::Tagged { tags, .. }) => {
                    let row = values.index_axis(Axis(0), b);
                    let predicted = feature
                        .word_positions
                        .iter()
                        .map(|p| match p {
                            Some(p) => argmax(row.row(*p).iter().copied()),
                            None => fallback,
                        })
                        .map(|id| task.label_names[id].clone())
                        .collect();
                    predicted_tags.push(predicted);
                    gold_tags.push(tags.clone());
                }
                (TaskLogits::Sequence(values), Example::Text { label, .. } | Example::Pair { label, .. }) => {
                    predicted_labels.push(argmax(values.row(b).iter().copied()));
                    gold_labels.push(task.label_id(label)?);
                }
                (TaskLogits::Span { start, end }, Example::Qa { context, answers, .. }) => {
                    let n = batch[0].len();
                    let offsets = &feature.context_offsets[..n.min(feature.context_offsets.len())];
                    let answer = extract_answer_span(
                        start.row(b).as_slice().expect("contiguous"),
                        end.row(b).as_slice().expect("contiguous"),
                        context,
                        offsets,
                        max_answer_tokens,
                    );
                    let golds: Vec<&str> = answers.iter().map(|a| a.text.as_str()).collect();
                    f1_sum += normalizer.f1(&answer.text, &golds)?;
                    em_sum += normalizer.exact_match(&answer.text, &golds)?;
                }
                _ => return Err(Error::Validation("example does not match the task head".into())),
            }
        }
    }
    match task.kind {
        TaskKind::TokenClassification => {
            let flat_pred: Vec<&String> = predicted_tags.iter().flatten().collect();
            let flat_gold: Vec<&String> = gold_tags.iter().flatten().collect();
            metrics.insert("accuracy".into(), accuracy(&flat_pred, &flat_gold)?);
            if task.is_bio() {
                let scores = entity_f1_corpus(&predicted_tags, &gold_tags)?;
                metrics.insert("precision".into(), scores.precision);
                metrics.insert("recall".into(), scores.recall);
                metrics.insert("f1".into(), scores.f1);
            } else {
                metrics.insert("f1".into(), token_f1(&flat_pred, &flat_gold)?);
            }
        }
        TaskKind::SequenceClassification => {
            metrics.insert("accuracy".into(), accuracy(&predicted_labels, &gold_labels)?);
        }
        TaskKind::SpanQa => {
            let n = features.len() as f64;
            metrics.insert("f1".into(), f1_sum / n);
            metrics.insert("em".into(), em_sum / n);
        }
    }
    Ok(metrics)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Eval-mode metrics of a model with a task head on `examples`.
pub fn evaluate(
    params: &ParameterSet,
    task: &TaskSpec,
    examples: &[Example],
    vocab: &SubwordVocabulary,
    max_len: usize,
    max_answer_tokens: usize,
) -> Result<Metrics> {
    let features = encode_all(examples, task, vocab, max_len)?;
    evaluate_features(params, task, examples, &features, max_answer_tokens)
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub cell: Cell,
    /// Micro-batches per update; `batch_size` must be a multiple of it.
    pub accumulation_steps: usize,
    pub max_len: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub max_answer_tokens: usize,
    /// Evaluate the test split with the selected weights.
    pub evaluate_test: bool,
}

impl FineTuneConfig {
    pub fn new(cell: Cell, seed: u64) -> Self {
        Self {
            cell,
            accumulation_steps: 1,
            max_len: 512,
            seed,
            weight_decay: 0.01,
            max_answer_tokens: 30,
            evaluate_test: true,
        }
    }

    fn micro_batch(&self) -> Result<usize> {
        let (batch, k) = (self.cell.batch_size, self.accumulation_steps);
        if batch == 0 || k == 0 || batch % k != 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch} is not a multiple of {k} accumulation steps"
            )));
        }
        Ok(batch / k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneResult {
    pub cell: Cell,
    pub seed: u64,
    /// Primary dev metric of the selected epoch.
    pub dev_metric: f64,
    pub dev_metrics: Metrics,
    /// Primary dev metric after each epoch, or of the untrained model when
    /// `epochs` is 0.
    pub dev_history: Vec<f64>,
    /// Epoch whose weights were kept, earliest on ties (0 when `epochs` is 0).
    pub best_epoch: usize,
    pub test_metrics: Option<Metrics>,
    /// Encoder and head at the selected epoch.
    pub params: ParameterSet,
}

/// Fine-tunes a model that already carries a task head. Each epoch shuffles
/// the training split, takes optimizer steps of `batch_size` examples (split
/// into `accumulation_steps` micro-batches whose gradients are summed), then
/// evaluates on dev. The weights of the best dev epoch are kept and, when
/// requested, scored once on test.
pub fn fine_tune<D: Splits + ?Sized>(
    params: &ParameterSet,
    data: &D,
    vocab: &SubwordVocabulary,
    config: &FineTuneConfig,
) -> Result<FineTuneResult> {
    let task = data.task().clone();
    if !params.has_head(TASK_HEAD) {
        return Err(Error::InvalidArgument("model has no task head".into()));
    }
    let micro = config.micro_batch()?;
    if config.cell.learning_rate.is_nan() || config.cell.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    let train_examples = data.train();
    let train = encode_all(train_examples, &task, vocab, config.max_len)?;
    let dev_examples = data.dev();
    let dev = encode_all(dev_examples, &task, vocab, config.max_len)?;
    if train.is_empty() && config.cell.epochs > 0 {
        return Err(Error::Validation("empty training split".into()));
    }

    let batch_size = config.cell.batch_size;
    let updates_per_epoch = train.len().div_ceil(batch_size) as u64;
    let total = updates_per_epoch * config.cell.epochs as u64;
    let schedule = TrainingSchedule::linear_decay(config.cell.learning_rate, batch_size, total.max(1));
    let settings = OptimizerSettings {
        weight_decay: config.weight_decay,
        ..OptimizerSettings::adamw()
    };
    let mut params = params.clone();
    let mut optimizer = OptimizerState::new(&params, settings);

    let mut best = params.clone();
    let mut best_metrics = Metrics::new();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    if config.cell.epochs == 0 {
        best_metrics = evaluate_features(&params, &task, dev_examples, &dev, config.max_answer_tokens)?;
        best_metric = primary_metric(task.kind, &best_metrics);
        history.push(best_metric);
    }

    let mut update = 0u64;
    for epoch in 0..config.cell.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(config.seed, Purpose::Shuffle, epoch as u64));
        for batch in order.chunks(batch_size) {
            let lr = lr_at(update, &schedule)?;
            let features: Vec<&Feature> = batch.iter().map(|&i| &train[i]).collect();
            let denominator = features.iter().map(|f| target_count(f)).sum::<usize>().max(1) as f64;
            let mut total_grads = GradientSet::zeros_like(&params);
            for (m, chunk) in features.chunks(micro).enumerate() {
                let mode = Mode::Train {
                    seed: stream(
                        config.seed,
                        Purpose::Dropout,
                        update * config.accumulation_steps as u64 + m as u64,
                    )
                    .random(),
                };
                let (_, grads) = gradients(&params, mode, |g| loss_on_tape(g, chunk, task.kind, denominator))?;
                total_grads.add_assign(&grads)?;
            }
            lamb_step(&mut params, &total_grads, &mut optimizer, lr)?;
            update += 1;
        }
        let metrics = evaluate_features(&params, &task, dev_examples, &dev, config.max_answer_tokens)?;
        let value = primary_metric(task.kind, &metrics);
        history.push(value);
        if value > best_metric {
            best_metric = value;
            best_metrics = metrics;
            best = params.clone();
            best_epoch = epoch + 1;
        }
    }

    let test_metrics = if config.evaluate_test {
        let test_examples = data.test();
        let test = encode_all(test_examples, &task, vocab, config.max_len)?;
        Some(evaluate_features(
            &best,
            &task,
            test_examples,
            &test,
            config.max_answer_tokens,
        )?)
    } else {
        None
    };
    Ok(FineTuneResult {
        cell: config.cell,
        seed: config.seed,
        dev_metric: best_metric,
        dev_metrics: best_metrics,
        dev_history: history,
        best_epoch,
        test_metrics,
        params: best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrVariant {
    #[default]
    Standard,
    /// Smaller learning rates for the largest models.
    Reduced,
}

impl LrVariant {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "standard" => Some(LrVariant::Standard),
            "reduced" => Some(LrVariant::Reduced),
            _ => None,
        }
    }
}

pub const STANDARD_LEARNING_RATES: [f64; 4] = [1e-5, 2e-5, 3e-5, 5e-5];
pub const REDUCED_LEARNING_RATES: [f64; 4] = [1e-6, 2e-6, 3e-6, 5e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub epoch_counts: Vec<usize>,
}

impl HyperGrid {
    pub fn standard() -> Self {
        Self {
            batch_sizes: vec![16, 32, 64],
            learning_rates: STANDARD_LEARNING_RATES.to_vec(),
            epoch_counts: vec![2, 3, 4],
        }
    }

    pub fn with_variant(mut self, variant: LrVariant) -> Self {
        if variant == LrVariant::Reduced {
            self.learning_rates = REDUCED_LEARNING_RATES.to_vec();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.batch_sizes.is_empty()
            && !self.learning_rates.is_empty()
            && !self.epoch_counts.is_empty()
            && self.batch_sizes.iter().all(|&b| b > 0)
            && self.learning_rates.iter().all(|&l| l > 0.0 && l.is_finite())
            && self.epoch_counts.iter().all(|&e| e > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("grid lists must be non-empty and positive".into()))
        }
    }

    /// Every `(batch, lr, epochs)` combination, batch-major.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &batch_size in &self.batch_sizes {
            for &learning_rate in &self.learning_rates {
                for &epochs in &self.epoch_counts {
                    out.push(Cell {
                        batch_size,
                        learning_rate,
                        epochs,
                    });
                }
            }
        }
        out
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.set_list("batch_sizes", &self.batch_sizes);
        doc.set_list("learning_rates", &self.learning_rates);
        doc.set_list("epoch_counts", &self.epoch_counts);
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let grid = Self {
            batch_sizes: doc.require_list("batch_sizes")?,
            learning_rates: doc.require_list("learning_rates")?,
            epoch_counts: doc.require_list("epoch_counts")?,
        };
        grid.validate()?;
        Ok(grid)
    }
}

/// Seed of grid cell `index` under run seed `seed`.
pub fn cell_seed(seed: u64, index: usize) -> u64 {
    stream(seed, Purpose::HeadInit, index as u64 + 1).random()
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok { dev_metric: f64 },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub index: usize,
    pub cell: Cell,
    pub seed: u64,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult<R> {
    pub best: R,
    pub best_index: usize,
    pub outcomes: Vec<CellOutcome>,
}

/// True when `a` beats `b`: higher dev metric, then smaller learning rate,
/// smaller batch and fewer epochs.
fn better(a: (f64, &Cell), b: (f64, &Cell)) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    let key = |c: &Cell| (c.learning_rate, c.batch_size, c.epochs);
    key(a.1).partial_cmp(&key(b.1)) == Some(std::cmp::Ordering::Less)
}

/// Runs every cell (in parallel, each from its own seed) and keeps the best.
/// Cells whose runner fails are recorded and skipped. `dev_metric` reads the
/// selection value out of a runner result.
pub fn grid_search_with<R, F, M>(grid: &HyperGrid, seed: u64, run: F, dev_metric: M) -> Result<GridResult<R>>
where
    R: Send,
    F: Fn(Cell, u64) -> Result<R> + Sync,
    M: Fn(&R) -> f64,
{
    grid.validate()?;
    let cells = grid.cells();
    let results: Vec<Result<R>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &cell)| run(cell, cell_seed(seed, i)))
        .collect();
    let mut outcomes = Vec::with_capacity(cells.len());
    let mut best: Option<(usize, R)> = None;
    for (index, (cell, result)) in cells.iter().zip(results).enumerate() {
        let seed = cell_seed(seed, index);
        match result {
            Ok(r) => {
                let value = dev_metric(&r);
                if !value.is_finite() {
                    outcomes.push(CellOutcome {
                        index,
                        cell: *cell,
                        seed,
                        status: CellStatus::Failed(format!("dev metric {value}")),
                    });
                    continue;
                }
                outcomes.push(CellOutcome {
                    index,
                    cell: *cell,
                    seed,
                    status: CellStatus::Ok { dev_metric: value },
                });
                let wins = match &best {
                    None => true,
                    Some((b, r_best)) => better((value, cell), (dev_metric(r_best), &cells[*b])),
                };
                if wins {
                    best = Some((index, r));
                }
            }
            Err(err) => {
                log::warn!("grid cell {index} failed: {err}");
                outcomes.push(CellOutcome {
                    index,
                    cell: *cell,
                    seed,
                    status: CellStatus::Failed(err.to_string()),
                });
            }
        }
    }
    let (best_index, best) = best.ok_or_else(|| Error::NonFinite("every grid cell failed".into()))?;
    Ok(GridResult {
        best,
        best_index,
        outcomes,
    })
}

/// Grid search over fine-tuning runs. Every cell starts from `base` with a
/// freshly seeded task head; only the winning cell is scored on test.
pub fn grid_search<D: Splits + Sync + ?Sized>(
    base: &ParameterSet,
    data: &D,
    vocab: &SubwordVocabulary,
    grid: &HyperGrid,
    template: &FineTuneConfig,
) -> Result<GridResult<FineTuneResult>> {
    let task = data.task().clone();
    let mut result = grid_search_with(
        grid,
        template.seed,
        |cell, seed| {
            let model = attach_head(base, &task, seed)?;
            let config = FineTuneConfig {
                cell,
                seed,
                evaluate_test: false,
                ..template.clone()
            };
            fine_tune(&model, data, vocab, &config)
        },
        |r| r.dev_metric,
    )?;
    if template.evaluate_test {
        let test_examples = data.test();
        let test = encode_all(test_examples, &task, vocab, template.max_len)?;
        result.best.test_metrics = Some(evaluate_features(
            &result.best.params,
            &task,
            test_examples,
            &test,
            template.max_answer_tokens,
        )?);
    }
    Ok(result)
}

pub const GRID_LEDGER_HEADER: &str = "cell\tbatch_size\tlearning_rate\tepochs\tseed\tdev_metric\tstatus";

/// One line per cell, in cell order.
pub fn render_grid_ledger(outcomes: &[CellOutcome]) -> String {
    let mut out = format!("{GRID_LEDGER_HEADER}\n");
    for o in outcomes {
        let (metric, status) = match &o.status {
            CellStatus::Ok { dev_metric } => (dev_metric.to_string(), "ok".to_string()),
            CellStatus::Failed(reason) => (
                "-".to_string(),
                format!("failed: {}", reason.replace(['\t', '\n'], " ")),
            ),
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{metric}\t{status}",
            o.index, o.cell.batch_size, o.cell.learning_rate, o.cell.epochs, o.seed
        )
        .expect("string write");
    }
    out
}
