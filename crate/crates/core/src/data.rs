//! Task datasets and loaders for the benchmark file formats: two-column
//! CoNLL tagging, CoNLL-U part-of-speech, SQuAD-style JSON and delimited
//! classification files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::finetune::{TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSpan {
    pub text: String,
    /// Character (not byte) offset into the context.
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Example {
    Tagged {
        words: Vec<String>,
        tags: Vec<String>,
    },
    Text {
        text: String,
        label: String,
    },
    Pair {
        text_a: String,
        text_b: String,
        label: String,
    },
    Qa {
        id: String,
        question: String,
        context: String,
        answers: Vec<AnswerSpan>,
    },
}

impl Example {
    fn labels(&self) -> Vec<&str> {
        match self {
            Example::Tagged { tags, .. } => tags.iter().map(String::as_str).collect(),
            Example::Text { label, .. } | Example::Pair { label, .. } => vec![label.as_str()],
            Example::Qa { .. } => Vec::new(),
        }
    }
}

/// How a loader reacts to a malformed record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnError {
    Fail,
    /// Log a warning, drop the record and count it.
    Skip,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedSplit {
    pub examples: Vec<Example>,
    /// Records dropped while loading.
    pub skipped: usize,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Applies the policy to a record error: `Ok(())` means skip and continue.
fn handle(policy: OnError, err: Error, skipped: &mut usize) -> Result<()> {
    match policy {
        OnError::Fail => Err(err),
        OnError::Skip => {
            log::warn!("skipping record: {err}");
            *skipped += 1;
            Ok(())
        }
    }
}

/// Ends a sentence; one with a malformed line is dropped.
fn flush_sentence(words: &mut Vec<String>, tags: &mut Vec<String>, broken: &mut bool, out: &mut LoadedSplit) {
    if !words.is_empty() && !*broken {
        out.examples.push(Example::Tagged {
            words: std::mem::take(words),
            tags: std::mem::take(tags),
        });
    }
    words.clear();
    tags.clear();
    *broken = false;
}

/// Whitespace-separated `word tag` lines, sentences separated by blank lines.
/// `-DOCSTART-` lines are ignored.
pub fn load_conll2002(path: &Path, policy: OnError) -> Result<LoadedSplit> {
    let text = read(path)?;
    let mut out = LoadedSplit::default();
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let mut broken = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            flush_sentence(&mut words, &mut tags, &mut broken, &mut out);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let columns: Vec<&str> = line.split_whitespace().collect();
        if columns.len() != 2 {
            if !broken {
                let err = Error::data(path, i + 1, format!("expected 2 columns, found {}", columns.len()));
                handle(policy, err, &mut out.skipped)?;
            }
            broken = true;
            continue;
        }
        words.push(columns[0].to_string());
        tags.push(columns[1].to_string());
    }
    flush_sentence(&mut words, &mut tags, &mut broken, &mut out);
    Ok(out)
}

/// Ten tab-separated columns per token; the universal POS column is the
/// label. Comment lines, multiword ranges (`1-2`) and empty nodes (`1.1`) are
/// skipped.
pub fn load_conllu_pos(path: &Path, policy: OnError) -> Result<LoadedSplit> {
    let text = read(path)?;
    let mut out = LoadedSplit::default();
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let mut broken = false;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            flush_sentence(&mut words, &mut tags, &mut broken, &mut out);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let columns: Vec<&str> = line.split('\t').collect();
        let valid = columns.len() == 10 && !columns[1].is_empty() && !columns[3].is_empty();
        if !valid {
            if !broken {
                let err = Error::data(
                    path,
                    i + 1,
                    format!("expected 10 tab-separated columns, found {}", columns.len()),
                );
                handle(policy, err, &mut out.skipped)?;
            }
            broken = true;
            continue;
        }
        if columns[0].contains('-') || columns[0].contains('.') {
            continue;
        }
        words.push(columns[1].to_string());
        tags.push(columns[3].to_string());
    }
    flush_sentence(&mut words, &mut tags, &mut broken, &mut out);
    Ok(out)
}

fn str_field<'a>(value: &'a Value, key: &str, path: &Path) -> Result<&'a str> {
    value
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::data(path, 0, format!("missing string field {key:?}")))
}

fn array_field<'a>(value: &'a Value, key: &str, path: &Path) -> Result<&'a Vec<Value>> {
    value
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::data(path, 0, format!("missing array field {key:?}")))
}

/// `data -> paragraphs -> qas` JSON. Answers whose `answer_start` does not
/// point at their text are dropped with a warning and counted in `skipped`;
/// a question left without answers is dropped too.
pub fn load_squad_json(path: &Path) -> Result<LoadedSplit> {
    let text = read(path)?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::data(path, e.line(), e.to_string()))?;
    let mut out = LoadedSplit::default();
    for article in array_field(&root, "data", path)? {
        for paragraph in array_field(article, "paragraphs", path)? {
            let context = str_field(paragraph, "context", path)?;
            let chars: Vec<char> = context.chars().collect();
            for qa in array_field(paragraph, "qas", path)? {
                let id = qa.get("id").and_then(Value::as_str).unwrap_or_default().to_string();
                let question = str_field(qa, "question", path)?;
                let mut answers = Vec::new();
                for answer in array_field(qa, "answers", path)? {
                    let text = str_field(answer, "text", path)?;
                    let start = answer
                        .get("answer_start")
                        .and_then(Value::as_u64)
                        .ok_or_else(|| Error::data(path, 0, "missing answer_start"))?
                        as usize;
                    let len = text.chars().count();
                    let matches =
                        start + len <= chars.len() && chars[start..start + len].iter().copied().eq(text.chars());
                    if matches {
                        answers.push(AnswerSpan {
                            text: text.to_string(),
                            start,
                        });
                    } else {
                        log::warn!(
                            "{}: answer {text:?} of question {id:?} does not match offset {start}",
                            path.display()
                        );
                        out.skipped += 1;
                    }
                }
                if answers.is_empty() {
                    continue;
                }
                out.examples.push(Example::Qa {
                    id,
                    question: question.to_string(),
                    context: context.to_string(),
                    answers,
                });
            }
        }
    }
    Ok(out)
}

/// Column mapping for delimited classification files (0-based indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsvColumns {
    pub label: usize,
    pub text: usize,
    pub text_b: Option<usize>,
    pub delimiter: char,
    pub has_header: bool,
}

impl Default for TsvColumns {
    fn default() -> Self {
        Self {
            label: 0,
            text: 1,
            text_b: None,
            delimiter: '\t',
            has_header: false,
        }
    }
}

/// One example per row; every row must have the same number of fields.
pub fn load_tsv_classification(path: &Path, columns: &TsvColumns, policy: OnError) -> Result<LoadedSplit> {
    let text = read(path)?;
    let mut out = LoadedSplit::default();
    let mut width = None;
    let needed = columns.label.max(columns.text).max(columns.text_b.unwrap_or(0)) + 1;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(columns.delimiter).collect();
        let expected = *width.get_or_insert(fields.len());
        let problem = if fields.len() != expected {
            Some(format!("row has {} fields, expected {expected}", fields.len()))
        } else if fields.len() < needed {
            Some(format!(
                "row has {} fields, the column mapping needs {needed}",
                fields.len()
            ))
        } else {
            None
        };
        if let Some(message) = problem {
            handle(policy, Error::data(path, i + 1, message), &mut out.skipped)?;
            continue;
        }
        if columns.has_header && i == 0 {
            continue;
        }
        let label = fields[columns.label].trim().to_string();
        let text = fields[columns.text].trim().to_string();
        out.examples.push(match columns.text_b {
            Some(b) => Example::Pair {
                text_a: text,
                text_b: fields[b].trim().to_string(),
                label,
            },
            None => Example::Text { text, label },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataFormat {
    Conll2002,
    ConlluPos,
    SquadJson,
    Tsv(TsvColumns),
}

impl DataFormat {
    pub fn kind(&self) -> TaskKind {
        match self {
            DataFormat::Conll2002 | DataFormat::ConlluPos => TaskKind::TokenClassification,
            DataFormat::SquadJson => TaskKind::SpanQa,
            DataFormat::Tsv(_) => TaskKind::SequenceClassification,
        }
    }

    pub fn load(&self, path: &Path, policy: OnError) -> Result<LoadedSplit> {
        match self {
            DataFormat::Conll2002 => load_conll2002(path, policy),
            DataFormat::ConlluPos => load_conllu_pos(path, policy),
            DataFormat::SquadJson => load_squad_json(path),
            DataFormat::Tsv(columns) => load_tsv_classification(path, columns, policy),
        }
    }

    fn extension(&self) -> &'static str {
        match self {
            DataFormat::Conll2002 => "txt",
            DataFormat::ConlluPos => "conllu",
            DataFormat::SquadJson => "json",
            DataFormat::Tsv(_) => "tsv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub task: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskDataset {
    /// Builds the label set from the training split (sorted) and checks that
    /// dev and test use no other label.
    pub fn from_splits(
        name: &str,
        kind: TaskKind,
        train: Vec<Example>,
        dev: Vec<Example>,
        test: Vec<Example>,
    ) -> Result<Self> {
        let labels: BTreeSet<&str> = train.iter().flat_map(Example::labels).collect();
        for (split, examples) in [("dev", &dev), ("test", &test)] {
            for example in examples.iter() {
                if let Some(bad) = example.labels().into_iter().find(|l| !labels.contains(l)) {
                    return Err(Error::Validation(format!(
                        "{name}: {split} label {bad:?} not seen in train"
                    )));
                }
            }
        }
        let label_names = labels.into_iter().map(str::to_string).collect();
        let task = TaskSpec::new(kind, label_names)?;
        for example in train.iter().chain(&dev).chain(&test) {
            task.check_example(example)?;
        }
        Ok(Self {
            name: name.to_string(),
            task,
            train,
            dev,
            test,
        })
    }

    /// Paths `train.<ext>`, `dev.<ext>` and `test.<ext>` inside `dir`.
    pub fn split_paths(dir: &Path, format: &DataFormat) -> [PathBuf; 3] {
        ["train", "dev", "test"].map(|s| dir.join(format!("{s}.{}", format.extension())))
    }

    /// Loads the three splits from `dir`. Malformed training and dev records
    /// are fatal; malformed test records are skipped with a warning.
    pub fn load_dir(name: &str, dir: &Path, format: &DataFormat) -> Result<Self> {
        let [train, dev, test] = Self::split_paths(dir, format);
        let train = format.load(&train, OnError::Fail)?;
        let dev = format.load(&dev, OnError::Fail)?;
        let test = format.load(&test, OnError::Skip)?;
        Self::from_splits(name, format.kind(), train.examples, dev.examples, test.examples)
    }
}

/// Read access to the three splits. Fine-tuning goes through this trait so
/// that split usage can be audited.
pub trait Splits {
    fn task(&self) -> &TaskSpec;
    fn train(&self) -> &[Example];
    fn dev(&self) -> &[Example];
    fn test(&self) -> &[Example];
}

impl Splits for TaskDataset {
    fn task(&self) -> &TaskSpec {
        &self.task
    }

    fn train(&self) -> &[Example] {
        &self.train
    }

    fn dev(&self) -> &[Example] {
        &self.dev
    }

    fn test(&self) -> &[Example] {
        &self.test
    }
}
