//! Masked-LM pretraining with optional sentence-order prediction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::encoder::{
    add_linear_head, dense, encode_on_tape, gradients, mlm_logits_on_tape, pooled_on_tape, trim_padding, Mode,
    ParameterSet,
};
use crate::error::{Error, Result};
use crate::masking::{mask_tokens, MaskedBatch, MaskingConfig};
use crate::optim::{lamb_step, OptimizerSettings, OptimizerState};
use crate::schedule::{lr_at, TrainingSchedule};
use crate::seeding::{stream, Purpose};
use crate::tokenizer::{encode, EncodedSequence, SubwordVocabulary};

pub const SOP_HEAD: &str = "head.sop";

#[derive(Debug, Clone, PartialEq)]
enum Example {
    Single(EncodedSequence),
    Pair {
        ordered: EncodedSequence,
        swapped: EncodedSequence,
    },
}

/// Tokenized pretraining text. Documents are separated by blank lines and hold
/// one sentence per line; with sentence-order prediction the examples are
/// consecutive sentence pairs inside a document.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainCorpus {
    examples: Vec<Example>,
    sop: bool,
}

impl PretrainCorpus {
    pub fn from_text(text: &str, vocab: &SubwordVocabulary, max_len: usize, sop: bool) -> Result<Self> {
        let mut documents: Vec<Vec<&str>> = vec![Vec::new()];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                if !documents.last().expect("non-empty").is_empty() {
                    documents.push(Vec::new());
                }
            } else {
                documents.last_mut().expect("non-empty").push(line);
            }
        }
        let mut examples = Vec::new();
        for doc in &documents {
            if sop {
                for pair in doc.windows(2) {
                    examples.push(Example::Pair {
                        ordered: encode(pair[0], Some(pair[1]), max_len, vocab)?,
                        swapped: encode(pair[1], Some(pair[0]), max_len, vocab)?,
                    });
                }
            } else {
                for sentence in doc {
                    examples.push(Example::Single(encode(sentence, None, max_len, vocab)?));
                }
            }
        }
        if examples.is_empty() {
            return Err(Error::Validation(if sop {
                "corpus has no document with two consecutive sentences".into()
            } else {
                "corpus is empty".into()
            }));
        }
        Ok(Self { examples, sop })
    }

    pub fn load(path: &Path, vocab: &SubwordVocabulary, max_len: usize, sop: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, vocab, max_len, sop)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sop(&self) -> bool {
        self.sop
    }

    /// The uncorrupted batch for `step`, plus sentence-order labels. A batch
    /// larger than the corpus repeats it.
    pub fn batch(&self, batch_size: usize, seed: u64, step: u64) -> (Vec<EncodedSequence>, Vec<usize>) {
        let mut rng = stream(seed, Purpose::Batch, step);
        let n = self.examples.len();
        let indices: Vec<usize> = if batch_size >= n {
            // Every example once per pass; each copy is masked independently.
            (0..batch_size).map(|i| i % n).collect()
        } else {
            let mut picked = sample(&mut rng, n, batch_size).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut seqs = Vec::with_capacity(indices.len());
        let mut sop = Vec::new();
        for i in indices {
            match &self.examples[i] {
                Example::Single(s) => seqs.push(s.clone()),
                Example::Pair { ordered, swapped } => {
                    let swap = rng.random_bool(0.5);
                    seqs.push(if swap { swapped.clone() } else { ordered.clone() });
                    sop.push(swap as usize);
                }
            }
        }
        trim_padding(&mut seqs);
        (seqs, sop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub sop: Option<f64>,
    /// False when the batch had no labeled positions and `mlm` is a
    /// placeholder zero.
    pub has_labels: bool,
}

/// Builds `mlm + sop` on the tape. The masked-LM term is the mean
/// cross-entropy over labeled positions; the order term is the mean
/// cross-entropy of a 2-way classifier on the `[CLS]` representation.
pub fn pretrain_objective(g: &mut Graph<'_>, batch: &MaskedBatch) -> Result<(Var, LossBreakdown)> {
    let out = encode_on_tape(g, &batch.inputs)?;
    let (positions, targets) = batch.targets();
    let has_labels = !targets.is_empty();
    let mlm = if has_labels {
        let logits = mlm_logits_on_tape(g, &out, &positions)?;
        g.cross_entropy(logits, &targets, 1.0 / targets.len() as f64)?
    } else {
        g.constant(ndarray::Array2::zeros((1, 1)))
    };
    let mut terms = vec![(mlm, 1.0)];
    let mut sop_var = None;
    if !batch.sop_labels.is_empty() {
        if batch.sop_labels.len() != batch.inputs.len() {
            return Err(Error::Shape("one order label per sequence required".into()));
        }
        let pooled = pooled_on_tape(g, &out)?;
        let logits = dense(g, pooled, SOP_HEAD)?;
        let loss = g.cross_entropy(logits, &batch.sop_labels, 1.0 / batch.sop_labels.len() as f64)?;
        terms.push((loss, 1.0));
        sop_var = Some(loss);
    }
    let total = g.weighted_sum(&terms)?;
    Ok((
        total,
        LossBreakdown {
            mlm: g.scalar(mlm),
            sop: sop_var.map(|v| g.scalar(v)),
            has_labels,
        },
    ))
}

/// Eval-mode losses for a masked batch.
pub fn pretrain_losses(params: &ParameterSet, batch: &MaskedBatch) -> Result<LossBreakdown> {
    let mut g = Graph::frozen(params);
    Ok(pretrain_objective(&mut g, batch)?.1)
}

pub fn attach_sop_head(params: &mut ParameterSet, seed: u64) -> Result<()> {
    add_linear_head(params, SOP_HEAD, 2, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub schedule: TrainingSchedule,
    pub masking: MaskingConfig,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
    /// Write a trace record every `log_every` steps (and at the last step).
    pub log_every: u64,
    /// Save a checkpoint every `checkpoint_every` steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl PretrainOptions {
    pub fn new(schedule: TrainingSchedule, seed: u64) -> Self {
        Self {
            schedule,
            masking: MaskingConfig::default(),
            optimizer: OptimizerSettings::lamb(),
            seed,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub lr: f64,
    pub mlm_loss: f64,
    pub sop_loss: Option<f64>,
}

pub const TRACE_HEADER: &str = "step\tlr\tmlm_loss\tsop_loss";
const TRACE_FILE: &str = "pretrain.tsv";
/// Checkpoint written when a step produces a non-finite value.
pub const LAST_GOOD: &str = "last-good";

pub fn render_trace(records: &[TraceRecord]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in records {
        let sop = r.sop_loss.map_or_else(|| "-".to_string(), |v| v.to_string());
        writeln!(out, "{}\t{}\t{}\t{}", r.step, r.lr, r.mlm_loss, sop).expect("string write");
    }
    out
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub params: ParameterSet,
    pub optimizer: OptimizerState,
    pub trace: Vec<TraceRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}")
}

/// Runs `mask -> forward -> loss -> gradients -> optimizer -> schedule` for
/// every step of the schedule. When `out_dir` is given the loss trace goes to
/// `traces/pretrain.tsv` and checkpoints to `checkpoints/step-N`. A
/// checkpoint carrying optimizer state and a `step` entry resumes the run.
pub fn pretrain(
    start: Checkpoint,
    corpus: &PretrainCorpus,
    options: &PretrainOptions,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    options.schedule.validate()?;
    let mut params = start.params;
    if corpus.sop() && !params.has_head(SOP_HEAD) {
        attach_sop_head(&mut params, stream(options.seed, Purpose::HeadInit, 0).random())?;
    }
    let first_step: u64 = start.metadata.optional("step", 0)?;
    let mut optimizer = match start.optimizer {
        Some(state) if first_step > 0 => state,
        _ => OptimizerState::new(&params, options.optimizer),
    };
    optimizer.track_new(&params);

    let vocab_size = params.config().vocab_size;
    let total = options.schedule.total_steps;
    let mut trace = Vec::new();
    let mut saved = Vec::new();
    let save = |params: &ParameterSet, optimizer: &OptimizerState, step: u64, name: &str| {
        save_training_checkpoint(out_dir, name, params, optimizer, step, options.seed)
    };

    for step in first_step..total {
        let lr = lr_at(step, &options.schedule)?;
        let (seqs, sop_labels) = corpus.batch(options.schedule.batch_size, options.seed, step);
        let mut mask_rng = stream(options.seed, Purpose::Masking, step);
        let mut masked = mask_tokens(&seqs, vocab_size, options.masking, &mut mask_rng)?;
        masked.sop_labels = sop_labels;
        let mode = Mode::Train {
            seed: stream(options.seed, Purpose::Dropout, step).random(),
        };
        let mut breakdown = None;
        let result = gradients(&params, mode, |g| {
            let (loss, parts) = pretrain_objective(g, &masked)?;
            breakdown = Some(parts);
            Ok(loss)
        })
        .and_then(|(_, grads)| lamb_step(&mut params, &grads, &mut optimizer, lr));
        if let Err(err) = result {
            if matches!(err, Error::NonFinite(_)) {
                save(&params, &optimizer, step, LAST_GOOD)?;
                if let Some(dir) = out_dir {
                    write_trace(dir, TRACE_FILE, &render_trace(&trace))?;
                }
            }
            return Err(err);
        }
        let parts = breakdown.expect("objective ran");
        let done = step + 1;
        if done % options.log_every.max(1) == 0 || done == total {
            trace.push(TraceRecord {
                step: done,
                lr,
                mlm_loss: parts.mlm,
                sop_loss: parts.sop,
            });
        }
        if options.checkpoint_every > 0 && done % options.checkpoint_every == 0 && done != total {
            saved.extend(save(&params, &optimizer, done, &checkpoint_name(done))?);
        }
    }
    saved.extend(save(&params, &optimizer, total, &checkpoint_name(total))?);
    if let Some(dir) = out_dir {
        write_trace(dir, TRACE_FILE, &render_trace(&trace))?;
    }
    Ok(PretrainOutcome {
        params,
        optimizer,
        trace,
        checkpoints: saved,
    })
}

/// Writes `checkpoints/<name>` under `out_dir` with optimizer state and the
/// `step` entry needed to resume.
pub(crate) fn save_training_checkpoint(
    out_dir: Option<&Path>,
    name: &str,
    params: &ParameterSet,
    optimizer: &OptimizerState,
    step: u64,
    seed: u64,
) -> Result<Option<PathBuf>> {
    let Some(dir) = out_dir else { return Ok(None) };
    let path = dir.join("checkpoints").join(name);
    let mut ckpt = Checkpoint::new(params.clone());
    ckpt.optimizer = Some(optimizer.clone());
    ckpt.metadata.set("step", step);
    ckpt.metadata.set("seed", seed);
    ckpt.metadata.set("optimizer", optimizer.settings().name());
    checkpoint::save(&path, &ckpt)?;
    Ok(Some(path))
}

pub(crate) fn write_trace(dir: &Path, file: &str, text: &str) -> Result<()> {
    let traces = dir.join("traces");
    std::fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
    let path = traces.join(file);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
