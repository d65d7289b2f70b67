//! Teacher-student compression: layer-selection initialization and a loss
//! mixing softened teacher targets, the masked-LM objective and hidden-state
//! alignment.
//!
//! ```text
//! loss = α_soft · T² · KL(softmax(t / T) ‖ softmax(s / T))
//!      + α_mlm  · CE(s, labels)
//!      + α_cos  · mean(1 − cos(h_s, h_t))
//! ```
//!
//! The two logit terms average over labeled positions, the cosine term over
//! non-padding positions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::encoder::{
    encode_on_tape, gradients, layer_prefix, mlm_logits_on_tape, parameter_layout, EncoderConfig, EncoderOutput, Mode,
    ParameterSet,
};
use crate::error::{Error, Result};
use crate::kv::KvDocument;
use crate::masking::{mask_tokens, MaskedBatch, MaskingConfig};
use crate::optim::{lamb_step, OptimizerSettings, OptimizerState};
use crate::pretrain::{checkpoint_name, save_training_checkpoint, write_trace, PretrainCorpus, LAST_GOOD};
use crate::schedule::{lr_at, TrainingSchedule};
use crate::seeding::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct DistillationRecipe {
    pub temperature: f64,
    pub alpha_soft: f64,
    pub alpha_mlm: f64,
    pub alpha_cos: f64,
    /// Teacher layer each student layer starts from.
    pub layer_map: Vec<usize>,
}

impl Default for DistillationRecipe {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            alpha_soft: 5.0,
            alpha_mlm: 2.0,
            alpha_cos: 1.0,
            layer_map: vec![0, 2, 4, 6, 8, 10],
        }
    }
}

impl DistillationRecipe {
    /// Checks the weights and temperature, and the layer map against a teacher
    /// depth when one is given.
    pub fn validate(&self, teacher_layers: Option<usize>) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        let alphas = [self.alpha_soft, self.alpha_mlm, self.alpha_cos];
        if alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if alphas.iter().all(|&a| a == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if self.layer_map.is_empty() || self.layer_map.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "layer_map {:?} must be non-empty and strictly increasing",
                self.layer_map
            )));
        }
        if let Some(depth) = teacher_layers {
            if let Some(&bad) = self.layer_map.iter().find(|&&l| l >= depth) {
                return Err(Error::Config(format!(
                    "layer_map entry {bad} outside a {depth}-layer teacher"
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.set("temperature", self.temperature);
        doc.set("alpha_soft", self.alpha_soft);
        doc.set("alpha_mlm", self.alpha_mlm);
        doc.set("alpha_cos", self.alpha_cos);
        doc.set_list("layer_map", &self.layer_map);
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let recipe = Self {
            temperature: doc.require("temperature")?,
            alpha_soft: doc.require("alpha_soft")?,
            alpha_mlm: doc.require("alpha_mlm")?,
            alpha_cos: doc.require("alpha_cos")?,
            layer_map: doc.require_list("layer_map")?,
        };
        recipe.validate(None)?;
        Ok(recipe)
    }
}

/// Checks that a student with `student` config can be initialized from a
/// teacher with `teacher` config through `layer_map`.
pub fn check_student(teacher: &EncoderConfig, student: &EncoderConfig, layer_map: &[usize]) -> Result<()> {
    student.validate()?;
    let mut problems = Vec::new();
    if student.hidden != teacher.hidden {
        problems.push(format!(
            "student hidden {} differs from teacher {}",
            student.hidden, teacher.hidden
        ));
    }
    if (student.embedding, student.intermediate, student.heads)
        != (teacher.embedding, teacher.intermediate, teacher.heads)
    {
        problems.push("student embedding, intermediate and heads must match the teacher".into());
    }
    if student.vocab_size != teacher.vocab_size || student.max_positions > teacher.max_positions {
        problems.push("student vocabulary and positions must fit the teacher's".into());
    }
    if student.use_token_type || student.use_pooler {
        problems.push("student must have neither token-type embeddings nor a pooler".into());
    }
    if student.share_layers && student.num_layers > 1 {
        problems.push("student layers cannot be shared".into());
    }
    if layer_map.len() != student.num_layers {
        problems.push(format!(
            "layer_map has {} entries for {} student layers",
            layer_map.len(),
            student.num_layers
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let recipe = DistillationRecipe {
        layer_map: layer_map.to_vec(),
        ..DistillationRecipe::default()
    };
    recipe.validate(Some(teacher.num_layers))
}

/// Copies the embeddings, the masked-LM head and the mapped layers of the
/// teacher into a new student. Token-type, pooler and task-head tensors are
/// not carried over.
pub fn init_student(teacher: &ParameterSet, student: &EncoderConfig, layer_map: &[usize]) -> Result<ParameterSet> {
    let tconfig = teacher.config();
    check_student(tconfig, student, layer_map)?;
    let mut tensors = BTreeMap::new();
    for spec in parameter_layout(student) {
        let source = match spec.name.strip_prefix("layer.") {
            Some(rest) => {
                let (index, tail) = rest.split_once('.').expect("layer tensors have a suffix");
                let index: usize = index.parse().expect("numeric layer index");
                format!("{}.{tail}", layer_prefix(tconfig, layer_map[index]))
            }
            None => spec.name.clone(),
        };
        let tensor = teacher
            .get(&source)
            .ok_or_else(|| Error::Shape(format!("teacher lacks {source}")))?;
        let tensor = if spec.name == "embeddings.position" {
            tensor
                .slice_axis(ndarray::Axis(0), (0..student.max_positions).into())
                .to_owned()
        } else {
            tensor.clone()
        };
        tensors.insert(spec.name, tensor);
    }
    ParameterSet::from_tensors(student.clone(), tensors)
}

/// Value of each term before weighting, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillBreakdown {
    pub total: f64,
    pub soft: f64,
    pub mlm: f64,
    pub cos: f64,
}

struct Terms {
    total: Var,
    soft: Option<Var>,
    mlm: Option<Var>,
    cos: Option<Var>,
}

/// Builds the weighted loss on the tape. Terms with a zero weight are left
/// out of the graph entirely.
fn loss_terms(
    g: &mut Graph<'_>,
    student_logits: Option<Var>,
    teacher_logits: &Array2<f64>,
    labels: &[usize],
    student_hidden: Var,
    teacher_hidden: &Array2<f64>,
    recipe: &DistillationRecipe,
) -> Result<Terms> {
    recipe.validate(None)?;
    let t = recipe.temperature;
    let mut weighted = Vec::new();
    let (mut soft, mut mlm, mut cos) = (None, None, None);
    if let Some(logits) = student_logits {
        let n = labels.len() as f64;
        if recipe.alpha_soft > 0.0 {
            let mut targets = teacher_logits / t;
            for mut row in targets.rows_mut() {
                softmax_in_place(row.as_slice_mut().expect("contiguous row"));
            }
            let v = g.soft_target_kl(logits, targets, t, t * t / n)?;
            weighted.push((v, recipe.alpha_soft));
            soft = Some(v);
        }
        if recipe.alpha_mlm > 0.0 {
            let v = g.cross_entropy(logits, labels, 1.0 / n)?;
            weighted.push((v, recipe.alpha_mlm));
            mlm = Some(v);
        }
    }
    let rows = g.value(student_hidden).nrows();
    if recipe.alpha_cos > 0.0 && rows > 0 {
        let target = g.constant(teacher_hidden.clone());
        let v = g.cosine_distance(student_hidden, target, 1.0 / rows as f64)?;
        weighted.push((v, recipe.alpha_cos));
        cos = Some(v);
    }
    let total = if weighted.is_empty() {
        g.constant(Array2::zeros((1, 1)))
    } else {
        g.weighted_sum(&weighted)?
    };
    Ok(Terms { total, soft, mlm, cos })
}

fn breakdown(g: &Graph<'_>, terms: &Terms) -> DistillBreakdown {
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
    DistillBreakdown {
        total: g.scalar(terms.total),
        soft: value(terms.soft),
        mlm: value(terms.mlm),
        cos: value(terms.cos),
    }
}

/// The loss on plain arrays. Logit rows are labeled positions and hidden rows
/// are non-padding positions.
pub fn distill_loss(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    labels: &[usize],
    student_hidden: &Array2<f64>,
    teacher_hidden: &Array2<f64>,
    recipe: &DistillationRecipe,
) -> Result<DistillBreakdown> {
    if student_logits.dim() != teacher_logits.dim() || student_logits.nrows() != labels.len() {
        return Err(Error::Shape(
            "student logits, teacher logits and labels disagree".into(),
        ));
    }
    if student_hidden.dim() != teacher_hidden.dim() {
        return Err(Error::Shape("student and teacher hidden states disagree".into()));
    }
    let mut g = Graph::detached();
    let logits = (!labels.is_empty()).then(|| g.constant(student_logits.clone()));
    let hidden = g.constant(student_hidden.clone());
    let terms = loss_terms(&mut g, logits, teacher_logits, labels, hidden, teacher_hidden, recipe)?;
    Ok(breakdown(&g, &terms))
}

/// Gradient of the weighted loss with respect to the student logits.
pub fn distill_logit_gradient(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    labels: &[usize],
    recipe: &DistillationRecipe,
) -> Result<Array2<f64>> {
    let mut g = Graph::detached();
    let logits = g.input(student_logits.clone());
    let hidden = g.constant(Array2::zeros((0, 1)));
    let terms = loss_terms(
        &mut g,
        Some(logits),
        teacher_logits,
        labels,
        hidden,
        &Array2::zeros((0, 1)),
        recipe,
    )?;
    Ok(g.backward_inputs(terms.total, &[logits])?.remove(0))
}

/// What the frozen teacher contributes for one masked batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    /// Masked-LM logits at the labeled positions.
    pub logits: Array2<f64>,
    /// Final hidden states at the non-padding positions.
    pub hidden: Array2<f64>,
}

fn content_rows(out: &EncoderOutput, batch: &MaskedBatch) -> Vec<usize> {
    let mut rows = Vec::new();
    for (b, seq) in batch.inputs.iter().enumerate() {
        for (p, &m) in seq.attention_mask.iter().enumerate() {
            if m == 1 {
                rows.push(out.row(b, p));
            }
        }
    }
    rows
}

/// Eval-mode teacher pass. The tape is frozen, so nothing downstream can
/// reach the teacher's weights.
pub fn teacher_targets(teacher: &ParameterSet, batch: &MaskedBatch) -> Result<TeacherTargets> {
    let mut g = Graph::frozen(teacher);
    let out = encode_on_tape(&mut g, &batch.inputs)?;
    let (positions, _) = batch.targets();
    let logits = if positions.is_empty() {
        Array2::zeros((0, teacher.config().vocab_size))
    } else {
        let v = mlm_logits_on_tape(&mut g, &out, &positions)?;
        g.value(v).clone()
    };
    let hidden = g.value(out.hidden).select(ndarray::Axis(0), &content_rows(&out, batch));
    Ok(TeacherTargets { logits, hidden })
}

/// Builds the student side of the loss on `g` against precomputed teacher
/// targets.
pub fn distill_objective(
    g: &mut Graph<'_>,
    batch: &MaskedBatch,
    teacher: &TeacherTargets,
    recipe: &DistillationRecipe,
) -> Result<(Var, DistillBreakdown)> {
    let out = encode_on_tape(g, &batch.inputs)?;
    let (positions, labels) = batch.targets();
    let logits = if positions.is_empty() || (recipe.alpha_soft == 0.0 && recipe.alpha_mlm == 0.0) {
        None
    } else {
        Some(mlm_logits_on_tape(g, &out, &positions)?)
    };
    let hidden = if recipe.alpha_cos > 0.0 {
        g.gather(out.hidden, &content_rows(&out, batch))?
    } else {
        g.constant(Array2::zeros((0, 1)))
    };
    if teacher.hidden.dim() != g.value(hidden).dim() && recipe.alpha_cos > 0.0 {
        return Err(Error::Shape("teacher and student hidden states disagree".into()));
    }
    let terms = loss_terms(g, logits, &teacher.logits, &labels, hidden, &teacher.hidden, recipe)?;
    let parts = breakdown(g, &terms);
    Ok((terms.total, parts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOptions {
    pub schedule: TrainingSchedule,
    pub masking: MaskingConfig,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl DistillOptions {
    /// Adam with decoupled decay rather than the layer-adaptive optimizer.
    pub fn new(schedule: TrainingSchedule, seed: u64) -> Self {
        Self {
            schedule,
            masking: MaskingConfig::default(),
            optimizer: OptimizerSettings::adamw(),
            seed,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: DistillBreakdown,
}

pub const DISTILL_TRACE_HEADER: &str = "step\tlr\tloss\tsoft_loss\tmlm_loss\tcos_loss";

pub fn render_distill_trace(records: &[DistillRecord]) -> String {
    let mut out = format!("{DISTILL_TRACE_HEADER}\n");
    for r in records {
        let l = r.loss;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.step, r.lr, l.total, l.soft, l.mlm, l.cos
        )
        .expect("string write");
    }
    out
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub params: ParameterSet,
    pub optimizer: OptimizerState,
    pub trace: Vec<DistillRecord>,
    pub checkpoints: Vec<PathBuf>,
}

const TRACE_FILE: &str = "distill.tsv";

/// Runs `mask -> teacher pass -> student pass -> loss -> gradients ->
/// optimizer` for every step of the schedule. Batches, masks and dropout use
/// the same streams as pretraining, so a recipe with only the masked-LM term
/// reproduces plain pretraining of the student.
pub fn distill(
    teacher: &ParameterSet,
    start: Checkpoint,
    corpus: &PretrainCorpus,
    recipe: &DistillationRecipe,
    options: &DistillOptions,
    out_dir: Option<&Path>,
) -> Result<DistillOutcome> {
    recipe.validate(None)?;
    options.schedule.validate()?;
    let mut params = start.params;
    let (tc, sc) = (teacher.config(), params.config().clone());
    if tc.hidden != sc.hidden || tc.vocab_size != sc.vocab_size {
        return Err(Error::Config(
            "teacher and student differ in width or vocabulary".into(),
        ));
    }
    let first_step: u64 = start.metadata.optional("step", 0)?;
    let mut optimizer = match start.optimizer {
        Some(state) if first_step > 0 => state,
        _ => OptimizerState::new(&params, options.optimizer),
    };
    optimizer.track_new(&params);
    let needs_teacher = recipe.alpha_soft > 0.0 || recipe.alpha_cos > 0.0;
    let vocab_size = sc.vocab_size;
    let total = options.schedule.total_steps;
    let mut trace = Vec::new();
    let mut saved = Vec::new();
    let save = |params: &ParameterSet, optimizer: &OptimizerState, step: u64, name: &str| {
        save_training_checkpoint(out_dir, name, params, optimizer, step, options.seed)
    };

    for step in first_step..total {
        let lr = lr_at(step, &options.schedule)?;
        let (seqs, _) = corpus.batch(options.schedule.batch_size, options.seed, step);
        let mut mask_rng = stream(options.seed, Purpose::Masking, step);
        let masked = mask_tokens(&seqs, vocab_size, options.masking, &mut mask_rng)?;
        let targets = if needs_teacher {
            teacher_targets(teacher, &masked)?
        } else {
            TeacherTargets {
                logits: Array2::zeros((0, vocab_size)),
                hidden: Array2::zeros((0, sc.hidden)),
            }
        };
        let mode = Mode::Train {
            seed: stream(options.seed, Purpose::Dropout, step).random(),
        };
        let mut parts = None;
        let result = gradients(&params, mode, |g| {
            let (loss, b) = distill_objective(g, &masked, &targets, recipe)?;
            parts = Some(b);
            Ok(loss)
        })
        .and_then(|(_, grads)| lamb_step(&mut params, &grads, &mut optimizer, lr));
        if let Err(err) = result {
            if matches!(err, Error::NonFinite(_)) {
                save(&params, &optimizer, step, LAST_GOOD)?;
                if let Some(dir) = out_dir {
                    write_trace(dir, TRACE_FILE, &render_distill_trace(&trace))?;
                }
            }
            return Err(err);
        }
        let done = step + 1;
        if done % options.log_every.max(1) == 0 || done == total {
            trace.push(DistillRecord {
                step: done,
                lr,
                loss: parts.expect("objective ran"),
            });
        }
        if options.checkpoint_every > 0 && done % options.checkpoint_every == 0 && done != total {
            saved.extend(save(&params, &optimizer, done, &checkpoint_name(done))?);
        }
    }
    saved.extend(save(&params, &optimizer, total, &checkpoint_name(total))?);
    if let Some(dir) = out_dir {
        write_trace(dir, TRACE_FILE, &render_distill_trace(&trace))?;
    }
    Ok(DistillOutcome {
        params,
        optimizer,
        trace,
        checkpoints: saved,
    })
}
