//! One pass/fail line per acceptance criterion. Every criterion is run even
//! when an earlier one fails; the test fails if any of them does.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ligero::autograd::{Graph, Var};
use ligero::checkpoint::Checkpoint;
use ligero::data::{Example, TaskDataset};
use ligero::distill::{distill, distill_loss, init_student, DistillOptions, DistillationRecipe};
use ligero::encoder::{
    build_model, count_parameters, encode_on_tape, gradients, mlm_logits_on_tape, pooled_on_tape, EncoderConfig,
    GradientSet, Mode, ModelPreset, ParameterSet, Tensor,
};
use ligero::finetune::{
    attach_head, extract_answer_span, fine_tune, grid_search_with, Cell, CellStatus, FineTuneConfig, HyperGrid,
    LrVariant, TaskKind, REDUCED_LEARNING_RATES,
};
use ligero::metrics::{entity_f1, qa_em, qa_f1, render_ratio, EvaluationReport};
use ligero::optim::{is_unadapted, lamb_step, OptimizerSettings, OptimizerState};
use ligero::presets::{pretraining_schedule, published_scores, schedule_names, REFERENCE_MODEL};
use ligero::pretrain::{pretrain, PretrainCorpus, PretrainOptions};
use ligero::schedule::{lr_at, TrainingSchedule};
use ligero::tokenizer::{train_vocabulary, EncodedSequence, SubwordVocabulary};
use ligero::Error;
use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS: &str = include_str!("fixtures/smoke_corpus.txt");

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

fn verdict(failures: Vec<String>, detail: String) -> Outcome {
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(failures.join("; "))
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn parameter_accounting() -> Outcome {
    let presets = [
        ModelPreset::AlbetoTiny,
        ModelPreset::AlbetoBase,
        ModelPreset::AlbetoLarge,
        ModelPreset::AlbetoXlarge,
        ModelPreset::AlbetoXxlarge,
        ModelPreset::DistilBeto,
    ];
    let mut failures = Vec::new();
    let timer = Instant::now();
    let counts: Vec<u64> = presets.iter().map(|p| count_parameters(&p.config())).collect();
    let count_time = timer.elapsed();
    let mut detail = Vec::new();
    for (preset, count) in presets.iter().zip(&counts) {
        let published = preset.published_parameters();
        let off = *count as f64 / published as f64 - 1.0;
        detail.push(format!("{} {count} ({:+.1}%)", preset.name(), 100.0 * off));
        check(&mut failures, off.abs() <= 0.05, || {
            format!(
                "{} has {count} parameters, {:+.2}% from {published}",
                preset.name(),
                100.0 * off
            )
        });
        let built = build_model(&preset.config(), 0).map(|p| p.num_scalars());
        check(&mut failures, built.as_ref().ok() == Some(count), || {
            format!("{}: build_model allocates {built:?}, count is {count}", preset.name())
        });
    }
    check(&mut failures, count_time < Duration::from_secs(1), || {
        format!("counting took {}", secs(count_time))
    });
    verdict(failures, format!("{} in {}", detail.join(", "), secs(count_time)))
}

/// Printed comparison rows: model, size ratio, performance ratio.
const PUBLISHED_ROWS: [(&str, f64, &str, &str); 8] = [
    ("BETO uncased", 77.48, "1x", "0.95x"),
    ("BETO cased", 81.02, "1x", "1x"),
    ("DistilBETO", 73.22, "1.64x", "0.90x"),
    ("ALBETO tiny", 70.86, "22x", "0.87x"),
    ("ALBETO base", 79.35, "9.16x", "0.97x"),
    ("ALBETO large", 78.12, "6.11x", "0.96x"),
    ("ALBETO xlarge", 80.20, "1.86x", "0.98x"),
    ("ALBETO xxlarge", 81.34, "0.49x", "1x"),
];

fn aggregation_reproduction() -> Outcome {
    let timer = Instant::now();
    let report = EvaluationReport::build(&published_scores().map_err(|e| e.to_string())?, REFERENCE_MODEL)
        .map_err(|e| e.to_string())?;
    let elapsed = timer.elapsed();
    let mut failures = Vec::new();
    check(&mut failures, report.rows.len() == PUBLISHED_ROWS.len(), || {
        format!("{} rows", report.rows.len())
    });
    let mut worst: f64 = 0.0;
    for (row, (model, average, size, perf)) in report.rows.iter().zip(PUBLISHED_ROWS) {
        worst = worst.max((row.average - average).abs());
        check(&mut failures, row.model == model, || {
            format!("row {} where {model} expected", row.model)
        });
        check(&mut failures, (row.average - average).abs() <= 0.01 + 1e-9, || {
            format!("{model}: average {} vs {average}", row.average)
        });
        let got = (render_ratio(row.size_ratio), render_ratio(row.performance_ratio));
        check(&mut failures, got == (size.to_string(), perf.to_string()), || {
            format!("{model}: ratios {got:?} vs ({size}, {perf})")
        });
    }
    check(&mut failures, elapsed < Duration::from_secs(1), || {
        format!("took {}", secs(elapsed))
    });
    verdict(
        failures,
        format!("8 rows, max average gap {worst:.4}, {}", secs(elapsed)),
    )
}

fn sequence(ids: &[u32], segments: &[u8], len: usize) -> EncodedSequence {
    let n = ids.len();
    let mut s = EncodedSequence {
        ids: ids.to_vec(),
        attention_mask: vec![1; n],
        segment_ids: segments.to_vec(),
        char_offsets: vec![None; n],
    };
    s.ids.resize(len, 0);
    s.attention_mask.resize(len, 0);
    s.segment_ids.resize(len, 0);
    s.char_offsets.resize(len, None);
    s
}

fn tiny_config(shared: bool) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 8,
        embedding: 4,
        heads: 2,
        intermediate: 12,
        vocab_size: 50,
        max_positions: 8,
        share_layers: shared,
        use_token_type: true,
        use_pooler: true,
        dropout: 0.0,
    }
}

/// Masked-LM loss plus a fixed projection of the pooled output, so every
/// parameter including the pooler receives gradient.
fn model_loss(g: &mut Graph<'_>, batch: &[EncodedSequence]) -> ligero::Result<Var> {
    let out = encode_on_tape(g, batch)?;
    let logits = mlm_logits_on_tape(g, &out, &[(0, 1), (0, 3), (1, 2)])?;
    let mlm = g.cross_entropy(logits, &[17, 5, 44], 1.0 / 3.0)?;
    let pooled = pooled_on_tape(g, &out)?;
    let head = g.constant(random_matrix(8, 1, 99));
    let score = g.matmul(pooled, head)?;
    let s = g.sum(score);
    g.weighted_sum(&[(mlm, 1.0), (s, 0.5)])
}

fn loss_value(params: &ParameterSet, batch: &[EncodedSequence]) -> f64 {
    let mut g = Graph::frozen(params);
    let loss = model_loss(&mut g, batch).expect("forward pass");
    g.scalar(loss)
}

fn gradient_correctness() -> Outcome {
    const H: f64 = 1e-3;
    // Below this magnitude the relative error is taken against the floor.
    const FLOOR: f64 = 1e-6;
    let timer = Instant::now();
    let mut params = build_model(&tiny_config(true), 5).map_err(|e| e.to_string())?;
    // Scale up the small init so the nonlinearities are exercised.
    for (_, t) in params.iter_mut() {
        t.mapv_inplace(|x| x * 10.0);
    }
    let batch = vec![
        sequence(&[2, 10, 11, 12, 3], &[0, 0, 0, 1, 1], 6),
        sequence(&[2, 20, 21, 3], &[0, 0, 0, 0], 6),
    ];
    let (_, grads) = gradients(&params, Mode::Eval, |g| model_loss(g, &batch)).map_err(|e| e.to_string())?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let (mut checked, mut worst, mut worst_at) = (0usize, 0.0f64, String::new());
    for name in &names {
        let len = params.get(name).expect("listed").len();
        for idx in 0..len {
            let analytic = grads.get(name).expect("same names").as_slice().expect("contiguous")[idx];
            let at = |offset: f64| {
                let mut shifted = params.clone();
                shifted
                    .get_mut(name)
                    .expect("listed")
                    .as_slice_mut()
                    .expect("contiguous")[idx] += offset;
                loss_value(&shifted, &batch)
            };
            // Fourth-order central difference: truncation error O(h^4).
            let numeric = (8.0 * (at(H) - at(-H)) - (at(2.0 * H) - at(-2.0 * H))) / (12.0 * H);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{idx}] ({analytic:.3e} vs {numeric:.3e})");
            }
            checked += 1;
        }
    }
    let elapsed = timer.elapsed();
    let mut failures = Vec::new();
    check(&mut failures, worst < 1e-4, || {
        format!("relative error {worst:.2e} at {worst_at}")
    });
    check(&mut failures, elapsed < Duration::from_secs(60), || {
        format!("took {}", secs(elapsed))
    });
    verdict(
        failures,
        format!(
            "{checked} scalars in {} tensors, max relative error {worst:.2e} at {worst_at}, {}",
            names.len(),
            secs(elapsed)
        ),
    )
}

fn sharing_semantics() -> Outcome {
    let shared = build_model(&tiny_config(true), 8).map_err(|e| e.to_string())?;
    let mut unshared = build_model(&tiny_config(false), 8).map_err(|e| e.to_string())?;
    for (name, value) in shared.iter() {
        if let Some(rest) = name.strip_prefix("layer.0.") {
            *unshared.get_mut(&format!("layer.1.{rest}")).expect("unshared layer") = value.clone();
        }
        *unshared.get_mut(name).expect("same name") = value.clone();
    }
    let batch = vec![
        sequence(&[2, 10, 11, 3], &[0, 0, 1, 1], 4),
        sequence(&[2, 30, 31, 3], &[0, 0, 0, 0], 4),
    ];
    let (ls, gs) = gradients(&shared, Mode::Eval, |g| model_loss(g, &batch)).map_err(|e| e.to_string())?;
    let (lu, gu) = gradients(&unshared, Mode::Eval, |g| model_loss(g, &batch)).map_err(|e| e.to_string())?;
    let mut failures = Vec::new();
    check(&mut failures, (ls - lu).abs() < 1e-12, || {
        format!("losses {ls} vs {lu}")
    });
    let mut worst: f64 = 0.0;
    for (name, grad) in gs.iter() {
        let expected = match name.strip_prefix("layer.0.") {
            Some(rest) => gu.get(name).expect("layer 0") + gu.get(&format!("layer.1.{rest}")).expect("layer 1"),
            None => gu.get(name).expect("same name").clone(),
        };
        worst = worst.max((grad - &expected).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    check(&mut failures, worst <= 1e-10, || format!("gradient gap {worst:.2e}"));
    let counts: Vec<u64> = [1, 2, 6, 12, 24]
        .iter()
        .map(|&layers| {
            count_parameters(&EncoderConfig {
                num_layers: layers,
                ..tiny_config(true)
            })
        })
        .collect();
    check(&mut failures, counts.windows(2).all(|w| w[0] == w[1]), || {
        format!("shared counts vary with depth: {counts:?}")
    });
    let deep = build_model(
        &EncoderConfig {
            num_layers: 24,
            ..tiny_config(true)
        },
        0,
    )
    .map_err(|e| e.to_string())?;
    check(&mut failures, deep.num_scalars() == counts[0], || {
        format!("24 shared layers allocate {}", deep.num_scalars())
    });
    for preset in [ModelPreset::AlbetoBase, ModelPreset::AlbetoXxlarge] {
        let c = preset.config();
        let other = count_parameters(&EncoderConfig {
            num_layers: 1,
            ..c.clone()
        });
        check(&mut failures, other == count_parameters(&c), || {
            format!("{} depends on depth", preset.name())
        });
    }
    verdict(
        failures,
        format!("max gradient gap {worst:.2e}, count {} for L in 1..24", counts[0]),
    )
}

fn optimizer_config() -> EncoderConfig {
    EncoderConfig {
        intermediate: 16,
        vocab_size: 20,
        ..tiny_config(true)
    }
}

fn with_scalar(w: f64) -> ParameterSet {
    let mut params = build_model(&optimizer_config(), 0).expect("valid config");
    params
        .insert_head("head.scalar", Tensor::from_elem(IxDyn(&[1]), w))
        .expect("new name");
    params
}

/// Bias-corrected Adam with decoupled decay, elementwise.
fn reference_adam(
    w: &mut [f64],
    (m, v): (&mut [f64], &mut [f64]),
    g: &[f64],
    t: i32,
    lr: f64,
    decay: f64,
    s: OptimizerSettings,
) {
    for i in 0..w.len() {
        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
        let m_hat = m[i] / (1.0 - s.beta1.powi(t));
        let v_hat = v[i] / (1.0 - s.beta2.powi(t));
        w[i] -= lr * (m_hat / (v_hat.sqrt() + s.epsilon) + decay * w[i]);
    }
}

fn optimizer_fidelity() -> Outcome {
    let mut failures = Vec::new();

    let mut params = with_scalar(0.5);
    let settings = OptimizerSettings {
        weight_decay: 0.01,
        ..OptimizerSettings::adamw()
    };
    let mut state = OptimizerState::new(&params, settings);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut expected: Vec<Vec<f64>> = names
        .iter()
        .map(|n| params.get(n).expect("listed").iter().copied().collect())
        .collect();
    let mut m: Vec<Vec<f64>> = expected.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut v = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for step in 1..=5 {
        let mut grads = GradientSet::zeros_like(&params);
        for name in &names {
            grads
                .get_mut(name)
                .expect("listed")
                .mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        let lr = 1e-3 * step as f64;
        let stats = lamb_step(&mut params, &grads, &mut state, lr).map_err(|e| e.to_string())?;
        check(&mut failures, stats.trust_ratios.values().all(|&r| r == 1.0), || {
            format!("trust ratio not 1 at step {step}")
        });
        for (k, name) in names.iter().enumerate() {
            let g: Vec<f64> = grads.get(name).expect("listed").iter().copied().collect();
            let decay = if is_unadapted(name) { 0.0 } else { settings.weight_decay };
            reference_adam(&mut expected[k], (&mut m[k], &mut v[k]), &g, step, lr, decay, settings);
        }
    }
    let mut worst: f64 = 0.0;
    for (k, name) in names.iter().enumerate() {
        for (a, b) in params.get(name).expect("listed").iter().zip(&expected[k]) {
            worst = worst.max((a - b).abs());
        }
    }
    check(&mut failures, worst <= 1e-12, || format!("Adam gap {worst:.2e}"));

    let mut params = with_scalar(1.0);
    let mut grads = GradientSet::zeros_like(&params);
    grads.get_mut("head.scalar").expect("inserted")[[0]] = 0.1;
    let lamb = OptimizerSettings {
        weight_decay: 0.0,
        ..OptimizerSettings::lamb()
    };
    let mut state = OptimizerState::new(&params, lamb);
    lamb_step(&mut params, &grads, &mut state, 0.1).map_err(|e| e.to_string())?;
    let w = params.get("head.scalar").expect("inserted")[[0]];
    check(&mut failures, (w - 0.9).abs() < 1e-5, || {
        format!("scalar example gives {w}")
    });

    let mut peaks = Vec::new();
    for name in schedule_names() {
        let s: TrainingSchedule = pretraining_schedule(name).map_err(|e| e.to_string())?;
        let at = |step| lr_at(step, &s).expect("within schedule");
        let peak = at(s.warmup_steps);
        check(&mut failures, peak == s.peak_lr, || {
            format!("{name}: lr at warmup {peak} vs {}", s.peak_lr)
        });
        check(
            &mut failures,
            at(s.warmup_steps - 1) < peak && at(s.warmup_steps + 1) < peak,
            || format!("{name}: warmup step is not the maximum"),
        );
        peaks.push(format!("{name} {}@{}", s.peak_lr, s.warmup_steps));
    }
    verdict(
        failures,
        format!("Adam gap {worst:.1e}, scalar w = {w:.6}, peaks {}", peaks.join(", ")),
    )
}

/// KL(softmax(t / T) ‖ softmax(s / T)) summed over rows, from first principles.
fn brute_force_kl(teacher: &Array2<f64>, student: &Array2<f64>, temperature: f64) -> f64 {
    let softmax = |z: Vec<f64>| {
        let e: Vec<f64> = z.iter().map(|x| (x / temperature).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for (t, s) in teacher.rows().into_iter().zip(student.rows()) {
        let (p, q) = (softmax(t.to_vec()), softmax(s.to_vec()));
        total += p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>();
    }
    total
}

fn distill_teacher_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 16,
        embedding: 16,
        heads: 2,
        intermediate: 32,
        vocab_size: 200,
        max_positions: 32,
        share_layers: false,
        use_token_type: true,
        use_pooler: true,
        dropout: 0.1,
    }
}

fn distillation_identities() -> Outcome {
    let mut failures = Vec::new();
    let soft_only = DistillationRecipe {
        temperature: 2.0,
        alpha_soft: 1.0,
        alpha_mlm: 0.0,
        alpha_cos: 0.0,
        layer_map: vec![0],
    };
    let logits = random_matrix(6, 11, 1).mapv(|x| 8.0 * x);
    let hidden = random_matrix(9, 16, 2).mapv(|x| 3.0 * x);
    let same = distill_loss(
        &logits,
        &logits,
        &[0; 6],
        &hidden,
        &hidden,
        &DistillationRecipe::default(),
    )
    .map_err(|e| e.to_string())?;
    check(&mut failures, same.soft == 0.0, || {
        format!("soft term {} at equal logits", same.soft)
    });
    check(&mut failures, same.cos == 0.0, || {
        format!("cosine term {} at aligned states", same.cos)
    });

    let teacher = random_matrix(5, 7, 3).mapv(|x| 4.0 * x);
    let student = random_matrix(5, 7, 4).mapv(|x| 4.0 * x);
    let zeros = Array2::zeros((1, 3));
    let mut worst: f64 = 0.0;
    for t in [1.0, 2.0, 3.5] {
        let recipe = DistillationRecipe {
            temperature: t,
            ..soft_only.clone()
        };
        let loss =
            distill_loss(&student, &teacher, &[0, 1, 2, 3, 4], &zeros, &zeros, &recipe).map_err(|e| e.to_string())?;
        let oracle = t * t * brute_force_kl(&teacher, &student, t) / 5.0;
        worst = worst.max((loss.soft - oracle).abs());
    }
    check(&mut failures, worst < 1e-9, || format!("KL gap {worst:.2e}"));

    let vocab = train_vocabulary(CORPUS.lines(), 200).map_err(|e| e.to_string())?;
    let corpus = PretrainCorpus::from_text(CORPUS, &vocab, 32, false).map_err(|e| e.to_string())?;
    let tc = distill_teacher_config();
    let teacher = build_model(&tc, 1).map_err(|e| e.to_string())?;
    let student_config = EncoderConfig {
        num_layers: 1,
        use_token_type: false,
        use_pooler: false,
        ..tc
    };
    let student = init_student(&teacher, &student_config, &[1]).map_err(|e| e.to_string())?;
    let before = teacher.clone();
    let schedule = TrainingSchedule {
        peak_lr: 1e-3,
        batch_size: 8,
        warmup_ratio: 0.2,
        warmup_steps: 2,
        total_steps: 10,
    };
    let recipe = DistillationRecipe {
        layer_map: vec![1],
        ..DistillationRecipe::default()
    };
    let out = distill(
        &teacher,
        Checkpoint::new(student.clone()),
        &corpus,
        &recipe,
        &DistillOptions::new(schedule, 4),
        None,
    )
    .map_err(|e| e.to_string())?;
    check(&mut failures, teacher == before, || {
        "teacher changed during distillation".into()
    });
    check(&mut failures, out.params != student, || "student did not move".into());
    verdict(
        failures,
        format!("soft 0, cosine 0, KL gap {worst:.1e}, teacher unchanged after 10 steps"),
    )
}

const TAGS: [&str; 5] = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"];

/// Entities by enumerating every (start, end, type): an entity opens at B-X,
/// or at I-X not preceded by a tag of type X, and runs over the following I-X.
fn brute_force_spans(tags: &[&str]) -> Vec<(usize, usize, &'static str)> {
    let kind = |t: &str| t.split_once('-').map(|(_, k)| k.to_string());
    let mut out = Vec::new();
    for x in ["PER", "LOC"] {
        let (b, i_tag) = (format!("B-{x}"), format!("I-{x}"));
        for start in 0..tags.len() {
            let opens =
                tags[start] == b || tags[start] == i_tag && (start == 0 || kind(tags[start - 1]).as_deref() != Some(x));
            if !opens {
                continue;
            }
            for end in start + 1..=tags.len() {
                let inner = (start + 1..end).all(|k| tags[k] == i_tag);
                let closed = end == tags.len() || tags[end] != i_tag;
                if inner && closed {
                    out.push((start, end, x));
                }
            }
        }
    }
    out
}

fn brute_force_f1(pred: &[&str], gold: &[&str]) -> f64 {
    let (ps, gs) = (brute_force_spans(pred), brute_force_spans(gold));
    if ps.is_empty() && gs.is_empty() {
        return 1.0;
    }
    let correct = ps.iter().filter(|s| gs.contains(s)).count() as f64;
    let p = if ps.is_empty() { 0.0 } else { correct / ps.len() as f64 };
    let r = if gs.is_empty() { 0.0 } else { correct / gs.len() as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// First maximum of start + end over valid pairs in scan order.
fn brute_force_span(start: &[f64], end: &[f64], valid: &[bool], max_len: usize) -> Option<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..start.len() {
        for j in i..end.len() {
            if valid[i] && valid[j] && j - i < max_len && best.is_none_or(|b| start[i] + end[j] > b.0) {
                best = Some((start[i] + end[j], i, j));
            }
        }
    }
    best.map(|(_, i, j)| (i, j))
}

fn metric_oracles() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..500 {
        let gold: Vec<&str> = (0..10).map(|_| TAGS[rng.random_range(0..TAGS.len())]).collect();
        let pred: Vec<&str> = (0..10).map(|_| TAGS[rng.random_range(0..TAGS.len())]).collect();
        let f1 = entity_f1(&pred, &gold).map_err(|e| e.to_string())?.f1;
        if f1 != brute_force_f1(&pred, &gold) {
            mismatches += 1;
        }
    }
    check(&mut failures, mismatches == 0, || {
        format!("{mismatches}/500 BIO sequences disagree")
    });

    let context = "abcdefghijklmnopqrstuvwxyz";
    let mut span_mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        // Integer logits force ties.
        let start: Vec<f64> = (0..n).map(|_| rng.random_range(-3..3) as f64).collect();
        let end: Vec<f64> = (0..n).map(|_| rng.random_range(-3..3) as f64).collect();
        let offsets: Vec<Option<(usize, usize)>> = (0..n).map(|p| rng.random_bool(0.8).then_some((p, p + 1))).collect();
        let valid: Vec<bool> = offsets.iter().map(Option::is_some).collect();
        let max_len = rng.random_range(1..6);
        let got = extract_answer_span(&start, &end, context, &offsets, max_len);
        let agrees = match brute_force_span(&start, &end, &valid, max_len) {
            None => !got.found,
            Some((i, j)) => got.found && got.tokens == (i, j) && got.text == context[i..=j],
        };
        if !agrees {
            span_mismatches += 1;
        }
    }
    check(&mut failures, span_mismatches == 0, || {
        format!("{span_mismatches}/1000 span instances disagree")
    });

    let cases: [(&str, &[&str], f64, f64); 6] = [
        ("gato negro", &["gato negro"], 1.0, 1.0),
        ("el gato negro", &["gato negro"], 1.0, 1.0),
        ("gato", &["gato negro"], 0.0, 2.0 / 3.0),
        ("  Los  Gatos, ", &["gatos"], 1.0, 1.0),
        ("perro", &["gato", "perro"], 1.0, 1.0),
        ("un perro grande", &["perro pequeño"], 0.0, 0.5),
    ];
    for (pred, golds, em, f1) in cases {
        let got = (
            qa_em(pred, golds).map_err(|e| e.to_string())?,
            qa_f1(pred, golds).map_err(|e| e.to_string())?,
        );
        check(&mut failures, got == (em, f1), || {
            format!("{pred:?}: (em, f1) {got:?} vs ({em}, {f1})")
        });
    }
    verdict(
        failures,
        "500 BIO sequences, 1000 span instances and 6 QA examples agree exactly".into(),
    )
}

fn mlm_smoke() -> Result<(f64, Duration), String> {
    let timer = Instant::now();
    let vocab = train_vocabulary(CORPUS.lines(), 200).map_err(|e| e.to_string())?;
    let corpus = PretrainCorpus::from_text(CORPUS, &vocab, 32, false).map_err(|e| e.to_string())?;
    let config = EncoderConfig {
        num_layers: 2,
        hidden: 64,
        embedding: 64,
        heads: 4,
        intermediate: 256,
        vocab_size: 200,
        max_positions: 32,
        share_layers: true,
        use_token_type: true,
        use_pooler: true,
        dropout: 0.0,
    };
    let schedule = TrainingSchedule {
        peak_lr: 0.04,
        batch_size: 128,
        warmup_ratio: 0.0,
        warmup_steps: 0,
        total_steps: 300,
    };
    let params = build_model(&config, 3).map_err(|e| e.to_string())?;
    let out = pretrain(
        Checkpoint::new(params),
        &corpus,
        &PretrainOptions::new(schedule, 5),
        None,
    )
    .map_err(|e| e.to_string())?;
    let tail = &out.trace[out.trace.len() - 10..];
    let loss = tail.iter().map(|r| r.mlm_loss).sum::<f64>() / tail.len() as f64;
    Ok((loss, timer.elapsed()))
}

const POSITIVE: [&str; 6] = ["sol", "playa", "verano", "calor", "arena", "mar"];
const NEGATIVE: [&str; 6] = ["nieve", "frio", "hielo", "invierno", "viento", "lluvia"];

fn separable(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (words, label) = if i % 2 == 0 {
                (&POSITIVE, "calido")
            } else {
                (&NEGATIVE, "frio")
            };
            let text: Vec<&str> = (0..4).map(|_| words[rng.random_range(0..words.len())]).collect();
            Example::Text {
                text: text.join(" "),
                label: label.into(),
            }
        })
        .collect()
}

fn separable_fine_tune() -> Result<(Vec<f64>, Duration), String> {
    let timer = Instant::now();
    let words: Vec<&str> = POSITIVE.iter().chain(&NEGATIVE).copied().collect();
    let vocab: SubwordVocabulary = train_vocabulary(
        [words.join(" "), "donde esta el rio ebro nace en cantabria".to_string()].iter(),
        80,
    )
    .map_err(|e| e.to_string())?;
    let data = TaskDataset::from_splits(
        "synthetic",
        TaskKind::SequenceClassification,
        separable(256, 1),
        separable(16, 2),
        separable(16, 3),
    )
    .map_err(|e| e.to_string())?;
    let config = EncoderConfig {
        num_layers: 2,
        hidden: 32,
        embedding: 16,
        heads: 2,
        intermediate: 64,
        vocab_size: vocab.len(),
        max_positions: 32,
        share_layers: true,
        use_token_type: true,
        use_pooler: true,
        dropout: 0.0,
    };
    let start =
        attach_head(&build_model(&config, 5).map_err(|e| e.to_string())?, &data.task, 9).map_err(|e| e.to_string())?;
    let mut run = FineTuneConfig::new(
        Cell {
            batch_size: 16,
            learning_rate: 3e-3,
            epochs: 3,
        },
        17,
    );
    run.max_len = 32;
    run.evaluate_test = false;
    let result = fine_tune(&start, &data, &vocab, &run).map_err(|e| e.to_string())?;
    Ok((result.dev_history, timer.elapsed()))
}

fn smoke_training() -> Outcome {
    let mut failures = Vec::new();
    let (loss, mlm_time) = mlm_smoke()?;
    check(&mut failures, loss < 0.1, || {
        format!("masked-LM loss {loss:.4} after 300 steps")
    });
    let (history, ft_time) = separable_fine_tune()?;
    check(&mut failures, history.contains(&1.0), || {
        format!("dev accuracy by epoch {history:?}")
    });
    let total = mlm_time + ft_time;
    check(&mut failures, total < Duration::from_secs(600), || {
        format!("took {}", secs(total))
    });
    verdict(
        failures,
        format!(
            "masked-LM loss {loss:.4} over the last 10 of 300 steps ({}), dev accuracy by epoch {history:?} ({})",
            secs(mlm_time),
            secs(ft_time)
        ),
    )
}

fn grid_protocol() -> Outcome {
    let mut failures = Vec::new();
    let grid = HyperGrid::standard();
    let cells = grid.cells();
    let mut unique: Vec<String> = cells.iter().map(|c| format!("{c:?}")).collect();
    unique.sort();
    unique.dedup();
    check(&mut failures, cells.len() == 36 && unique.len() == 36, || {
        format!("{} cells, {} distinct", cells.len(), unique.len())
    });
    let reduced = grid.clone().with_variant(LrVariant::Reduced);
    check(
        &mut failures,
        reduced.learning_rates == REDUCED_LEARNING_RATES
            && reduced.batch_sizes == grid.batch_sizes
            && reduced.epoch_counts == grid.epoch_counts
            && reduced.cells().len() == 36,
        || format!("reduced grid {reduced:?}"),
    );
    check(
        &mut failures,
        ligero::presets::grid(LrVariant::Reduced).ok() == Some(reduced),
        || "reduced grid file differs".into(),
    );
    // The planted optimum spans two learning rates and three epoch counts, so
    // the winner is fixed by tie-breaking: smaller learning rate, then
    // smaller batch, then fewer epochs. One row of cells diverges.
    let result = grid_search_with(
        &grid,
        4,
        |cell, _seed| {
            if cell.batch_size == 64 && cell.epochs == 4 {
                return Err(Error::NonFinite("diverged".into()));
            }
            Ok(if cell.batch_size == 32 && cell.learning_rate >= 3e-5 {
                0.9
            } else {
                0.5
            })
        },
        |m| *m,
    )
    .map_err(|e| e.to_string())?;
    let best = result.outcomes[result.best_index].cell;
    let winner = (best.batch_size, best.learning_rate, best.epochs);
    check(&mut failures, winner == (32, 3e-5, 2) && result.best == 0.9, || {
        format!("picked {winner:?}")
    });
    let failed = result
        .outcomes
        .iter()
        .filter(|o| matches!(o.status, CellStatus::Failed(_)))
        .count();
    check(&mut failures, failed == 4, || format!("{failed} failed cells recorded"));
    verdict(
        failures,
        format!(
            "36 cells, reduced rates {REDUCED_LEARNING_RATES:?}, rigged winner {winner:?}, {failed} failed cells kept"
        ),
    )
}

fn run(number: usize, name: &str, criterion: fn() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|panic| {
        let message = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {message}"))
    });
    match &outcome {
        Ok(detail) => println!("criterion {number:>2} PASS  {name}: {detail}"),
        Err(detail) => println!("criterion {number:>2} FAIL  {name}: {detail}"),
    }
    outcome.is_ok()
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("parameter accounting", parameter_accounting),
        ("aggregation reproduction", aggregation_reproduction),
        ("gradient correctness", gradient_correctness),
        ("sharing semantics", sharing_semantics),
        ("optimizer fidelity", optimizer_fidelity),
        ("distillation identities", distillation_identities),
        ("metric oracles", metric_oracles),
        ("smoke training", smoke_training),
        ("grid protocol", grid_protocol),
    ];
    let mut failed = Vec::new();
    for (i, (name, criterion)) in criteria.into_iter().enumerate() {
        if !run(i + 1, name, criterion) {
            failed.push(i + 1);
        }
    }
    println!(
        "criterion 10 EXCLUDED  absolute task scores: they need full-corpus pretraining; criterion 2 covers their arithmetic"
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
