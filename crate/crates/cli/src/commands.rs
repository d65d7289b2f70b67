use std::fs;
use std::path::{Path, PathBuf};

use ligero::checkpoint::{self, Checkpoint};
use ligero::data::{DataFormat, Example, OnError, TaskDataset, TsvColumns};
use ligero::distill::{distill as run_distill, init_student, DistillOptions, DistillationRecipe};
use ligero::encoder::{build_model, count_parameters, EncoderConfig, ParameterSet};
use ligero::finetune::{
    attach_head, evaluate as run_evaluate, fine_tune, grid_search as run_grid, render_grid_ledger, Cell,
    FineTuneConfig, HyperGrid, LrVariant, Metrics, TaskSpec,
};
use ligero::harness::{build_report, path_digest, RunDir, RunManifest};
use ligero::kv::KvDocument;
use ligero::metrics::{render_parameters, EvaluationReport, ModelScores};
use ligero::presets;
use ligero::pretrain::{pretrain as run_pretrain, PretrainCorpus, PretrainOptions};
use ligero::schedule::TrainingSchedule;
use ligero::tokenizer::{train_vocabulary, SubwordVocabulary};
use ligero::{Error, Result};

use crate::{
    CountParamsArgs, DistillArgs, EvaluateArgs, FinetuneArgs, Format, GridSearchArgs, LrVariantArg, ModelArgs,
    PretrainArgs, ReportArgs, SplitArg, TaskArgs, TrainVocabArgs,
};

pub const VOCAB_FILE: &str = "vocab.txt";
const METRICS_FILE: &str = "metrics.txt";

fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_kv(path: &Path, what: &str) -> Result<KvDocument> {
    require_path(path, what)?;
    KvDocument::load(path)
}

/// Configuration from `--config`, else `--preset`, else the default preset.
fn model_config(args: &ModelArgs, default: &str) -> Result<(EncoderConfig, String)> {
    if let Some(path) = &args.config {
        let config = EncoderConfig::from_kv(&load_kv(path, "model config")?)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("custom")
            .to_string();
        return Ok((config, name));
    }
    let name = args.preset.clone().unwrap_or_else(|| default.to_string());
    Ok((presets::model_config(&name)?, name))
}

fn load_vocab(path: &Path) -> Result<SubwordVocabulary> {
    require_path(path, "vocabulary")?;
    SubwordVocabulary::load(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_path(path, "checkpoint")?;
    checkpoint::load(path)
}

fn check_inputs(config: &EncoderConfig, vocab: &SubwordVocabulary, max_len: usize) -> Result<()> {
    if vocab.len() != config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} pieces but the model expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    if max_len > config.max_positions {
        return Err(Error::InvalidArgument(format!(
            "--max-len {max_len} exceeds the model's {} positions",
            config.max_positions
        )));
    }
    Ok(())
}

fn open_run(out: &Path, manifest: &RunManifest) -> Result<RunDir> {
    let run = RunDir::create(out, manifest)?;
    run.record_time(&format!("{} start", manifest.command))?;
    log::info!("run directory {}", run.path().display());
    Ok(run)
}

/// On resume the trace file starts over, so keep the rows already written up
/// to the resumed step and splice them back in front of the new rows.
fn kept_trace_rows(path: &Path, up_to: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split('\t')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= up_to)
        })
        .map(str::to_string)
        .collect()
}

fn splice_trace(path: &Path, kept: &[String]) -> Result<()> {
    if kept.is_empty() {
        return Ok(());
    }
    let text = read(path)?;
    let mut lines = text.lines();
    let mut out = String::new();
    if let Some(header) = lines.next() {
        out.push_str(header);
        out.push('\n');
    }
    for l in kept.iter().map(String::as_str).chain(lines) {
        out.push_str(l);
        out.push('\n');
    }
    write(path, &out)
}

/// Loads the newest `step-N` checkpoint of the run, if any.
fn resume_point(run: &RunDir) -> Result<Option<(Checkpoint, u64)>> {
    let Some(path) = run.latest_checkpoint()? else {
        return Ok(None);
    };
    let ckpt = checkpoint::load(&path)?;
    let step = ckpt.metadata.optional("step", 0)?;
    log::info!("resuming from {} at step {step}", path.display());
    Ok(Some((ckpt, step)))
}

pub fn train_vocab(a: TrainVocabArgs) -> Result<()> {
    require_path(&a.data, "corpus")?;
    let manifest = RunManifest::new("train-vocab", a.run.seed)
        .with_path_digest("data", &a.data)?
        .with_input("size", a.size);
    let run = open_run(&a.run.out, &manifest)?;
    let text = read(&a.data)?;
    let vocab = train_vocabulary(text.lines().filter(|l| !l.trim().is_empty()), a.size)?;
    let path = run.checkpoints().join(VOCAB_FILE);
    vocab.save(&path)?;
    run.record_time("train-vocab end")?;
    println!("{}", path.display());
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let (config, name) = model_config(&a.model, "albeto-tiny")?;
    let vocab = load_vocab(&a.vocab)?;
    check_inputs(&config, &vocab, a.max_len)?;
    require_path(&a.data, "corpus")?;
    let mut schedule = match &a.schedule {
        Some(path) => TrainingSchedule::from_kv(&load_kv(path, "schedule")?)?,
        None => presets::pretraining_schedule(&name)
            .map_err(|_| Error::InvalidArgument(format!("no built-in schedule for {name}; pass --schedule")))?,
    };
    if let Some(steps) = a.steps {
        schedule.total_steps = steps;
        schedule.warmup_steps = (schedule.warmup_ratio * steps as f64).round() as u64;
    }
    if let Some(batch) = a.batch_size {
        schedule.batch_size = batch;
    }
    if let Some(lr) = a.lr {
        schedule.peak_lr = lr;
    }
    schedule.validate()?;

    let manifest = RunManifest::new("pretrain", a.run.seed)
        .with_preset(&name)
        .with_input("model", config.to_kv().render())
        .with_input("schedule", schedule.to_kv().render())
        .with_path_digest("data", &a.data)?
        .with_path_digest("vocab", &a.vocab)?
        .with_input("max_len", a.max_len)
        .with_input("sop", !a.no_sop)
        .with_input("checkpoint_every", a.checkpoint_every);
    let run = open_run(&a.run.out, &manifest)?;
    let (start, resumed) = match resume_point(&run)? {
        Some((ckpt, step)) => (ckpt, step),
        None => (Checkpoint::new(build_model(&config, a.run.seed)?), 0),
    };
    if resumed >= schedule.total_steps {
        println!("already complete at step {resumed}");
        return Ok(());
    }
    let trace_path = run.traces().join("pretrain.tsv");
    let kept = kept_trace_rows(&trace_path, resumed);
    let corpus = PretrainCorpus::load(&a.data, &vocab, a.max_len, !a.no_sop)?;
    let mut options = PretrainOptions::new(schedule, a.run.seed);
    options.checkpoint_every = a.checkpoint_every;
    let outcome = run_pretrain(start, &corpus, &options, Some(run.path()))?;
    splice_trace(&trace_path, &kept)?;
    run.record_time("pretrain end")?;
    if let Some(last) = outcome.trace.last() {
        println!("step {}\tmlm loss {}", last.step, last.mlm_loss);
    }
    for path in &outcome.checkpoints {
        println!("{}", path.display());
    }
    Ok(())
}

pub fn distill(a: DistillArgs) -> Result<()> {
    let teacher = load_checkpoint(&a.teacher)?.params;
    let (student, name) = model_config(&a.model, "distilbeto")?;
    let recipe = match &a.recipe {
        Some(path) => DistillationRecipe::from_kv(&load_kv(path, "recipe")?)?,
        None => presets::distil_recipe()?,
    };
    recipe.validate(Some(teacher.config().num_layers))?;
    let vocab = load_vocab(&a.vocab)?;
    check_inputs(&student, &vocab, a.max_len)?;
    require_path(&a.data, "corpus")?;
    let total_steps = match a.steps {
        Some(steps) => steps,
        None => presets::distil_total_steps()?,
    };
    let schedule = TrainingSchedule {
        peak_lr: a.lr,
        batch_size: a.batch_size,
        warmup_ratio: a.warmup_ratio,
        warmup_steps: (a.warmup_ratio * total_steps as f64).round() as u64,
        total_steps,
    };
    schedule.validate()?;

    let manifest = RunManifest::new("distill", a.run.seed)
        .with_preset(&name)
        .with_path_digest("teacher", &a.teacher)?
        .with_input("student", student.to_kv().render())
        .with_input("recipe", recipe.to_kv().render())
        .with_input("schedule", schedule.to_kv().render())
        .with_path_digest("data", &a.data)?
        .with_path_digest("vocab", &a.vocab)?
        .with_input("max_len", a.max_len)
        .with_input("checkpoint_every", a.checkpoint_every);
    let run = open_run(&a.run.out, &manifest)?;
    let (start, resumed) = match resume_point(&run)? {
        Some((ckpt, step)) => (ckpt, step),
        None => (Checkpoint::new(init_student(&teacher, &student, &recipe.layer_map)?), 0),
    };
    if resumed >= schedule.total_steps {
        println!("already complete at step {resumed}");
        return Ok(());
    }
    let trace_path = run.traces().join("distill.tsv");
    let kept = kept_trace_rows(&trace_path, resumed);
    let corpus = PretrainCorpus::load(&a.data, &vocab, a.max_len, false)?;
    let mut options = DistillOptions::new(schedule, a.run.seed);
    options.checkpoint_every = a.checkpoint_every;
    let outcome = run_distill(&teacher, start, &corpus, &recipe, &options, Some(run.path()))?;
    splice_trace(&trace_path, &kept)?;
    run.record_time("distill end")?;
    if let Some(last) = outcome.trace.last() {
        println!("step {}\tloss {}", last.step, last.loss.total);
    }
    for path in &outcome.checkpoints {
        println!("{}", path.display());
    }
    Ok(())
}

fn data_format(args: &TaskArgs) -> Result<DataFormat> {
    let format = match args.format {
        Some(f) => f,
        None => {
            let candidates = [
                ("txt", Format::Conll2002),
                ("conllu", Format::Conllu),
                ("json", Format::Squad),
                ("tsv", Format::Tsv),
            ];
            candidates
                .iter()
                .find(|(ext, _)| args.data.join(format!("train.{ext}")).exists())
                .map(|(_, f)| *f)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no train file found in {}; pass --format", args.data.display()))
                })?
        }
    };
    Ok(match format {
        Format::Conll2002 => DataFormat::Conll2002,
        Format::Conllu => DataFormat::ConlluPos,
        Format::Squad => DataFormat::SquadJson,
        Format::Tsv => DataFormat::Tsv(TsvColumns {
            label: args.label_column,
            text: args.text_column,
            text_b: args.text_b_column,
            delimiter: args.delimiter,
            has_header: args.header,
        }),
    })
}

fn task_name(args: &TaskArgs) -> String {
    args.task.clone().unwrap_or_else(|| {
        args.data
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("task")
            .to_string()
    })
}

/// Settings shared by the task commands, as manifest inputs.
fn task_manifest(
    manifest: RunManifest,
    args: &TaskArgs,
    format: &DataFormat,
    checkpoint: &Path,
) -> Result<RunManifest> {
    Ok(manifest
        .with_path_digest("checkpoint", checkpoint)?
        .with_path_digest("data", &args.data)?
        .with_path_digest("vocab", &args.vocab)?
        .with_input("format", format!("{format:?}"))
        .with_input("task", task_name(args))
        .with_input("model_name", &args.model_name)
        .with_input("max_len", args.max_len)
        .with_input("max_answer_tokens", args.max_answer_tokens))
}

fn load_task(args: &TaskArgs, format: &DataFormat) -> Result<TaskDataset> {
    require_path(&args.data, "data directory")?;
    TaskDataset::load_dir(&task_name(args), &args.data, format)
}

fn render_metrics(metrics: &Metrics) -> String {
    let mut doc = KvDocument::new();
    for (k, v) in metrics {
        doc.set(k, v);
    }
    doc.render()
}

/// Writes the score file for `metrics` and prints it.
fn write_scores(run: &RunDir, args: &TaskArgs, params: &ParameterSet, metrics: &Metrics) -> Result<()> {
    let scores = ModelScores::from_metrics(
        &args.model_name,
        params.num_encoder_scalars(),
        &task_name(args),
        metrics,
    );
    let text = scores.to_kv().render();
    let path = run.write_report(METRICS_FILE, &text)?;
    print!("{text}");
    println!("{}", path.display());
    Ok(())
}

fn save_finetuned(run: &RunDir, name: &str, params: &ParameterSet, task: &TaskSpec, cell: &Cell) -> Result<PathBuf> {
    let mut ckpt = Checkpoint::new(params.clone());
    task.write_metadata(&mut ckpt.metadata);
    ckpt.metadata.set("batch_size", cell.batch_size);
    ckpt.metadata.set("learning_rate", cell.learning_rate);
    ckpt.metadata.set("epochs", cell.epochs);
    let path = run.checkpoints().join(name);
    checkpoint::save(&path, &ckpt)?;
    Ok(path)
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let format = data_format(&a.task)?;
    let cell = Cell {
        batch_size: a.batch_size,
        learning_rate: a.lr,
        epochs: a.epochs,
    };
    let manifest = task_manifest(
        RunManifest::new("finetune", a.run.seed),
        &a.task,
        &format,
        &a.checkpoint,
    )?
    .with_input("batch_size", cell.batch_size)
    .with_input("learning_rate", cell.learning_rate)
    .with_input("epochs", cell.epochs)
    .with_input("accumulation", a.accumulation);
    let dataset = load_task(&a.task, &format)?;
    let base = load_checkpoint(&a.checkpoint)?.params;
    let vocab = load_vocab(&a.task.vocab)?;
    check_inputs(base.config(), &vocab, a.task.max_len)?;
    let run = open_run(&a.run.out, &manifest)?;

    let model = attach_head(&base, &dataset.task, a.run.seed)?;
    let config = FineTuneConfig {
        accumulation_steps: a.accumulation,
        max_len: a.task.max_len,
        max_answer_tokens: a.task.max_answer_tokens,
        ..FineTuneConfig::new(cell, a.run.seed)
    };
    let result = fine_tune(&model, &dataset, &vocab, &config)?;
    let mut history = String::from("epoch\tdev_metric\n");
    for (i, v) in result.dev_history.iter().enumerate() {
        history.push_str(&format!("{}\t{v}\n", i + 1));
    }
    run.write_report("dev_history.tsv", &history)?;
    run.write_report("dev_metrics.txt", &render_metrics(&result.dev_metrics))?;
    save_finetuned(&run, "finetuned", &result.params, &dataset.task, &cell)?;
    write_scores(
        &run,
        &a.task,
        &base,
        result.test_metrics.as_ref().expect("test evaluated"),
    )?;
    run.record_time("finetune end")?;
    Ok(())
}

pub fn grid_search(a: GridSearchArgs) -> Result<()> {
    let format = data_format(&a.task)?;
    let grid = match &a.config {
        Some(path) => HyperGrid::from_kv(&load_kv(path, "grid")?)?,
        None => presets::grid(match a.lr_variant {
            LrVariantArg::Standard => LrVariant::Standard,
            LrVariantArg::Reduced => LrVariant::Reduced,
        })?,
    };
    if let Some(b) = grid
        .batch_sizes
        .iter()
        .find(|&&b| a.accumulation == 0 || b % a.accumulation != 0)
    {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} is not a multiple of {} accumulation steps",
            a.accumulation
        )));
    }
    let manifest = task_manifest(
        RunManifest::new("grid-search", a.run.seed),
        &a.task,
        &format,
        &a.checkpoint,
    )?
    .with_input("grid", grid.to_kv().render())
    .with_input("accumulation", a.accumulation);
    let dataset = load_task(&a.task, &format)?;
    let base = load_checkpoint(&a.checkpoint)?.params;
    let vocab = load_vocab(&a.task.vocab)?;
    check_inputs(base.config(), &vocab, a.task.max_len)?;
    let run = open_run(&a.run.out, &manifest)?;

    let template = FineTuneConfig {
        accumulation_steps: a.accumulation,
        max_len: a.task.max_len,
        max_answer_tokens: a.task.max_answer_tokens,
        ..FineTuneConfig::new(grid.cells()[0], a.run.seed)
    };
    let result = run_grid(&base, &dataset, &vocab, &grid, &template)?;
    run.write_report("grid.tsv", &render_grid_ledger(&result.outcomes))?;
    run.write_report("dev_metrics.txt", &render_metrics(&result.best.dev_metrics))?;
    let best = result.best.cell;
    log::info!(
        "best cell {}: batch {} lr {} epochs {}",
        result.best_index,
        best.batch_size,
        best.learning_rate,
        best.epochs
    );
    save_finetuned(&run, "best", &result.best.params, &dataset.task, &best)?;
    write_scores(
        &run,
        &a.task,
        &base,
        result.best.test_metrics.as_ref().expect("test evaluated"),
    )?;
    run.record_time("grid-search end")?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let format = data_format(&a.task)?;
    let split = match a.split {
        SplitArg::Dev => "dev",
        SplitArg::Test => "test",
    };
    let manifest = task_manifest(
        RunManifest::new("evaluate", a.run.seed),
        &a.task,
        &format,
        &a.checkpoint,
    )?
    .with_input("split", split);
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let task = TaskSpec::from_metadata(&ckpt.metadata)?;
    let vocab = load_vocab(&a.task.vocab)?;
    check_inputs(ckpt.params.config(), &vocab, a.task.max_len)?;
    if format.kind() != task.kind {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was fine-tuned for {} but the data is {}",
            task.kind.name(),
            format.kind().name()
        )));
    }
    let [_, dev, test] = TaskDataset::split_paths(&a.task.data, &format);
    let (path, policy) = match a.split {
        SplitArg::Dev => (dev, OnError::Fail),
        SplitArg::Test => (test, OnError::Skip),
    };
    require_path(&path, "split file")?;
    let examples: Vec<Example> = format.load(&path, policy)?.examples;
    let run = open_run(&a.run.out, &manifest)?;
    let metrics = run_evaluate(
        &ckpt.params,
        &task,
        &examples,
        &vocab,
        a.task.max_len,
        a.task.max_answer_tokens,
    )?;
    write_scores(&run, &a.task, &ckpt.params, &metrics)?;
    run.record_time("evaluate end")?;
    Ok(())
}

pub fn count_params(a: CountParamsArgs) -> Result<()> {
    let (config, name) = model_config(&a.model, "albeto-tiny")?;
    let count = count_parameters(&config);
    println!("{name}\t{count}\t{}", render_parameters(count));
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    if a.published == !a.files.is_empty() {
        return Err(Error::InvalidArgument(
            "pass score files or --published, not both".into(),
        ));
    }
    for f in &a.files {
        require_path(f, "score file")?;
    }
    let report = if a.published {
        EvaluationReport::build(&presets::published_scores()?, &a.reference)?
    } else {
        build_report(&a.files, &a.reference)?
    };
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &a.out {
        let mut manifest = RunManifest::new("report", 0).with_input("reference", &a.reference);
        if a.published {
            manifest = manifest.with_input("scores", "published");
        }
        for (i, f) in a.files.iter().enumerate() {
            manifest = manifest.with_input(&format!("scores.{i:03}"), path_digest(f)?);
        }
        let run = RunDir::create(out, &manifest)?;
        run.write_report("report.tsv", &report.to_tsv())?;
        run.write_report("report.txt", &table)?;
        run.record_time("report")?;
    }
    Ok(())
}
