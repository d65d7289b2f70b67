use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "ligero",
    version,
    about = "Train, distill, fine-tune and evaluate compact encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a subword vocabulary from a text file.
    TrainVocab(TrainVocabArgs),
    /// Pretrain an encoder with masked-LM (and sentence-order) objectives.
    Pretrain(PretrainArgs),
    /// Distill a student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Fine-tune one hyperparameter setting on a task.
    Finetune(FinetuneArgs),
    /// Fine-tune every grid cell and keep the best on dev.
    GridSearch(GridSearchArgs),
    /// Score a fine-tuned checkpoint on a task split.
    Evaluate(EvaluateArgs),
    /// Print the parameter count of a model configuration.
    CountParams(CountParamsArgs),
    /// Aggregate score files into the model comparison table.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Root under which `runs/<hash>/` is created.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Built-in model configuration.
    #[arg(long)]
    preset: Option<String>,
    /// Model configuration file; overrides `--preset`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainVocabArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Text file, one sentence or document per line.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 31000)]
    size: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Schedule file; defaults to the preset's schedule.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Corpus: one sentence per line, blank lines between documents.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    /// Override the schedule's total steps (warmup keeps its ratio).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train without the sentence-order objective.
    #[arg(long)]
    no_sop: bool,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Student configuration: `--preset` (default distilbeto) or `--config`.
    #[command(flatten)]
    model: ModelArgs,
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: PathBuf,
    /// Recipe file; defaults to the built-in distillation recipe.
    #[arg(long)]
    recipe: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    /// Defaults to the recipe's step count.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    warmup_ratio: f64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Conll2002,
    Conllu,
    Squad,
    Tsv,
}

#[derive(Args, Clone)]
struct TaskArgs {
    /// Directory with `train`, `dev` and `test` files.
    #[arg(long)]
    data: PathBuf,
    /// Task name used in score files; defaults to the data directory name.
    #[arg(long)]
    task: Option<String>,
    /// File format; detected from the file extensions when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Delimited files: 0-based label column.
    #[arg(long, default_value_t = 0)]
    label_column: usize,
    #[arg(long, default_value_t = 1)]
    text_column: usize,
    /// Delimited files: second text column for pair tasks.
    #[arg(long)]
    text_b_column: Option<usize>,
    #[arg(long, default_value_t = '\t')]
    delimiter: char,
    /// Delimited files start with a header row.
    #[arg(long)]
    header: bool,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    #[arg(long, default_value_t = 30)]
    max_answer_tokens: usize,
    /// Model name for score files.
    #[arg(long, default_value = "model")]
    model_name: String,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    task: TaskArgs,
    /// Pretrained checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-5)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    /// Micro-batches per optimizer step.
    #[arg(long, default_value_t = 1)]
    accumulation: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LrVariantArg {
    Standard,
    Reduced,
}

#[derive(Args)]
struct GridSearchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Grid file; overrides `--lr-variant`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LrVariantArg::Standard)]
    lr_variant: LrVariantArg,
    #[arg(long, default_value_t = 1)]
    accumulation: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Dev,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    task: TaskArgs,
    /// Fine-tuned checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args)]
struct CountParamsArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Score files; several files for one model are merged.
    files: Vec<PathBuf>,
    /// Use the built-in published scores instead of files.
    #[arg(long)]
    published: bool,
    #[arg(long, default_value = "BETO cased")]
    reference: String,
    /// When given, also write the report under a run directory here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainVocab(a) => commands::train_vocab(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Distill(a) => commands::distill(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::GridSearch(a) => commands::grid_search(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::CountParams(a) => commands::count_params(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
