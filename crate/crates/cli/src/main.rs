//! `affectlm` command-line driver.
//!
//! Every flag has a config-file twin: `--learning-rate 0.001` and the line
//! `learning_rate=0.001` in a `--config` file are equivalent, and the flag
//! wins when both are present.

mod commands;
mod error;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "affectlm", version, about = "Emotion-conditioned dialogue language modeling")]
struct Cli {
    /// Log at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a byte-level BPE vocabulary from corpus CSVs and/or text files.
    TrainTokenizer(TrainTokenizerArgs),
    /// Print conversation, utterance and turn counts per split.
    Stats(StatsArgs),
    /// Write formatted training examples as JSON lines.
    Format(FormatArgs),
    /// Train on plain text (one document per line).
    Pretrain(PretrainArgs),
    /// Train on dialogue examples in fine_tuned or emo_prepend mode.
    Finetune(FinetuneArgs),
    /// Sample one response per listener turn as JSON lines.
    Generate(GenerateArgs),
    /// Run the metric suite and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Interactive conversation; `/emotion <label>` switches, `/quit` exits.
    Chat(ChatArgs),
    /// Write the emotion-keyed synthetic corpus and a generic text corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainTokenizerArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus CSV (repeatable).
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    /// Plain-text file, one document per line (repeatable).
    #[arg(long)]
    pub text: Vec<PathBuf>,
    /// Emotion label manifest; defaults to the labels found in the corpora.
    #[arg(long)]
    pub emotions: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// `full` (all 256 bytes) or `corpus` (bytes seen in training text).
    #[arg(long)]
    pub alphabet: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Corpus CSV files; the split is guessed from each file name.
    #[arg(required = true)]
    pub corpus: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FormatArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Drop the situation text from every formatted sequence.
    #[arg(long)]
    pub no_situation: bool,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct OptimArgs {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Positive number or `none`.
    #[arg(long)]
    pub grad_clip_norm: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Training text, one document per line (repeatable).
    #[arg(long)]
    pub text: Vec<PathBuf>,
    #[arg(long)]
    pub valid_text: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Drop the situation text from every formatted sequence.
    #[arg(long)]
    pub no_situation: bool,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Also write the best-validation model here.
    #[arg(long)]
    pub best_out: Option<PathBuf>,
    /// Continue from a training-state file written by --state-out.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many updates have been applied.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Write model, optimizer and data-order state for --resume.
    #[arg(long)]
    pub state_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SamplingArgs {
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Drop the situation text from every formatted sequence.
    #[arg(long)]
    pub no_situation: bool,
    /// JSON-lines output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Drop the situation text from every formatted sequence.
    #[arg(long)]
    pub no_situation: bool,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-example generations as JSON lines.
    #[arg(long)]
    pub examples_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ChatArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Drop the situation text from every formatted sequence.
    #[arg(long)]
    pub no_situation: bool,
    /// Initial emotion label.
    #[arg(long)]
    pub emotion: Option<String>,
    #[arg(long)]
    pub situation: Option<String>,
    /// Print the decoded prefix before each response.
    #[arg(long)]
    pub show_prefix: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub conversations: Option<usize>,
    #[arg(long)]
    pub generic_lines: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::TrainTokenizer(a) => commands::train_tokenizer(a),
        Command::Stats(a) => commands::stats(a),
        Command::Format(a) => commands::format(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Chat(a) => commands::chat(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
