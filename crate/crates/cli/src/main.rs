//! `backpack` command-line tool.
//!
//! Exit status: 0 on success, 1 when a command fails on its inputs, 2 on a
//! usage error. Log verbosity follows `BACKPACK_LOG` (default `info`).

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "backpack", version, about = "Character-level Backpack language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a Backpack or Transformer model on a text corpus.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a text file.
    Ppl(PplArgs),
    /// Multi-character cloze with beam search.
    Cloze(ClozeArgs),
    /// Top predicted characters for every sense of one character.
    Senses(SensesArgs),
    /// Constituent composition ratios of a word across prompts.
    Compose(ComposeArgs),
    /// Stability of composition ratios per word type.
    Stability(StabilityArgs),
    /// Correlation of sense similarities with human word-pair scores.
    Simlex(SimlexArgs),
    /// Pronoun bias of prompts filled with a word, optionally under an intervention.
    Bias(BiasArgs),
    /// Probe probability ratios after scaling α over a span.
    Amplify(AmplifyArgs),
    /// Continue a prompt, optionally under an intervention.
    Generate(GenerateArgs),
    /// Serve the HTTP JSON API.
    Serve(ServeArgs),
    /// Write a synthetic corpus with word annotations.
    Synth(SynthArgs),
    /// Parameter counts of a model configuration.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// UTF-8 training text.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Config document of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.total_steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PplArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    /// UTF-8 text to score.
    #[arg(long)]
    text: PathBuf,
    /// Block length; defaults to the model context length.
    #[arg(long)]
    block_size: Option<usize>,
}

#[derive(Args, Debug)]
struct ClozeArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    /// Cases as `prefix<TAB>masked<TAB>ending` lines.
    #[arg(long)]
    cases: PathBuf,
    #[arg(long, default_value_t = 10)]
    beam: usize,
}

#[derive(Args, Debug)]
struct SensesArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    #[arg(long = "char")]
    ch: char,
    #[arg(long, default_value_t = 10)]
    topk: usize,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    #[arg(long)]
    word: String,
    /// One template per line with a `[WORD]` slot; a built-in set by default.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    /// `word<TAB>type` lines, type one of compound, loanword, idiom.
    #[arg(long)]
    words: PathBuf,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Directory for `stability.csv` and `stability_words.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimlexArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    /// `word_a<TAB>word_b<TAB>score` lines.
    #[arg(long)]
    pairs: PathBuf,
    /// Compose word senses from these contexts instead of averaging character senses.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Write the report to this CSV file as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BiasArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    /// Word to fill the prompts with; repeatable.
    #[arg(long = "word", required = true)]
    words: Vec<String>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// `remove:<sense>`, a rule file path, or inline rules.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long, default_value_t = '他')]
    he: char,
    #[arg(long, default_value_t = '她')]
    she: char,
    /// Also print senses ranked by how strongly they separate the pronouns.
    #[arg(long)]
    rank: bool,
}

#[derive(Args, Debug)]
struct AmplifyArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    #[arg(long)]
    prompt: String,
    /// Prompt character index where the span starts.
    #[arg(long)]
    span_start: usize,
    /// One multiplier per span character, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    multipliers: Vec<f64>,
    /// Characters whose probability ratio is reported.
    #[arg(long)]
    probes: String,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
    /// 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rule file path or inline rules; positions index the prompt.
    #[arg(long)]
    spec: Option<String>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Lexicon {
    Standard,
    TwoTopic,
    Gendered,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    sentences: usize,
    #[arg(long, value_enum, default_value_t = Lexicon::Standard)]
    lexicon: Lexicon,
    /// Directory for `corpus.txt`, `annotations.tsv` and `lexicon.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// Config document of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    vocab_size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BACKPACK_LOG", "info")).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(backpack::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
