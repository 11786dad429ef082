//! `chorekit` command-line front end.

mod bundles;
mod config;
mod data;
mod eval;
mod generate;
mod manifest;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

const THREADS_ENV: &str = "CHOREKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "chorekit", version, about = "Music-to-dance tokenization, generation and evaluation pipelines")]
struct Cli {
    /// JSON object of flag values; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Where to write the run manifest instead of next to the outputs.
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic motion and music corpus.
    GenData(data::GenDataArgs),
    /// Encode motion clips to upper/lower token ids.
    Tokenize(data::TokenizeArgs),
    /// Decode token ids to motion and report reconstruction losses.
    Reconstruct(data::ReconstructArgs),
    /// Train the motion tokenizer.
    TrainTokenizer(data::TrainTokenizerArgs),
    /// Train the retrieval dual encoder.
    TrainRetrieval(eval::TrainRetrievalArgs),
    /// Generate dance tokens from music features.
    Generate(generate::GenerateArgs),
    /// Compute the evaluation metric report.
    Evaluate(eval::EvaluateArgs),
    /// Embed motion or music sequences with the retrieval encoder.
    Embed(eval::EmbedArgs),
    /// Print a sliding-window attention mask as a 0/1 grid.
    MasksDump(generate::MasksDumpArgs),
    /// Run the invariant suite.
    Selftest(selftest::SelftestArgs),
}

/// Context shared by every command.
#[derive(Clone)]
pub struct Run {
    pub command: &'static str,
    pub config: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub threads: usize,
}

fn configure_threads() -> anyhow::Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize =
            v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                chorekit::Error::Invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
            })?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(rayon::current_num_threads())
}

fn run() -> anyhow::Result<u8> {
    let args = config::merge_config(std::env::args_os().collect())?;
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    let threads = configure_threads()?;
    let mut run = Run { command: "", config: cli.config, manifest: cli.manifest, threads };
    match cli.command {
        Command::GenData(a) => data::gen_data(run.named("gen-data"), a),
        Command::Tokenize(a) => data::tokenize(run.named("tokenize"), a),
        Command::Reconstruct(a) => data::reconstruct(run.named("reconstruct"), a),
        Command::TrainTokenizer(a) => data::train_tokenizer(run.named("train-tokenizer"), a),
        Command::TrainRetrieval(a) => eval::train_retrieval(run.named("train-retrieval"), a),
        Command::Generate(a) => generate::generate(run.named("generate"), a),
        Command::Evaluate(a) => eval::evaluate(run.named("evaluate"), a),
        Command::Embed(a) => eval::embed(run.named("embed"), a),
        Command::MasksDump(a) => generate::masks_dump(run.named("masks-dump"), a),
        Command::Selftest(a) => return selftest::selftest(run.named("selftest"), a),
    }?;
    Ok(0)
}

impl Run {
    fn named(&mut self, command: &'static str) -> &Run {
        self.command = command;
        self
    }
}

/// 2 for invalid input, 3 for I/O, 4 for numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use chorekit::ErrorKind;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<chorekit::Error>() {
            return match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Io => 3,
                ErrorKind::Numerical => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
