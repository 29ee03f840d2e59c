//! `mwmae` command-line interface.
//!
//! Logs go to stderr as JSON lines; results only go to the files named on
//! the command line. Failures print one JSON object on stderr and exit
//! with 1, or 2 for usage errors.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mwmae::datasets::SynthKind;
use serde_json::json;

use commands::{AnalysisKind, AnalyzeArgs, PretrainArgs, ProbeArgs, StackArg};

#[derive(Parser, Debug)]
#[command(
    name = "mwmae",
    version,
    about = "Multi-window masked autoencoders for audio"
)]
struct Cli {
    /// Seed for corpus generation, pretraining, probing and analysis masks
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic WAV corpus
    Synth {
        /// tone, chirp, noise-band or tone-mixture
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an MW-MAE on a WAV directory or spectrogram container
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Scene embeddings for every WAV in a directory
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a shallow probe on embeddings and report the test metric
    Probe {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Probe hyper-parameters as JSON
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Labels are `;`-separated sets; reports mAP
        #[arg(long)]
        multilabel: bool,
    },
    /// Per-head attention entropy, attention distance or PWCCA
    Analyze {
        #[arg(value_enum)]
        kind: AnalysisKind,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "encoder")]
        stack: StackArg,
        /// Use at most this many examples
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Normalized overall score across tasks
    Score {
        #[arg(long)]
        metrics_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant suite
    Selftest,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let line = json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn fail(kind: &str, message: &str, field: Option<&str>, code: u8) -> ExitCode {
    let mut err = json!({ "error": kind, "message": message });
    if let Some(f) = field {
        err["field"] = json!(f);
    }
    eprintln!("{err}");
    ExitCode::from(code)
}

fn run(cli: Cli) -> mwmae::Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Synth { kind, n, out } => {
            let kind: SynthKind = kind.parse()?;
            commands::synth(kind, n, seed, &out)?;
        }
        Command::Pretrain {
            config,
            data,
            out,
            loss_csv,
        } => commands::pretrain(PretrainArgs {
            config,
            data,
            out,
            loss_csv,
            seed: cli.seed,
        })?,
        Command::Extract { ckpt, wav_dir, out } => commands::extract(&ckpt, &wav_dir, &out)?,
        Command::Probe {
            embeddings,
            labels,
            out,
            config,
            batch_size,
            max_epochs,
            multilabel,
        } => commands::probe(ProbeArgs {
            embeddings,
            labels,
            out,
            config,
            batch_size,
            max_epochs,
            multilabel,
            seed,
        })?,
        Command::Analyze {
            kind,
            ckpt,
            data,
            out,
            stack,
            limit,
        } => commands::analyze(AnalyzeArgs {
            kind,
            ckpt,
            data,
            out,
            stack,
            limit,
            seed,
        })?,
        Command::Score { metrics_dir, out } => commands::score(&metrics_dir, &out)?,
        Command::Selftest => return commands::selftest(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            return fail("usage", first.trim_start_matches("error: "), None, 2);
        }
    };
    init_logging();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => fail("selftest", "one or more invariant checks failed", None, 1),
        Err(e) => {
            let field = match &e {
                mwmae::Error::Config { field, .. } => Some(field.as_str()),
                _ => None,
            };
            fail(e.kind(), &e.to_string(), field, 1)
        }
    }
}
