//! Command-line driver: corpus synthesis through training, extraction,
//! back-end scoring, pair verification, and evaluation.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "svkit", version, about = "Speaker-verification toolkit")]
struct Cli {
    /// Experiment configuration file (sectioned key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap the worker thread pool (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus, manifest, and trial list.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert WAV utterances to an MFCC feature archive.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a speaker classifier on the manifest's train split.
    TrainClassifier {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a previous run directory (model + optimizer).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extract utterance embeddings (chunked, tapped, averaged).
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured extraction chunk length.
        #[arg(long)]
        chunk_len: Option<usize>,
        /// Override the configured tap (f3, f4, xvec).
        #[arg(long)]
        tap: Option<String>,
        /// Restrict to one split (train, enroll, test; default all).
        #[arg(long)]
        split: Option<String>,
        /// Also write per-chunk embeddings (chunks.ark) for the verifier.
        #[arg(long)]
        chunks: bool,
    },
    /// Fit the scoring back-end on train-split embeddings.
    FitBackend {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured LDA dimension (0 disables LDA).
        #[arg(long)]
        lda_dim: Option<usize>,
    },
    /// Score a trial list with a fitted back-end.
    ScorePlda {
        #[arg(long)]
        backend: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pair verifier on train-split chunk embeddings.
    TrainTesa {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list with the pair verifier.
    ScoreTesa {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print EER and minimum DCF for a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Row label for the table (defaults to the file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Write DET operating points for a score file.
    Det {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concatenate two embedding archives into ensemble vectors.
    Ensemble {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let threads = match cli.threads {
        Some(n) => n,
        None => cfg.threads()?,
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }

    match &cli.command {
        Command::Synth { out } => commands::data::synth(&cfg, out),
        Command::Featurize { manifest, out } => commands::data::featurize(&cfg, manifest, out),
        Command::TrainClassifier {
            manifest,
            out,
            resume,
        } => commands::train::train(&cfg, manifest, out, resume.as_deref()),
        Command::Extract {
            manifest,
            model,
            out,
            chunk_len,
            tap,
            split,
            chunks,
        } => commands::extract::extract(
            &cfg,
            &commands::extract::ExtractArgs {
                manifest,
                model,
                out,
                chunk_len: *chunk_len,
                tap: tap.clone(),
                split: split.clone(),
                with_chunks: *chunks,
            },
        ),
        Command::FitBackend {
            manifest,
            embeddings,
            out,
            lda_dim,
        } => commands::backend::fit(&cfg, manifest, embeddings, out, *lda_dim),
        Command::ScorePlda {
            backend,
            embeddings,
            trials,
            out,
        } => commands::backend::score(&cfg, backend, embeddings, trials, out),
        Command::TrainTesa {
            manifest,
            chunks,
            out,
        } => commands::tesa::train(&cfg, manifest, chunks, out),
        Command::ScoreTesa {
            model,
            chunks,
            trials,
            out,
        } => commands::tesa::score(&cfg, model, chunks, trials, out),
        Command::Eval { scores, name } => commands::evaluate::eval(scores, name.as_deref()),
        Command::Det { scores, out } => commands::evaluate::det(scores, out),
        Command::Ensemble { a, b, out } => commands::backend::ensemble(&cfg, a, b, out),
    }
}

/// Exit categories: 2 config, 3 missing or corrupt inputs, 4 numeric
/// divergence, 5 data errors, 1 anything else.
fn exit_category(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<svkit_core::Error>() {
            use svkit_core::Error as E;
            return match core {
                E::Config(_) => 2,
                E::Io { .. } | E::Format { .. } | E::State(_) => 3,
                E::Diverged(_) | E::NonFinite(_) => 4,
                E::ShapeMismatch { .. }
                | E::BadShape { .. }
                | E::IndexOutOfRange { .. }
                | E::EmptyUtterance(_)
                | E::TooShort(_)
                | E::Count(_)
                | E::Metric(_) => 5,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    // Config-file parse errors raised in the CLI layer.
    if format!("{err:#}").contains("config") {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_category(&err))
        }
    }
}
