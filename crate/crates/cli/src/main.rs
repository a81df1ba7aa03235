//! `dualenc`: train, index, retrieve and evaluate concept-based video search.
//!
//! Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualenc::par::Execution;
use dualenc::retrieval::Aggregation;

use commands::{EvaluateArgs, RetrieveArgs, Run};
use config::Settings;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "dualenc", version, about = "Dual encoding concept-to-video retrieval")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random choice; overrides a `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    strict_repro: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Checks a taxonomy file (default: the bundled one) and prints a summary.
    TaxonomyValidate {
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Extra concepts layered on top of the base taxonomy.
        #[arg(long)]
        extend: Option<PathBuf>,
    },
    /// Generates a synthetic corpus with features, captions, qrels,
    /// taxonomy, embeddings and a ready-to-use `train.conf`.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the dual encoder; writes best/last checkpoints, the
    /// vocabulary and an epoch log into `--out`.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Encodes every shot of a feature file into an index.
    Index {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ranks shots for each concept and writes a run file.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `vocab.tsv` next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, conflicts_with = "features")]
        index: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Comma-separated concept ids in output order (default: all).
        #[arg(long, value_delimiter = ',')]
        concepts: Vec<String>,
        /// Ranked list depth (default 1000).
        #[arg(long)]
        k: Option<usize>,
        /// `mean-score` or `mean-embedding`.
        #[arg(long)]
        aggregation: Option<Aggregation>,
        /// Query with concept labels only, without their descriptions.
        #[arg(long)]
        label_only: bool,
        #[arg(long, default_value = "dualenc")]
        tag: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a run file against qrels with extended inferred AP.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Second run scored side by side with per-topic deltas.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Column names for comparison mode.
        #[arg(long, num_args = 2, value_names = ["LEFT", "RIGHT"],
              default_values = ["Concept name", "Concept name + descriptions"])]
        names: Vec<String>,
        /// Tab-separated report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compares analytic and finite-difference gradients of the full
    /// training loss on small random inputs.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn name(command: &Command) -> &'static str {
    match command {
        Command::TaxonomyValidate { .. } => "taxonomy-validate",
        Command::Synth { .. } => "synth",
        Command::Train { .. } => "train",
        Command::Index { .. } => "index",
        Command::Retrieve { .. } => "retrieve",
        Command::Evaluate { .. } => "evaluate",
        Command::Gradcheck { .. } => "gradcheck",
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else {
        return Ok(());
    };
    if n == 0 {
        return Err(CliError::config("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    log::warn!("built without parallel support; --threads {n} ignored");
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    let mut settings = Settings::load(cli.config.as_deref())?;
    settings.apply_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        settings.apply_overrides(&[format!("seed={seed}")])?;
    }
    if cli.strict_repro {
        settings.record("strict_repro", true);
    }
    if let Some(n) = cli.threads {
        settings.record("threads", n);
    }
    let exec = if cli.strict_repro {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let run = Run::new(name(&cli.command), settings, exec);
    match cli.command {
        Command::TaxonomyValidate { taxonomy, extend } => {
            run.settings.finish()?;
            print!("{}", commands::taxonomy_validate(taxonomy.as_deref(), extend.as_deref())?);
        }
        Command::Synth { out } => {
            let m = commands::synth(run, &out)?;
            println!("wrote {} files to {}", m.outputs.len(), out.display());
        }
        Command::Train { out } => {
            let m = commands::cmd_train(run, &out)?;
            println!("checkpoint {}", m.fingerprint.unwrap_or_default());
        }
        Command::Index {
            checkpoint,
            features,
            out,
        } => {
            commands::cmd_index(run, &checkpoint, &features, &out)?;
        }
        Command::Retrieve {
            checkpoint,
            vocab,
            embeddings,
            index,
            features,
            taxonomy,
            concepts,
            k,
            aggregation,
            label_only,
            tag,
            out,
        } => {
            commands::cmd_retrieve(
                run,
                RetrieveArgs {
                    checkpoint: &checkpoint,
                    vocab: vocab.as_deref(),
                    embeddings: &embeddings,
                    index: index.as_deref(),
                    features: features.as_deref(),
                    taxonomy: taxonomy.as_deref(),
                    concepts: &concepts,
                    k,
                    aggregation,
                    label_only,
                    tag: &tag,
                    out: &out,
                },
            )?;
        }
        Command::Evaluate {
            run: run_path,
            qrels,
            epsilon,
            compare,
            names,
            out,
        } => {
            let report = commands::cmd_evaluate(
                run,
                EvaluateArgs {
                    run: &run_path,
                    qrels: &qrels,
                    epsilon,
                    compare: compare.as_deref(),
                    names: (&names[0], &names[1]),
                    out: out.as_deref(),
                },
            )?;
            print!("{report}");
        }
        Command::Gradcheck { tolerance } => {
            print!("{}", commands::cmd_gradcheck(run, tolerance)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dualenc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
