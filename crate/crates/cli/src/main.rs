//! Batch CLI for the political-inference experiment pipeline.
//!
//! Commands compose through the experiment output directory:
//! `build-corpus` constructs a stance-labeled dataset from raw tweets,
//! `extract-features` fits and caches every feature channel,
//! `train`/`evaluate` handle one model variant, `compare` runs the full
//! variant grid with significance tests and homogeneous groups, and
//! `explain` reports permutation feature importance.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 missing capability (external adapter), 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use polinfer::corpus::{Arity, TaskId};
use polinfer::model::Variant;
use polinfer::pipeline::{self, ExperimentConfig};
use polinfer::{Error, ErrorCategory};

#[derive(Parser)]
#[command(name = "polinfer", version, about = "Political-inference text classification experiments")]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(short, long, global = true, default_value = "polinfer.toml")]
    config: PathBuf,
    /// Override the task, e.g. `T2` or `T2.ter`.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Override the model channels, e.g. `bert+sngram` or `baseline`.
    #[arg(long, global = true)]
    channels: Option<String>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the hashtag-stance corpus from raw tweets.
    BuildCorpus,
    /// Split the dataset and fit/cache all feature channels.
    ExtractFeatures,
    /// Train the configured model variant on the development split.
    Train,
    /// Evaluate a trained variant on the test split.
    Evaluate,
    /// Train/evaluate a set of variants and report significance groups.
    Compare {
        /// Comma-separated variant names; defaults to the standard eight.
        #[arg(long)]
        variants: Option<String>,
    },
    /// Permutation feature importance for the configured variant.
    Explain,
}

fn parse_task(spec: &str) -> Result<(TaskId, Option<Arity>), Error> {
    let (task, arity) = match spec.split_once('.') {
        Some((t, a)) => {
            let arity = match a.to_lowercase().as_str() {
                "bin" | "binary" => Arity::Binary,
                "ter" | "ternary" => Arity::Ternary,
                other => {
                    return Err(Error::Config(format!(
                        "unknown arity {other:?} (use bin or ter)"
                    )))
                }
            };
            (t, Some(arity))
        }
        None => (spec, None),
    };
    Ok((task.parse()?, arity))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(&cli.config).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", cli.config.display()))
    })?;
    let mut config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", cli.config.display())))?;
    if let Some(task) = &cli.task {
        let (task_id, arity) = parse_task(task)?;
        config.experiment.task = task_id;
        if let Some(arity) = arity {
            config.experiment.arity = arity;
        }
    }
    if let Some(channels) = &cli.channels {
        config.model.channels = channels.clone();
    }
    if let Some(seed) = cli.seed {
        config.experiment.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.experiment.out_dir = out.clone();
    }
    // Validate eagerly so bad configs fail before any work.
    config.task()?;
    config.variant()?;
    Ok(config)
}

fn parse_variants(spec: Option<&str>) -> Result<Vec<Variant>, Error> {
    match spec {
        None => Ok(Variant::standard_eight()),
        Some(list) => list
            .split(',')
            .map(|name| pipeline::parse_variant(name.trim()))
            .collect(),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::BuildCorpus => {
            match (&config.govbr, &config.brmoral) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "config has both [govbr] and [brmoral] sections; keep one".into(),
                    ))
                }
                (Some(_), None) => {
                    let summary = pipeline::build_corpus_govbr(&config)?;
                    println!(
                        "users: {} total, {} for, {} against, {} discarded",
                        summary.users_total,
                        summary.users_for,
                        summary.users_against,
                        summary.users_discarded
                    );
                    println!(
                        "tweets: {} after stance, {} after cleaning, {} after similarity filter (threshold {:.4})",
                        summary.tweets_after_stance,
                        summary.tweets_after_clean,
                        summary.tweets_after_filter,
                        summary.similarity_threshold
                    );
                    println!(
                        "wrote {} documents: {} development, {} test",
                        summary.documents_written, summary.dev_size, summary.test_size
                    );
                }
                (None, Some(_)) => {
                    let summary = pipeline::build_corpus_brmoral(&config)?;
                    println!(
                        "essays: {} total, {} labeled, {} outside the class set",
                        summary.essays_total, summary.labeled, summary.outside_class_set
                    );
                    println!(
                        "wrote {} documents: {} development, {} test",
                        summary.labeled, summary.dev_size, summary.test_size
                    );
                }
                (None, None) => {
                    return Err(Error::Config(
                        "build-corpus needs a [govbr] or [brmoral] section".into(),
                    ))
                }
            }
            let dist = config.features_dir().join("distribution.txt");
            if let Ok(table) = std::fs::read_to_string(&dist) {
                println!("\n{table}");
            }
        }
        Command::ExtractFeatures => {
            let summary = pipeline::extract_features(&config)?;
            println!(
                "split: {} development / {} test documents",
                summary.dev_size, summary.test_size
            );
            println!(
                "sngram: vocabulary {} -> k = {}",
                summary.sngram_vocabulary_dim, summary.chosen_k_sngram
            );
            println!(
                "psych: width {} -> k = {}",
                summary.psych_width, summary.chosen_k_psych
            );
        }
        Command::Train => {
            let variant = config.variant()?;
            let summary = pipeline::train_variant(&config, variant)?;
            println!(
                "trained {} for {} epochs (final loss {})",
                summary.variant,
                summary.epochs,
                summary
                    .final_loss
                    .map_or("n/a".to_string(), |l| format!("{l:.4}"))
            );
            println!("saved to {}", summary.model_dir.display());
        }
        Command::Evaluate => {
            let variant = config.variant()?;
            let report = pipeline::evaluate_variant(&config, variant)?;
            println!(
                "{}: Acc {:.2}  F1 {:.2}  P {:.2}  R {:.2}  (n = {})",
                variant.name(),
                report.accuracy,
                report.macro_f1,
                report.macro_precision,
                report.macro_recall,
                report.n
            );
        }
        Command::Compare { variants } => {
            let variants = parse_variants(variants.as_deref())?;
            let summary = pipeline::compare(&config, &variants)?;
            println!("{}", summary.groups.format_table());
            println!("Reference model: {}", summary.reference);
            for line in &summary.reference_lines {
                println!("{line}");
            }
        }
        Command::Explain => {
            let variant = config.variant()?;
            let report = pipeline::explain(&config, variant)?;
            println!(
                "base score {:.4} over {} repeats",
                report.base_score, report.repeats
            );
            print!("{}", report.format_two_tailed(7));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Capability => 4,
                ErrorCategory::Internal => 1,
            };
            ExitCode::from(code)
        }
    }
}
