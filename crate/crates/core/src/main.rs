use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adaact_kit::cli::{self, ExperimentConfig, Mode};
use adaact_kit::Result;

#[derive(Parser)]
#[command(name = "adaact-kit", version, about = "Train and diagnose activation-variance adaptive optimizers")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; the config's run.mode may also select a stability
    /// pair or a variance report.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Metrics CSV path (overrides run.output).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides run.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train two runs on neighboring datasets and log their distance.
    Stability {
        #[arg(short, long)]
        config: PathBuf,
        /// Training example to replace in the second run's dataset.
        #[arg(long)]
        replace_index: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize the averaged activation variance of a metrics CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = cli::load_config(config)?;
    if let Some(out) = out {
        cfg.output = Some(out);
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.mode {
        Mode::StabilityPair => stability(cfg),
        Mode::Train | Mode::VarianceReport => {
            let outcome = cli::run_train(cfg)?;
            let last = outcome.records.last();
            println!(
                "steps: {}  final loss: {:.6}  train acc: {:.4}  held-out acc: {}",
                outcome.records.len(),
                last.map_or(f64::NAN, |r| r.loss),
                outcome.final_train_acc,
                outcome.final_eval_acc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"))
            );
            if cfg.mode == Mode::VarianceReport {
                let summary = adaact_kit::diagnostics::summarize_activation_variance(&outcome.records)?;
                print!("{}", cli::format_report(&summary));
            }
            Ok(())
        }
    }
}

fn stability(cfg: &ExperimentConfig) -> Result<()> {
    let outcome = cli::run_stability_pair(cfg)?;
    if let Some(last) = outcome.records.last() {
        println!(
            "steps: {}  final delta_t: {}  final term_a: {}",
            outcome.records.len(),
            last.delta_t.unwrap_or(f64::NAN),
            last.term_a.map_or_else(|| "n/a".to_string(), |v| v.to_string())
        );
    }
    Ok(())
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::Train { config, out, seed } => train(&load(&config, out, seed)?),
        Command::Stability { config, replace_index, out, seed } => {
            let mut cfg = load(&config, out, seed)?;
            cfg.mode = Mode::StabilityPair;
            if replace_index.is_some() {
                cfg.replace_index = replace_index;
            }
            stability(&cfg)
        }
        Command::Report { input } => {
            print!("{}", cli::format_report(&cli::variance_report(&input)?));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
