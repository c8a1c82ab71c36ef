use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uncseg::config::ExperimentConfig;
use uncseg::gradcheck::{check_layers, check_network, small_network_config};
use uncseg::losses::LossKind;
use uncseg::pipeline::{cmd_analyze, cmd_phantom, cmd_predict, cmd_train, PredictMode};

#[derive(Parser, Debug)]
#[command(
    name = "uncseg",
    version,
    about = "Uncertainty-aware segmentation experiments on synthetic cardiac phantoms"
)]
struct Cli {
    /// Experiment config (`key = value` with [sections]); defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom cases and the fold file.
    Phantom,
    /// Train one network and store its snapshot ensemble.
    Train {
        #[arg(long, value_parser = parse_loss)]
        loss: LossKind,
        #[arg(long)]
        fold: usize,
    },
    /// Predict every test case of the fold(s) for all configured losses.
    Predict {
        #[arg(long, value_parser = parse_mode)]
        mode: PredictMode,
        /// Defaults to the configured run_folds.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Reliability, referral and loss-curve CSVs, map renders, summary table.
    Analyze,
    /// Finite-difference gradient checks at 64-bit precision.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Print the effective configuration.
    Config,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: uncseg::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<PredictMode, String> {
    s.parse().map_err(|e: uncseg::Error| e.to_string())
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("UNCSEG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("UNCSEG_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli, config: ExperimentConfig) -> uncseg::Result<bool> {
    match cli.command {
        Command::Phantom => {
            let dirs = cmd_phantom(&config)?;
            println!(
                "wrote {} cases under {}",
                dirs.len(),
                config.output_dir.join("data").display()
            );
        }
        Command::Train { loss, fold } => {
            let s = cmd_train(&config, loss, fold)?;
            let last = s.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "trained {loss} fold {fold}: {} iterations, final loss {last:.5}",
                s.log.len()
            );
            for d in s.snapshots {
                println!("snapshot {}", d.display());
            }
        }
        Command::Predict { mode, fold } => {
            let folds = fold
                .map(|f| vec![f])
                .unwrap_or_else(|| config.training.run_folds.clone());
            for f in folds {
                let dirs = cmd_predict(&config, f, mode)?;
                println!("fold {f}: {} predictions ({})", dirs.len(), mode.tag());
            }
        }
        Command::Analyze => {
            let summary = cmd_analyze(&config)?;
            print!("{}", summary.to_text());
        }
        Command::Gradcheck { seeds } => {
            let mut ok = true;
            let mut report = |checks: Vec<uncseg::gradcheck::GradCheck>, seed: u64| {
                for c in checks {
                    ok &= c.passed();
                    if !c.passed() || seed == 0 {
                        let verdict = if c.passed() { "ok" } else { "FAIL" };
                        println!(
                            "seed {seed:>3} {:<28} {:.3e} (< {:.0e}) {verdict}",
                            c.name, c.max_rel_error, c.tolerance
                        );
                    }
                }
            };
            for seed in 0..seeds {
                report(check_layers(seed)?, seed);
            }
            report(check_network(0, &small_network_config(), 21)?, 0);
            println!(
                "{}",
                if ok {
                    "all gradient checks passed"
                } else {
                    "gradient checks FAILED"
                }
            );
            return Ok(ok);
        }
        Command::Config => print!("{}", config.to_text()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    };
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli, config) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
