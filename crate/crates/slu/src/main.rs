use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use slu::desk::{prepare, PrepareOptions};
use slu::harness::{load_experiment, load_matrix, MetricsReport, Runner, Stage};
use slu::io::write_atomic;
use slu_core::desk::DeskConfig;

#[derive(Parser)]
#[command(name = "slu", about = "Spoken language understanding experiments")]
struct Cli {
    /// Stage cache directory; defaults to $SLU_CACHE_DIR, then ./slu-cache.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic help-desk corpus and its matrix file.
    Prepare {
        #[arg(long)]
        out: PathBuf,
        /// A tiny corpus for smoke runs.
        #[arg(long)]
        toy: bool,
    },
    PretrainAm(StageArgs),
    AdaptAm(StageArgs),
    TrainLm(StageArgs),
    TrainT2i(StageArgs),
    Synth(StageArgs),
    TrainS2i(StageArgs),
    JointTrain(StageArgs),
    /// Evaluate one experiment and print its metrics row.
    Eval(StageArgs),
    /// Run every experiment of a matrix for every seed.
    Matrix {
        config: PathBuf,
        /// Replace the seed list, e.g. `--seeds 1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Write metrics.json and metrics.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the tables of a saved metrics.json.
    Report { metrics: PathBuf },
}

#[derive(Args)]
struct StageArgs {
    /// Experiment TOML file.
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn stage_of(c: &Command) -> Option<(Stage, &StageArgs)> {
    Some(match c {
        Command::PretrainAm(a) => (Stage::PretrainAm, a),
        Command::AdaptAm(a) => (Stage::AdaptAm, a),
        Command::TrainLm(a) => (Stage::TrainLm, a),
        Command::TrainT2i(a) => (Stage::TrainT2i, a),
        Command::Synth(a) => (Stage::Synth, a),
        Command::TrainS2i(a) => (Stage::TrainS2i, a),
        Command::JointTrain(a) => (Stage::JointTrain, a),
        Command::Eval(a) => (Stage::Eval, a),
        _ => return None,
    })
}

fn run(cli: Cli) -> Result<bool> {
    let runner = match cli.cache {
        Some(c) => Runner::new(c),
        None => Runner::from_env(&PathBuf::from("slu-cache")),
    };
    if let Some((stage, args)) = stage_of(&cli.command) {
        let mut cfg = load_experiment(&args.config)?;
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if stage == Stage::Eval {
            let row = runner.run_experiment(&cfg);
            println!("{}", serde_json::to_string_pretty(&row)?);
            return Ok(row.ok());
        }
        let path = runner.run_stage(&cfg, stage)?;
        println!("{}", path.display());
        return Ok(true);
    }
    match cli.command {
        Command::Prepare { out, toy } => {
            let opts = if toy {
                PrepareOptions {
                    desk: DeskConfig {
                        dev: 20,
                        test: 20,
                        ..DeskConfig::toy()
                    },
                    pretrain_utterances: 50,
                    ..PrepareOptions::default()
                }
            } else {
                PrepareOptions::default()
            };
            let p = prepare(&out, &opts).with_context(|| format!("preparing {}", out.display()))?;
            println!("{}", p.matrix.display());
            Ok(true)
        }
        Command::Matrix { config, seeds, out } => {
            let mut m = load_matrix(&config)?;
            if let Some(s) = seeds {
                m.seeds = s;
            }
            let report = runner.run_matrix(&m);
            let text = report.to_text();
            print!("{text}");
            if let Some(dir) = out {
                write_atomic(&dir.join("metrics.json"), report.to_json().as_bytes())?;
                write_atomic(&dir.join("metrics.txt"), text.as_bytes())?;
                info!("wrote {}", dir.join("metrics.json").display());
            }
            Ok(report.all_ok())
        }
        Command::Report { metrics } => {
            let text = std::fs::read_to_string(&metrics).with_context(|| metrics.display().to_string())?;
            let report: MetricsReport = serde_json::from_str(&text)?;
            print!("{}", report.to_text());
            Ok(report.all_ok())
        }
        _ => unreachable!("stage commands handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
