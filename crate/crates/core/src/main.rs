use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lawforge::extract::{to_expression, Precision};
use lawforge::harness::{gap_sweep, run_sweep, Experiment, ExperimentConfig};
use lawforge::symnet::Checkpoint;

#[derive(Parser)]
#[command(name = "lawforge", version, about = "Learn evolution laws from reduced measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the measurement level and write convergence tables.
    Run {
        #[arg(long)]
        experiment: Option<Experiment>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "M")]
        big_m: Option<usize>,
        /// Comma-separated measurement levels.
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the operator gap of the true state per level.
    Gap {
        #[arg(long)]
        experiment: Option<Experiment>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64])]
        m: Vec<usize>,
    },
    /// Print the symbolic law stored in a checkpoint.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = lawforge::extract::DEFAULT_PRUNE_THRESHOLD)]
        threshold: f64,
        /// Print coefficients at full precision.
        #[arg(long)]
        full: bool,
        /// Print the expression tree as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn load_config(path: Option<&PathBuf>, experiment: Option<Experiment>) -> lawforge::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(e) = experiment {
        cfg.experiment = e;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> lawforge::Result<ExitCode> {
    match cli.command {
        Command::Run { experiment, config, big_m, m, seed, quick, out_dir } => {
            let mut cfg = load_config(config.as_ref(), experiment)?;
            if let Some(v) = big_m {
                cfg.big_m = v;
            }
            if !m.is_empty() {
                cfg.m_values = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.quick |= quick;
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let res = run_sweep(&cfg, true)?;
            print!("{}", res.report);
            if res.failed() {
                eprintln!("{} of {} levels failed", res.failures.len(), res.failures.len() + res.rows.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Gap { experiment, config, m } => {
            let cfg = load_config(config.as_ref(), experiment)?;
            println!("m,gap");
            for (level, gap) in gap_sweep(&cfg, &m)? {
                println!("{level},{gap:.6e}");
            }
        }
        Command::Extract { checkpoint, threshold, full, json } => {
            let ck = Checkpoint::from_json(&std::fs::read_to_string(&checkpoint)?)?;
            let expr = to_expression(&ck.spec, &ck.theta, threshold)?;
            if json {
                println!("{}", expr.to_json()?);
            } else {
                println!("{}", expr.to_text(if full { Precision::Full } else { Precision::Decimals(3) }));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
