//! `fedssd` — experiment front-end for the federated self-distillation
//! simulator.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, Overrides};

const OUT_ROOT_ENV: &str = "FEDSSD_OUT_ROOT";

#[derive(Parser)]
#[command(name = "fedssd", about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or preset.
    Run {
        /// Path to a key=value config file.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in recipe: toy-default, toy-forgetting, or toy-comparison.
        #[arg(long)]
        preset: Option<String>,
        /// Master seeds (repeatable); overrides output.seeds.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Algorithm: fedavg, fedprox, kl, mse, or ssd.
        #[arg(long)]
        algo: Option<String>,
        #[arg(long)]
        m_max: Option<f64>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Output directory (relative paths resolve under $FEDSSD_OUT_ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize completed runs side by side.
    Compare {
        /// Run directories; the first run's final accuracy is the target.
        run_dirs: Vec<PathBuf>,
    },
    /// Print config and final metrics of a run directory.
    Inspect { run_dir: PathBuf },
}

fn out_root() -> Option<PathBuf> {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config_path: Option<PathBuf>,
    preset_name: Option<String>,
    overrides: Overrides,
) -> Result<(), ExitCode> {
    let text = match (&config_path, &preset_name) {
        (Some(path), None) => std::fs::read_to_string(path).map_err(|e| {
            eprintln!("config error: cannot read {}: {e}", path.display());
            ExitCode::from(1)
        })?,
        (None, Some(name)) => config::preset(name)
            .map_err(|e| {
                eprintln!("{e}");
                ExitCode::from(1)
            })?
            .to_string(),
        _ => {
            eprintln!("config error: pass exactly one of --config or --preset");
            return Err(ExitCode::from(1));
        }
    };

    // The comparison preset fans out into three runs with shared seeds.
    if preset_name.as_deref() == Some("toy-comparison") {
        let base_out = overrides
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("toy-comparison"));
        let mut failed = false;
        for algo in ["fedavg", "fedprox", "ssd"] {
            let mut o = overrides.clone();
            o.algo = Some(algo.to_string());
            o.out = Some(base_out.join(algo));
            let cfg = config::parse_config(&text, &o).map_err(|e| {
                eprintln!("{e}");
                ExitCode::from(1)
            })?;
            if let Err(e) = runner::run_experiment(&cfg, out_root().as_deref()) {
                eprintln!("runtime error ({algo}): {e:#}");
                failed = true;
            }
        }
        return if failed { Err(ExitCode::from(2)) } else { Ok(()) };
    }

    let cfg = config::parse_config(&text, &overrides).map_err(|e: ConfigError| {
        eprintln!("{e}");
        ExitCode::from(1)
    })?;
    runner::run_experiment(&cfg, out_root().as_deref()).map_err(|e| {
        eprintln!("runtime error: {e:#}");
        ExitCode::from(2)
    })?;
    Ok(())
}

fn cmd_compare(run_dirs: Vec<PathBuf>) -> Result<(), ExitCode> {
    let rows = runner::compare(&run_dirs).map_err(|e| {
        eprintln!("runtime error: {e:#}");
        ExitCode::from(2)
    })?;
    println!(
        "{:<40} {:>10} {:>10} {:>16}",
        "run", "final_acc", "best_acc", "rounds_to_target"
    );
    for row in rows {
        println!(
            "{:<40} {:>10.4} {:>10.4} {:>16}",
            row.name,
            row.final_acc,
            row.best_acc,
            row.rounds_to_target
                .map(|r| r.to_string())
                .unwrap_or_else(|| "never".to_string())
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            preset,
            seeds,
            algo,
            m_max,
            mu,
            alpha,
            tau,
            rounds,
            out,
        } => cmd_run(
            config,
            preset,
            Overrides {
                seeds: if seeds.is_empty() { None } else { Some(seeds) },
                algo,
                m_max,
                mu,
                alpha,
                tau,
                rounds,
                out,
            },
        ),
        Command::Compare { run_dirs } => cmd_compare(run_dirs),
        Command::Inspect { run_dir } => runner::inspect(&run_dir).map_err(|e| {
            eprintln!("runtime error: {e:#}");
            ExitCode::from(2)
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
