//! `prescribe`: run curvature scenarios from TOML configs, re-verify their
//! artifacts, or classify the inputs without solving.

mod config;
mod run;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use curvature::conformal::check_necessary;
use curvature::linalg::first_eigenpair;
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "prescribe", version, about = "Prescribed curvature solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario of a config and write its artifacts.
    Run { config: PathBuf },
    /// Recompute a report's certificate from its field dumps.
    Verify { report: PathBuf, dir: PathBuf },
    /// Print the first eigenpair summary and the necessary-condition verdict.
    Classify { config: PathBuf },
}

const CONFIG_ERROR: u8 = 4;

fn init_threads() {
    let threads = std::env::var("PRESCRIBE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    // A pool that is already built keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

fn load(path: &Path) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(CONFIG_ERROR)
    })
}

fn cmd_run(path: &Path) -> ExitCode {
    let cfg = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let (grid, report) = match run::execute(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    if let Err(e) = run::write_artifacts(&cfg, &grid, &report) {
        eprintln!("error: {e}");
        return ExitCode::from(CONFIG_ERROR);
    }
    ExitCode::from(run::exit_code(&report, cfg.expect) as u8)
}

fn cmd_verify(report: &Path, dir: &Path) -> ExitCode {
    match verify::verify(report, dir) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("verify: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_classify(path: &Path) -> ExitCode {
    let cfg = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let result = (|| -> Result<serde_json::Value, String> {
        let grid = cfg.build_grid().map_err(|e| e.to_string())?;
        let eig = first_eigenpair(&grid, 0.0, 0.0).map_err(|e| e.to_string())?;
        let target = match cfg.field(&grid, "S").map_err(|e| e.to_string())? {
            Some(s) => Some(s),
            None => cfg.field(&grid, "K").map_err(|e| e.to_string())?,
        };
        let verdict = match target {
            Some(f) => Some(check_necessary(&grid, &f).map_err(|e| e.to_string())?),
            None => None,
        };
        Ok(json!({
            "eigenvalue": eig.eigenvalue,
            "eigen_iterations": eig.iterations,
            "eigen_residual": eig.residual,
            "eigenfunction_min": eig.eigenfunction.min(),
            "eigenfunction_max": eig.eigenfunction.max(),
            "verdict": verdict,
        }))
    })();
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value encodes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG_ERROR)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match &cli.command {
        Command::Run { config } => cmd_run(config),
        Command::Verify { report, dir } => cmd_verify(report, dir),
        Command::Classify { config } => cmd_classify(config),
    }
}
