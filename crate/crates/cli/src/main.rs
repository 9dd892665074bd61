//! `dmlcmr`: generate data, fit estimators, run benchmarks and diagnostics
//! from a TOML configuration.
//!
//! Exit status: 0 on success, 2 for an invalid configuration (field-level
//! JSON on stderr), 1 for a failure while running (JSON on stderr).

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use config::{Command, FieldError, Overrides};

#[derive(Debug, Parser)]
#[command(name = "dmlcmr", version, about = "Debiased estimation for conditional moment restrictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the file)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed` in the file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Validate the configuration and print the plan without running
    #[arg(long, global = true)]
    dry_run: bool,
}

// A closed pipe on the reading side is not our failure; ignore write errors.
fn emit(mut w: impl Write, value: &serde_json::Value) {
    let _ = writeln!(w, "{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn invalid(errors: &[FieldError]) -> ExitCode {
    emit(std::io::stderr(), &json!({ "status": "invalid-config", "errors": errors }));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => return invalid(&[e]),
    };
    let over = Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        jobs: cli.jobs,
    };
    let run = match config::resolve(cli.command, file, &over) {
        Ok(r) => r,
        Err(errors) => return invalid(&errors),
    };
    if cli.dry_run {
        let plan = json!({
            "status": "valid",
            "command": run.command,
            "config_hash": run.hash,
            "seed": run.seed,
            "out": run.out,
            "config": run.section,
        });
        emit(std::io::stdout(), &plan);
        return ExitCode::SUCCESS;
    }
    if let Some(jobs) = run.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("warning: could not size the worker pool: {e}");
        }
    }
    match commands::execute(&run) {
        Ok(()) => {
            emit(
                std::io::stdout(),
                &json!({ "status": "ok", "command": run.command, "config_hash": run.hash, "out": run.out }),
            );
            ExitCode::SUCCESS
        }
        Err(f) => {
            let report = json!({
                "status": "error",
                "command": run.command,
                "config_hash": run.hash,
                "message": f.message,
                "failed_cells": f.cells,
            });
            emit(std::io::stderr(), &report);
            ExitCode::from(1)
        }
    }
}
