mod args;
mod manifest;
mod run;

use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use manifest::RunManifest;
use run::{execute, replay_cli, UsageError};

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("RINGWATCH_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RINGWATCH_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let clock = Instant::now();
    let manifest_out = cli.manifest_out.clone();
    let (cli, argv) = match cli.command {
        Command::Replay(a) => {
            let manifest = RunManifest::read(&a.manifest)?;
            log::info!("replaying `{}`", manifest.command);
            (replay_cli(&manifest.argv)?, manifest.argv)
        }
        _ => (cli, argv),
    };
    let manifest_out = manifest_out.or_else(|| cli.manifest_out.clone());
    let Some(record) = execute(cli)? else {
        return Ok(());
    };
    let manifest = RunManifest {
        command: record.command,
        argv,
        inputs: record.inputs,
        outputs: record.outputs,
        preset: record.preset,
        thresholds: record.thresholds,
        seed: record.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        duration_seconds: clock.elapsed().as_secs_f64(),
    };
    if let Some(path) = manifest_out.or_else(|| RunManifest::default_path(&manifest.outputs)) {
        manifest.write(&path)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
