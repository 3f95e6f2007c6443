mod args;
mod commands;
mod manifest;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use args::{Cli, Command, RunOpts};
use manifest::{Job, RunManifest};

fn configure_threads(run: &RunOpts) -> Result<()> {
    if let Some(n) = run.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().context("cannot configure the worker pool")?;
    }
    Ok(())
}

fn write_outputs(dir: &Path, outputs: &commands::Outputs, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let manifest = serde_json::to_string_pretty(manifest)? + "\n";
    let files = [("result.json", &outputs.result), ("table.csv", &outputs.table), ("manifest.json", &manifest)];
    for (name, body) in files.into_iter().chain(outputs.extra.iter().map(|(n, b)| (*n, b))) {
        let path = dir.join(name);
        fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn run_job(mut job: Job, run: &RunOpts) -> Result<()> {
    configure_threads(run)?;
    let inputs = commands::resolve(&mut job)?;
    let refs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (*r, p.as_path())).collect();
    let manifest = RunManifest::new(&job, &refs)?;
    let outputs = commands::execute(&job)?;
    write_outputs(&run.out, &outputs, &manifest)
}

fn replay(path: &Path, run: &RunOpts) -> Result<()> {
    let recorded = RunManifest::load(path)?;
    recorded.verify_inputs()?;
    let job = Job::from_manifest(&recorded).with_context(|| format!("cannot replay {}", path.display()))?;
    run_job(job, run)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pvalues(a) => {
            let run = a.run.clone();
            run_job(Job::Pvalues(a), &run)
        }
        Command::Detect(a) => {
            let run = a.run.clone();
            run_job(Job::Detect(a), &run)
        }
        Command::Identify(a) => {
            let run = a.run.clone();
            run_job(Job::Identify(a), &run)
        }
        Command::Refit(a) => {
            let run = a.run.clone();
            run_job(Job::Refit(a), &run)
        }
        Command::Simulate(a) => {
            let run = a.run.clone();
            run_job(Job::Simulate(a), &run)
        }
        Command::Replay(a) => replay(&a.manifest, &a.run),
    }
}

fn main() -> ExitCode {
    // Clap exits with 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
