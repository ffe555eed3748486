//! `collapse-lab <experiment> --config <file.json> --out <dir> [--seed S] [--no-plots]`
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use collapse_lab::{run_experiment, ExperimentConfig, ExperimentKind, LabError};

#[derive(Parser, Debug)]
#[command(name = "collapse-lab", version, about = "Attention-collapse numerical laboratory")]
struct Args {
    /// collapse, merge-sweep, pde, scaling-fit or benchmark; overrides the config's field.
    experiment: String,
    /// JSON config; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_plots: bool,
}

fn load(args: &Args) -> Result<ExperimentConfig, LabError> {
    let kind: ExperimentKind = args.experiment.parse()?;
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.experiment = kind;
    cfg.output_dir = args.out.clone();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.no_plots {
        cfg.emit_plots = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = load(&args).and_then(|cfg| run_experiment(&cfg));
    match result {
        Ok(bundle) => {
            println!("wrote {} artifacts to {}", bundle.artifacts.len() + 1, bundle.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
