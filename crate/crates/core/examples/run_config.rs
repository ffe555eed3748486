//! Runs any experiment from a JSON config through the library, the same path
//! the command-line tool takes.
//!
//! ```text
//! cargo run --release --example run_config -- configs/pde.json /tmp/pde-out
//! ```

use std::path::PathBuf;

use collapse_lab::{run_experiment, ExperimentConfig};

fn main() -> collapse_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = match args.next() {
        Some(path) => ExperimentConfig::from_file(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    cfg.output_dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("collapse-lab-run"));
    let bundle = run_experiment(&cfg)?;
    println!("config sha256 {}", cfg.config_hash());
    for a in &bundle.artifacts {
        println!("{:<4} {}", a.kind, a.path);
    }
    println!("manifest {}", bundle.manifest.display());
    Ok(())
}
