//! Attention heatmaps (PGM) at a few depths and an entropy curve (SVG),
//! written to a directory given as the first argument.

use std::path::PathBuf;

use collapse_lab::experiments::{emit_heatmap, emit_line_plot, LinePlot, Series};
use collapse_lab::{init_tokens, run_dynamics, DynamicsConfig, InitDistribution};

fn main() -> collapse_lab::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("collapse-heatmaps"));
    std::fs::create_dir_all(&dir).map_err(|e| collapse_lab::LabError::Io { path: dir.clone(), source: e })?;

    let cfg = DynamicsConfig {
        layers: 12,
        ..Default::default()
    };
    let x0 = init_tokens(96, 16, InitDistribution::GaussianClusters { k: 3, spread: 0.4 }, 2)?;
    let run = run_dynamics(&x0, &cfg, None, &[0, 3, 6, 11])?;
    for t in &run.traces {
        if let Some(a) = &t.attention_snapshot {
            let path = dir.join(format!("attention_{:02}.pgm", t.layer_index));
            emit_heatmap(a, &path)?;
            println!("wrote {}", path.display());
        }
    }
    let plot = LinePlot {
        title: "Singular-value entropy".into(),
        x_label: "layer".into(),
        y_label: "entropy / ln N".into(),
        series: vec![Series::new(
            "clustered tokens",
            run.traces.iter().map(|t| (t.layer_index as f64, t.entropy_normalized)).collect(),
        )],
    };
    let path = dir.join("entropy.svg");
    emit_line_plot(&plot, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
