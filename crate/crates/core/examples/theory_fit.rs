//! Collapse-law fits: the entropy law across fusion strengths on published
//! values, and the joint rank and entropy fits on simulated sweeps.

use collapse_lab::experiments::{run_scaling_sweep, ExperimentConfig};
use collapse_lab::theory::{entropy_law, fit_entropy_across_d, nominal_downsampling, rescaled_deviation};
use collapse_lab::{fit_constants, FitLaw, TheoryModel};

fn main() -> collapse_lab::Result<()> {
    // normalized entropies reported for m = 0.1, 0.5, 0.9
    let reported = [(0.1, 0.7239), (0.5, 0.8274), (0.9, 0.8734)];
    let pts: Vec<(f64, f64)> = reported.iter().map(|&(m, h)| (nominal_downsampling(m), h)).collect();
    let model = fit_entropy_across_d(&pts, 24.0, 1024)?;
    for m in [0.3, 0.7] {
        println!("entropy law at m = {m}: {:.4}", entropy_law(&model, 24.0, 1024, nominal_downsampling(m)));
    }

    let mut cfg = ExperimentConfig {
        n_tokens: 64,
        dim: 64,
        ..Default::default()
    };
    cfg.dynamics.alpha = 6.0;
    cfg.dynamics.layers = 50;
    cfg.scaling.fusion_m = vec![0.0, 0.5, 0.75];
    let sweep = run_scaling_sweep(&cfg)?;
    let ranks = sweep.family(cfg.n_tokens, |t| t.effective_rank);
    let entropies = sweep.family(cfg.n_tokens, |t| t.entropy_normalized);
    for (name, family, law) in [("rank", &ranks, FitLaw::RankExp), ("entropy", &entropies, FitLaw::EntropyLinear)] {
        let fit = fit_constants(family, law, &TheoryModel::default())?;
        println!(
            "{name} fit: R² {:.3}, residual-mean spread {:.3}, pooled SD {:.3}, balanced {}",
            fit.r_squared,
            fit.residual_mean_spread(),
            fit.pooled_residual_sd,
            fit.residuals_balanced()
        );
    }
    println!("largest entropy gap on layer / d: {:.3}", rescaled_deviation(&entropies)?);
    Ok(())
}
