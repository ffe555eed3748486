//! Discrete attention layers against the particle ODE started from the same
//! tokens. The gap shrinks quadratically with alpha.

use collapse_lab::{compare_discrete_continuum, init_tokens, DynamicsConfig, InitDistribution};

fn main() -> collapse_lab::Result<()> {
    let x0 = init_tokens(128, 8, InitDistribution::UniformSphere, 5)?;
    let mut prev: Option<f64> = None;
    for alpha in [0.2, 0.1, 0.05, 0.025] {
        let cfg = DynamicsConfig {
            alpha,
            residual_weight: 0.0,
            ..Default::default()
        };
        let gap = compare_discrete_continuum(&x0, &cfg, 50)?;
        let shrink = prev.map(|p| format!("  shrink {:.2}", p / gap)).unwrap_or_default();
        println!("alpha {alpha:<6} max geodesic gap after 50 steps {gap:.3e}{shrink}");
        prev = Some(gap);
    }
    Ok(())
}
