//! Deep attention dynamics from uniform tokens: entropy, effective rank and
//! the mean direction per layer, then the interpolated collapse time.
//!
//! ```text
//! cargo run --release --example collapse
//! ```

use collapse_lab::metrics::{collapse_time, CollapseDefinition, DEFAULT_ENTROPY_THRESHOLD};
use collapse_lab::{init_tokens, run_dynamics, DynamicsConfig, InitDistribution};

fn main() -> collapse_lab::Result<()> {
    let cfg = DynamicsConfig::default();
    let x0 = init_tokens(256, 32, InitDistribution::UniformSphere, 0)?;
    let run = run_dynamics(&x0, &cfg, None, &[])?;

    println!("layer  entropy  eff_rank  |mean|");
    for t in run.traces.iter().step_by(4) {
        println!(
            "{:>5}  {:>7.4}  {:>8.2}  {:.4}",
            t.layer_index, t.entropy_normalized, t.effective_rank, t.mean_direction_norm
        );
    }
    let tau = collapse_time(&run.traces, DEFAULT_ENTROPY_THRESHOLD, CollapseDefinition::EntropyBelow)?;
    let rank_tau = collapse_time(&run.traces, 2.0, CollapseDefinition::EffectiveRankBelow)?;
    println!("entropy below {DEFAULT_ENTROPY_THRESHOLD} at layer {:.2}", tau.tau);
    println!("effective rank below 2 at layer {:.2}", rank_tau.tau);
    println!("final |mean| = {:.6}", run.final_tokens.mean_direction_norm());
    Ok(())
}
