//! Wall time of one dense attention step against token count, and the merged
//! pipeline's runtime relative to the unmerged one.
//!
//! Set `COLLAPSE_LAB_THREADS=4` to time the row-parallel kernels.

use collapse_lab::bench::{measure_attention_cost, measure_merge_sweep, scaling_exponent};
use collapse_lab::experiments::configure_threads_from_env;

fn main() -> collapse_lab::Result<()> {
    configure_threads_from_env();
    let samples = [256, 512, 1024, 2048]
        .iter()
        .map(|&n| measure_attention_cost(n, 64, 5, 0))
        .collect::<collapse_lab::Result<Vec<_>>>()?;
    for s in &samples {
        println!("N = {:<5} median {:.4} s", s.n_tokens, s.wall_time);
    }
    let (slope, r2) = scaling_exponent(&samples)?;
    println!("log-log slope {slope:.3} (R² {r2:.4})");

    println!("m     d       relative  speedup");
    for s in measure_merge_sweep(2048, 64, &[0.3, 0.5, 0.7, 0.9], 2, 5, 0)? {
        println!("{:<4}  {:<6.3}  {:<8.3}  {:.2}x", s.fusion_m, s.d, s.relative_runtime, s.speedup());
    }
    Ok(())
}
