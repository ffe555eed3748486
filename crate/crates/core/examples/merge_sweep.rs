//! Attention dynamics under token merging at several fusion strengths,
//! read out near the onset of collapse.

use collapse_lab::metrics::{collapse_time, CollapseDefinition};
use collapse_lab::{init_tokens, run_dynamics, DynamicsConfig, InitDistribution, MergeConfig};

fn main() -> collapse_lab::Result<()> {
    let cfg = DynamicsConfig {
        layers: 16,
        ..Default::default()
    };
    let x0 = init_tokens(128, 32, InitDistribution::UniformSphere, 0)?;
    let readout = 7;
    println!("m     d_eff   entropy@{readout}  rank@{readout}  tau");
    for m in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let merge = MergeConfig::with_fusion(m);
        let run = run_dynamics(&x0, &cfg, Some(&merge), &[])?;
        let t = &run.traces[readout - 1];
        let d = run.traces.iter().map(|t| t.d_effective).sum::<f64>() / run.traces.len() as f64;
        let tau = collapse_time(&run.traces, 0.5, CollapseDefinition::EntropyBelow)?;
        println!(
            "{m:<4}  {d:<6.3}  {:<10.4}  {:<7.2}  {:.2}{}",
            t.entropy_normalized,
            t.effective_rank,
            tau.tau,
            if tau.censored { " (censored)" } else { "" }
        );
    }
    Ok(())
}
