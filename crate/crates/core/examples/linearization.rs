//! Exact softmax attention against its first-order expansion around the
//! uniform kernel. Halving alpha should cut the gap by about four.

use collapse_lab::{attention_exact, attention_linearized, init_tokens, AttentionMode, DynamicsConfig, InitDistribution};

fn main() -> collapse_lab::Result<()> {
    let x = init_tokens(64, 8, InitDistribution::UniformSphere, 11)?;
    let mut prev: Option<f64> = None;
    println!("alpha     max|exact - linear|  shrink");
    for alpha in [0.4, 0.2, 0.1, 0.05, 0.025] {
        let cfg = DynamicsConfig {
            alpha,
            mode: AttentionMode::ExactSoftmax,
            ..Default::default()
        };
        let exact = attention_exact(&x, &cfg)?;
        let linear = attention_linearized(&x, &cfg)?;
        let gap = exact.matrix().max_abs_diff(linear.matrix());
        match prev {
            Some(p) => println!("{alpha:<8}  {gap:.4e}           {:.3}", p / gap),
            None => println!("{alpha:<8}  {gap:.4e}"),
        }
        prev = Some(gap);
    }
    Ok(())
}
