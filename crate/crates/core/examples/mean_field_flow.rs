//! Particle discretization of the concentrating flow on the sphere. Dividing
//! the mobility by d stretches the time to concentrate by d.

use collapse_lab::{init_tokens, run_pde, InitDistribution, ParticleSystem};

fn main() -> collapse_lab::Result<()> {
    let x0 = init_tokens(1000, 3, InitDistribution::UniformSphere, 0)?;
    let p0 = ParticleSystem::from_tokens(&x0, 1.0, 0.01)?;
    println!("|mean| energy at t = 0: {:.4} {:.6}", p0.mean_norm(), p0.interaction_energy());

    let mut base = None;
    for d in [1.0, 2.0, 4.0] {
        let trace = run_pde(&p0, 10.0 * d, d, 10)?;
        let t99 = trace.time_to_mean_norm(0.99).expect("concentrates within the horizon");
        let ratio = t99 / *base.get_or_insert(t99);
        println!(
            "d = {d}: |mean| reaches 0.99 at t = {t99:.3} (ratio {ratio:.3}), final variance {:.2e}",
            trace.variances.last().unwrap()
        );
    }
    Ok(())
}
