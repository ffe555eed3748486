//! Kozachenko-Leonenko entropy of points on the sphere: close to the log of
//! the sphere's area for uniform samples, far lower for concentrated ones.

use collapse_lab::metrics::knn_entropy_on_sphere;
use collapse_lab::{init_tokens, InitDistribution};

fn main() -> collapse_lab::Result<()> {
    let uniform_reference = (4.0 * std::f64::consts::PI).ln();
    for n in [250, 1000, 4000] {
        let x = init_tokens(n, 3, InitDistribution::UniformSphere, 1)?;
        let h = knn_entropy_on_sphere(x.tokens(), 4)?;
        println!("uniform, M = {n:<5} H = {h:.4}  (ln 4pi = {uniform_reference:.4})");
    }
    for spread in [0.5, 0.1, 0.02] {
        let x = init_tokens(1000, 3, InitDistribution::GaussianClusters { k: 1, spread }, 1)?;
        let h = knn_entropy_on_sphere(x.tokens(), 4)?;
        println!("one cluster, spread {spread:<5} H = {h:.4}");
    }
    Ok(())
}
