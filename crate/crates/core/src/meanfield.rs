//! Particle discretization of the mean-field flow on the sphere.
//!
//! Particles move along `v_i = kappa (m - ⟨x_i, m⟩ x_i)`, the tangential
//! projection of the empirical mean `m`. That direction ascends the alignment
//! energy `(kappa / 2) ‖m‖²`, so the cloud concentrates toward a Dirac mass.
//! Merging enters only through `kappa / d`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{attention_exact, gaussian_vector, DynamicsConfig, TokenMatrix};
use crate::error::{LabError, Result};
use crate::linalg::{dot, matmul, norm, Matrix};
use crate::metrics::{knn_entropy_on_sphere, DEFAULT_KNN_K};

/// Upper bound on `dt * kappa` for the explicit step.
pub const STABILITY_LIMIT: f64 = 0.5;
/// Largest alpha accepted by [`compare_discrete_continuum`].
pub const CONTINUUM_MAX_ALPHA: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct ParticleSystem {
    positions: Matrix,
    kappa: f64,
    time: f64,
    dt: f64,
    noise_sigma: f64,
    rng: ChaCha8Rng,
}

impl ParticleSystem {
    /// `positions` must have unit rows; `kappa ≥ 0`, `dt > 0`.
    pub fn new(positions: Matrix, kappa: f64, dt: f64) -> Result<Self> {
        let tokens = TokenMatrix::new(positions)?;
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(LabError::invalid(format!("kappa must be nonnegative, got {kappa}")));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(LabError::invalid(format!("dt must be positive, got {dt}")));
        }
        Ok(ParticleSystem {
            positions: tokens.into_matrix(),
            kappa,
            time: 0.0,
            dt,
            noise_sigma: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn from_tokens(x: &TokenMatrix, kappa: f64, dt: f64) -> Result<Self> {
        Self::new(x.tokens().clone(), kappa, dt)
    }

    /// Adds isotropic tangential noise of magnitude `sigma` per unit time.
    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(LabError::invalid(format!("noise sigma must be nonnegative, got {sigma}")));
        }
        self.noise_sigma = sigma;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self)
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.cols()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for row in self.positions.iter_rows() {
            m.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn mean_norm(&self) -> f64 {
        norm(&self.mean())
    }

    /// `(kappa / 2M²) Σ_ij ⟨x_i, x_j⟩ = (kappa / 2) ‖m‖²`.
    pub fn interaction_energy(&self) -> f64 {
        let m = self.mean();
        0.5 * self.kappa * dot(&m, &m)
    }
}

/// `kappa (m - ⟨x_i, m⟩ x_i)` for every particle, one row each.
pub fn drift_field(p: &ParticleSystem) -> Matrix {
    drift_with_kappa(&p.positions, &p.mean(), p.kappa)
}

fn drift_with_kappa(positions: &Matrix, m: &[f64], kappa: f64) -> Matrix {
    let mut out = Matrix::zeros(positions.rows(), positions.cols());
    for i in 0..positions.rows() {
        let x = positions.row(i);
        let proj = dot(x, m);
        for ((o, &mj), &xj) in out.row_mut(i).iter_mut().zip(m).zip(x) {
            *o = kappa * (mj - proj * xj);
        }
    }
    out
}

/// `x_i ← normalize(x_i + dt v_i)`, plus optional tangential noise.
pub fn step_euler_projected(p: &ParticleSystem) -> Result<ParticleSystem> {
    if p.dt * p.kappa > STABILITY_LIMIT {
        return Err(LabError::invalid(format!(
            "dt * kappa = {} exceeds the stability limit {STABILITY_LIMIT}",
            p.dt * p.kappa
        )));
    }
    let mut next = p.clone();
    let v = drift_field(p);
    let noise_scale = p.noise_sigma * p.dt.sqrt();
    for i in 0..p.len() {
        let x = p.positions.row(i);
        let mut y: Vec<f64> = x.iter().zip(v.row(i)).map(|(a, b)| a + p.dt * b).collect();
        if noise_scale > 0.0 {
            let xi = gaussian_vector(&mut next.rng, p.dim());
            let radial = dot(&xi, x);
            for ((yj, &nj), &xj) in y.iter_mut().zip(&xi).zip(x) {
                *yj += noise_scale * (nj - radial * xj);
            }
        }
        let ny = norm(&y);
        if ny == 0.0 {
            return Err(LabError::Degenerate {
                what: "particle step reached the origin".into(),
                index: i,
            });
        }
        next.positions
            .row_mut(i)
            .iter_mut()
            .zip(&y)
            .for_each(|(o, &v)| *o = v / ny);
    }
    next.time += p.dt;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PdeTrace {
    pub times: Vec<f64>,
    pub mean_norms: Vec<f64>,
    /// `1 - ‖m‖²`, the mean squared distance to the centroid on the sphere.
    pub variances: Vec<f64>,
    /// kNN differential entropy in nats; `-inf` once particles coincide.
    pub entropies: Vec<f64>,
}

impl PdeTrace {
    fn record(&mut self, p: &ParticleSystem) -> Result<()> {
        let m = p.mean_norm();
        self.times.push(p.time);
        self.mean_norms.push(m);
        self.variances.push(1.0 - m * m);
        self.entropies.push(knn_entropy_on_sphere(&p.positions, DEFAULT_KNN_K)?);
        Ok(())
    }

    /// Interpolated first time at which the mean norm reaches `level`.
    pub fn time_to_mean_norm(&self, level: f64) -> Option<f64> {
        if self.mean_norms.first().is_some_and(|&m| m >= level) {
            return self.times.first().copied();
        }
        self.mean_norms.windows(2).zip(self.times.windows(2)).find_map(|(m, t)| {
            (m[0] < level && m[1] >= level).then(|| t[0] + (level - m[0]) / (m[1] - m[0]) * (t[1] - t[0]))
        })
    }
}

/// Integrates to `t_end` with `kappa / d` and records every `record_every`
/// steps, plus the initial and final states.
pub fn run_pde(p0: &ParticleSystem, t_end: f64, downsampling_d: f64, record_every: usize) -> Result<PdeTrace> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(LabError::invalid(format!("t_end must be positive, got {t_end}")));
    }
    if !(downsampling_d >= 1.0) || !downsampling_d.is_finite() {
        return Err(LabError::invalid(format!("downsampling d must be >= 1, got {downsampling_d}")));
    }
    if record_every == 0 {
        return Err(LabError::invalid("record_every must be positive"));
    }
    let mut p = p0.clone();
    p.kappa = p0.kappa / downsampling_d;
    let steps = (t_end / p.dt).round().max(1.0) as usize;
    let mut trace = PdeTrace::default();
    trace.record(&p)?;
    for s in 1..=steps {
        p = step_euler_projected(&p)?;
        if s % record_every == 0 || s == steps {
            trace.record(&p)?;
        }
    }
    Ok(trace)
}

fn geodesic(a: &[f64], b: &[f64]) -> f64 {
    let chord = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    2.0 * (0.5 * chord).min(1.0).asin()
}

/// Runs `steps` discrete layers and the particle ODE from the same tokens and
/// returns the largest per-token geodesic distance between the two.
///
/// A discrete layer is the time-matched increment
/// `x ← normalize(x + (alpha / N) A x)` with exact softmax `A`; the ODE uses
/// `kappa = alpha` and `dt = 1 / N`. Both freeze at `alpha = 0`, and the
/// kernel's deviation from uniform makes the gap `O(alpha² steps / N)`.
pub fn compare_discrete_continuum(x0: &TokenMatrix, cfg: &DynamicsConfig, steps: usize) -> Result<f64> {
    cfg.validate()?;
    if cfg.alpha > CONTINUUM_MAX_ALPHA {
        return Err(LabError::invalid(format!(
            "continuum comparison needs alpha <= {CONTINUUM_MAX_ALPHA}, got {}",
            cfg.alpha
        )));
    }
    if !cfg.renormalize_each_layer {
        return Err(LabError::invalid("continuum comparison needs per-layer renormalization"));
    }
    let n = x0.n();
    let dt = 1.0 / n as f64;
    let mut discrete = x0.clone();
    let mut particles = ParticleSystem::from_tokens(x0, cfg.alpha, dt)?;
    for _ in 0..steps {
        let a = attention_exact(&discrete, cfg)?;
        let ax = matmul(a.matrix(), discrete.tokens())?;
        let scale = cfg.alpha * dt;
        let data = discrete
            .tokens()
            .as_slice()
            .iter()
            .zip(ax.as_slice())
            .map(|(x, m)| x + scale * m)
            .collect();
        discrete = TokenMatrix::normalized(Matrix::new(n, x0.dim(), data)?)?;
        particles = step_euler_projected(&particles)?;
    }
    Ok((0..n)
        .map(|i| geodesic(discrete.tokens().row(i), particles.positions().row(i)))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{init_tokens, InitDistribution};

    fn particles(m: usize, dim: usize, kappa: f64, dt: f64, seed: u64) -> ParticleSystem {
        let x = init_tokens(m, dim, InitDistribution::UniformSphere, seed).unwrap();
        ParticleSystem::from_tokens(&x, kappa, dt).unwrap()
    }

    fn dirac(m: usize) -> ParticleSystem {
        let x = init_tokens(m, 3, InitDistribution::GaussianClusters { k: 1, spread: 0.0 }, 2).unwrap();
        ParticleSystem::from_tokens(&x, 1.0, 0.1).unwrap()
    }

    #[test]
    fn rejects_invalid_parameters() {
        let m = Matrix::identity(3);
        assert!(ParticleSystem::new(m.clone(), -1.0, 0.1).is_err());
        assert!(ParticleSystem::new(m.clone(), 1.0, 0.0).is_err());
        assert!(ParticleSystem::new(Matrix::filled(3, 3, 1.0), 1.0, 0.1).is_err());
        assert!(step_euler_projected(&ParticleSystem::new(m, 10.0, 0.1).unwrap()).is_err());
    }

    #[test]
    fn dirac_has_zero_drift_and_is_fixed() {
        let p = dirac(6);
        assert!(drift_field(&p).as_slice().iter().all(|v| v.abs() < 1e-15));
        let q = step_euler_projected(&p).unwrap();
        assert!(q.positions().max_abs_diff(p.positions()) < 1e-15);
        assert!((q.time() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn antipodal_pair_has_zero_drift() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, -1.0, 0.0]]).unwrap();
        let p = ParticleSystem::new(m, 1.0, 0.1).unwrap();
        assert!(drift_field(&p).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drift_is_tangent() {
        let p = particles(40, 6, 2.0, 0.01, 3);
        let v = drift_field(&p);
        for i in 0..40 {
            let vi = v.row(i);
            assert!(dot(vi, p.positions().row(i)).abs() <= 1e-9 * norm(vi).max(1e-300));
        }
    }

    #[test]
    fn step_is_lipschitz() {
        let p = particles(20, 4, 1.5, 1e-3, 4);
        let q = step_euler_projected(&p).unwrap();
        for i in 0..20 {
            let d: f64 = norm(&p.positions().row(i).iter().zip(q.positions().row(i)).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(d <= 2.0 * p.dt() * p.kappa());
        }
    }

    fn run_to(p: &ParticleSystem, dt: f64, t: f64) -> Matrix {
        let mut q = ParticleSystem::new(p.positions().clone(), p.kappa(), dt).unwrap();
        for _ in 0..(t / dt).round() as usize {
            q = step_euler_projected(&q).unwrap();
        }
        q.positions().clone()
    }

    #[test]
    fn euler_converges_at_first_order() {
        let p = particles(16, 4, 1.0, 0.1, 5);
        let t = 1.0;
        let reference = run_to(&p, 0.1 / 8.0, t);
        let e1 = run_to(&p, 0.1, t).max_abs_diff(&reference);
        let e2 = run_to(&p, 0.05, t).max_abs_diff(&reference);
        let ratio = e1 / e2;
        // with a dt/8 reference the error ratio tends to (1 - 1/8)/(1/2 - 1/8) ≈ 2.33
        assert!((1.6..3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_kappa_trace_is_constant() {
        let p = particles(30, 3, 0.0, 0.1, 6);
        let tr = run_pde(&p, 1.0, 1.0, 2).unwrap();
        assert!(tr.mean_norms.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
        assert!(tr.entropies.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9));
        assert_eq!(tr.times.len(), 6);
    }

    #[test]
    fn merging_slows_concentration_by_d() {
        let p = particles(200, 3, 1.0, 0.01, 7);
        let t1 = run_pde(&p, 20.0, 1.0, 5).unwrap().time_to_mean_norm(0.99).unwrap();
        let t2 = run_pde(&p, 40.0, 2.0, 5).unwrap().time_to_mean_norm(0.99).unwrap();
        let r = t2 / t1;
        assert!((1.6..=2.4).contains(&r), "ratio {r}");
    }

    #[test]
    fn variance_decreases_and_norm_reaches_one() {
        let p = particles(300, 3, 1.0, 0.02, 8);
        let tr = run_pde(&p, 15.0, 1.0, 5).unwrap();
        assert!(tr.variances.windows(2).skip(2).all(|w| w[1] < w[0]));
        assert!(*tr.mean_norms.last().unwrap() >= 0.99);
    }

    #[test]
    fn energy_is_nondecreasing() {
        let mut p = particles(50, 5, 1.0, 0.05, 9);
        let mut e = p.interaction_energy();
        for _ in 0..100 {
            p = step_euler_projected(&p).unwrap();
            let next = p.interaction_energy();
            assert!(next >= e - 1e-8);
            e = next;
        }
    }

    #[test]
    fn noise_keeps_particles_on_sphere() {
        let p = particles(20, 4, 1.0, 0.05, 10).with_noise(0.3, 1).unwrap();
        let mut q = p;
        for _ in 0..50 {
            q = step_euler_projected(&q).unwrap();
        }
        for r in q.positions().iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn drift_matches_finite_difference_gradient() {
        // E = (alpha / 2M²) ΣΣ⟨x_i, x_j⟩ has gradient (alpha / M) m in x_i;
        // M times its tangential projection is the drift.
        let p = particles(5, 4, 1.3, 0.1, 12);
        let (m, dim, alpha) = (5, 4, 1.3);
        let energy = |pos: &Matrix| {
            let mut total = 0.0;
            for i in 0..m {
                for j in 0..m {
                    total += dot(pos.row(i), pos.row(j));
                }
            }
            alpha / (2.0 * (m * m) as f64) * total
        };
        let v = drift_field(&p);
        let h = 1e-6;
        for i in 0..m {
            let mut grad = vec![0.0; dim];
            for (k, g) in grad.iter_mut().enumerate() {
                let mut plus = p.positions().clone();
                let mut minus = p.positions().clone();
                plus.set(i, k, plus.get(i, k) + h);
                minus.set(i, k, minus.get(i, k) - h);
                *g = (energy(&plus) - energy(&minus)) / (2.0 * h);
            }
            let x = p.positions().row(i);
            let radial = dot(&grad, x);
            for k in 0..dim {
                let projected = m as f64 * (grad[k] - radial * x[k]);
                assert!((projected - v.get(i, k)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn continuum_gap_is_quadratic_in_alpha() {
        let x = init_tokens(128, 16, InitDistribution::UniformSphere, 13).unwrap();
        let dev = |alpha: f64| {
            let cfg = DynamicsConfig {
                alpha,
                residual_weight: 0.0,
                ..Default::default()
            };
            compare_discrete_continuum(&x, &cfg, 50).unwrap()
        };
        let (big, small) = (dev(0.1), dev(0.05));
        assert!(small > 0.0 && big / small >= 3.0, "{big} / {small}");
    }

    #[test]
    fn continuum_trivial_cases() {
        let x = init_tokens(16, 4, InitDistribution::UniformSphere, 11).unwrap();
        let cfg = DynamicsConfig {
            alpha: 0.1,
            residual_weight: 0.0,
            ..Default::default()
        };
        assert_eq!(compare_discrete_continuum(&x, &cfg, 0).unwrap(), 0.0);
        let frozen = DynamicsConfig { alpha: 0.0, ..cfg.clone() };
        assert!(compare_discrete_continuum(&x, &frozen, 10).unwrap() < 1e-12);
        let large = DynamicsConfig { alpha: 1.0, ..cfg };
        assert!(compare_discrete_continuum(&x, &large, 1).is_err());
    }
}
