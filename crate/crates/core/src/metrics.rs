//! Collapse metrics: singular-value entropy, effective rank, collapse time and
//! a k-nearest-neighbour differential entropy estimate for particles on the sphere.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::dynamics::LayerTrace;
use crate::error::{LabError, Result};
use crate::linalg::{singular_spectrum, Matrix, Spectrum};
use crate::meanfield::ParticleSystem;

/// Default collapse threshold on the normalized singular-value entropy.
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.5;
/// Default neighbour index for the kNN entropy estimator.
pub const DEFAULT_KNN_K: usize = 4;

/// Square attention matrix, flagged when its rows are probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMatrix {
    matrix: Matrix,
    row_stochastic: bool,
}

impl AttnMatrix {
    /// Wraps a row-stochastic matrix, checking the invariant.
    pub fn new(matrix: Matrix) -> Result<Self> {
        Self::check_square(&matrix)?;
        for (i, row) in matrix.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v < -1e-12) || (sum - 1.0).abs() > 1e-9 {
                return Err(LabError::invalid(format!(
                    "row {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(AttnMatrix {
            matrix,
            row_stochastic: true,
        })
    }

    /// Wraps a square matrix with no stochasticity guarantee (the linearized
    /// kernel may produce small negative entries).
    pub fn general(matrix: Matrix) -> Result<Self> {
        Self::check_square(&matrix)?;
        Ok(AttnMatrix {
            matrix,
            row_stochastic: false,
        })
    }

    pub(crate) fn from_softmax(matrix: Matrix) -> Self {
        AttnMatrix {
            matrix,
            row_stochastic: true,
        }
    }

    fn check_square(m: &Matrix) -> Result<()> {
        if m.rows() != m.cols() {
            return Err(LabError::invalid(format!(
                "attention matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(())
    }

    /// The `n x n` matrix with every entry `1/n`.
    pub fn uniform(n: usize) -> Self {
        Self::from_softmax(Matrix::filled(n, n, 1.0 / n as f64))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.row_stochastic
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }
}

/// Entropy and effective rank from one spectrum computation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    pub entropy_normalized: f64,
    pub effective_rank: f64,
    pub spectrum: Spectrum,
}

pub fn spectral_summary(a: &AttnMatrix) -> Result<SpectralSummary> {
    let spectrum = singular_spectrum(a.matrix())?;
    if spectrum.is_zero() {
        return Err(LabError::Degenerate {
            what: "all-zero attention matrix has no spectrum".into(),
            index: 0,
        });
    }
    let h = spectrum.entropy();
    let n = a.size();
    let entropy_normalized = if n > 1 { h / (n as f64).ln() } else { 0.0 };
    Ok(SpectralSummary {
        entropy_normalized,
        effective_rank: h.exp(),
        spectrum,
    })
}

/// Singular-value entropy divided by `ln N`, in `[0, 1]`.
pub fn sv_entropy_normalized(a: &AttnMatrix) -> Result<f64> {
    Ok(spectral_summary(a)?.entropy_normalized)
}

/// `exp` of the singular-value entropy, in `[1, N]`.
pub fn effective_rank(a: &AttnMatrix) -> Result<f64> {
    Ok(spectral_summary(a)?.effective_rank)
}

/// Mean Shannon entropy of the rows, normalized by `ln N`. Diagnostic only.
pub fn row_entropy_normalized(a: &AttnMatrix) -> f64 {
    let n = a.size();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = a
        .matrix()
        .iter_rows()
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / (n as f64 * (n as f64).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollapseDefinition {
    EffectiveRankBelow,
    EntropyBelow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseTime {
    /// Interpolated layer index of the first downward crossing.
    pub tau: f64,
    pub threshold: f64,
    pub definition: CollapseDefinition,
    /// Set when the metric never crossed; `tau` is then the last layer.
    pub censored: bool,
}

/// First interpolated crossing of `threshold` from above along `(layer, value)` pairs.
///
/// Returns `(tau, censored)`. A series that starts at or below the threshold
/// collapses at its first layer.
pub fn first_crossing(points: &[(f64, f64)], threshold: f64) -> (f64, bool) {
    let Some(&(l0, v0)) = points.first() else {
        return (0.0, true);
    };
    if v0 <= threshold {
        return (l0, false);
    }
    for w in points.windows(2) {
        let ((la, va), (lb, vb)) = (w[0], w[1]);
        if va > threshold && vb <= threshold {
            let frac = (va - threshold) / (va - vb);
            return (la + frac * (lb - la), false);
        }
    }
    (points.last().map_or(0.0, |p| p.0), true)
}

pub fn collapse_time(
    trace: &[LayerTrace],
    threshold: f64,
    definition: CollapseDefinition,
) -> Result<CollapseTime> {
    if trace.is_empty() {
        return Err(LabError::invalid("collapse time needs a nonempty trace"));
    }
    let points: Vec<(f64, f64)> = trace
        .iter()
        .map(|t| {
            let v = match definition {
                CollapseDefinition::EntropyBelow => t.entropy_normalized,
                CollapseDefinition::EffectiveRankBelow => t.effective_rank,
            };
            (t.layer_index as f64, v)
        })
        .collect();
    let (tau, censored) = first_crossing(&points, threshold);
    Ok(CollapseTime {
        tau,
        threshold,
        definition,
        censored,
    })
}

/// Kozachenko–Leonenko differential entropy (nats) of the particle cloud,
/// treating the unit sphere in `dim` dimensions as a `dim - 1` manifold with
/// geodesic distances.
///
/// Returns `f64::NEG_INFINITY` when coincident particles make some
/// neighbour distance zero (the Dirac limit).
pub fn particle_entropy_knn(p: &ParticleSystem, k: usize) -> Result<f64> {
    knn_entropy_on_sphere(p.positions(), k)
}

pub fn knn_entropy_on_sphere(points: &Matrix, k: usize) -> Result<f64> {
    let m = points.rows();
    if k == 0 || m <= k {
        return Err(LabError::invalid(format!(
            "kNN entropy needs more than k = {k} particles, got {m}"
        )));
    }
    let q = (points.cols() - 1) as f64;
    let mut log_sum = 0.0;
    let mut nearest = Vec::with_capacity(k + 1);
    for i in 0..m {
        let xi = points.row(i);
        nearest.clear();
        for j in 0..m {
            if j == i {
                continue;
            }
            let chord_sq: f64 = xi
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if nearest.len() < k {
                nearest.push(chord_sq);
                nearest.sort_by(f64::total_cmp);
            } else if chord_sq < nearest[k - 1] {
                nearest[k - 1] = chord_sq;
                nearest.sort_by(f64::total_cmp);
            }
        }
        let chord = nearest[k - 1].sqrt();
        let geodesic = 2.0 * (0.5 * chord).min(1.0).asin();
        if geodesic == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        log_sum += geodesic.ln();
    }
    let mf = m as f64;
    let log_unit_ball = 0.5 * q * std::f64::consts::PI.ln() - ln_gamma(0.5 * q + 1.0);
    Ok(digamma(mf) - digamma(k as f64) + log_unit_ball + q * log_sum / mf)
}

#[cfg(test)]
mod tests {
    use super::*;

    use proptest::prelude::*;

    fn summary(m: Matrix) -> SpectralSummary {
        spectral_summary(&AttnMatrix::new(m).unwrap()).unwrap()
    }

    #[test]
    fn uniform_matrix_is_rank_one() {
        let s = spectral_summary(&AttnMatrix::uniform(16)).unwrap();
        assert!(s.entropy_normalized.abs() < 1e-12);
        assert!((s.effective_rank - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_has_flat_spectrum() {
        let s = summary(Matrix::identity(12));
        assert!((s.entropy_normalized - 1.0).abs() < 1e-12);
        assert!((s.effective_rank - 12.0).abs() < 1e-9);
    }

    #[test]
    fn block_diagonal_uniform_blocks() {
        // k blocks of size b, each filled with 1/b: spectrum is k ones.
        let (k, b) = (3, 4);
        let n = k * b;
        let mut m = Matrix::zeros(n, n);
        for blk in 0..k {
            for i in 0..b {
                for j in 0..b {
                    m.set(blk * b + i, blk * b + j, 1.0 / b as f64);
                }
            }
        }
        let s = summary(m);
        assert!((s.effective_rank - k as f64).abs() < 1e-6);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let a = AttnMatrix::general(Matrix::zeros(3, 3)).unwrap();
        assert!(matches!(
            sv_entropy_normalized(&a).unwrap_err(),
            LabError::Degenerate { .. }
        ));
    }

    #[test]
    fn attn_matrix_checks_rows() {
        assert!(AttnMatrix::new(Matrix::filled(2, 2, 0.3)).is_err());
        assert!(AttnMatrix::new(Matrix::zeros(2, 3)).is_err());
        assert!(AttnMatrix::general(Matrix::filled(2, 2, -0.3)).is_ok());
    }

    #[test]
    fn row_entropy_of_uniform_and_identity() {
        assert!((row_entropy_normalized(&AttnMatrix::uniform(8)) - 1.0).abs() < 1e-12);
        let id = AttnMatrix::new(Matrix::identity(8)).unwrap();
        assert_eq!(row_entropy_normalized(&id), 0.0);
    }

    #[test]
    fn crossing_interpolates() {
        let (tau, censored) = first_crossing(&[(0.0, 0.9), (1.0, 0.4)], 0.65);
        assert!(!censored);
        assert!((tau - 0.5).abs() < 1e-12);
    }

    #[test]
    fn crossing_censored_when_never_below() {
        let pts: Vec<(f64, f64)> = (0..5).map(|l| (l as f64, 0.8)).collect();
        let (tau, censored) = first_crossing(&pts, 0.5);
        assert!(censored);
        assert_eq!(tau, 4.0);
    }

    #[test]
    fn knn_rejects_too_few_particles() {
        let m = Matrix::identity(3);
        assert!(knn_entropy_on_sphere(&m, 3).is_err());
        assert!(knn_entropy_on_sphere(&m, 0).is_err());
    }

    #[test]
    fn entropy_matches_compensated_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                let r: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let a = AttnMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap();
        let s = spectral_summary(&a).unwrap();
        // Neumaier-compensated sums over the spectrum
        let neumaier = |xs: &mut dyn Iterator<Item = f64>| {
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for x in xs {
                let t = sum + x;
                comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
                sum = t;
            }
            sum + comp
        };
        let total = neumaier(&mut s.spectrum.values.iter().copied());
        let h = -neumaier(&mut s.spectrum.values.iter().filter(|&&v| v > 0.0).map(|&v| {
            let p = v / total;
            p * p.ln()
        }));
        assert!((s.entropy_normalized - h / 8f64.ln()).abs() < 1e-8);
        assert!((s.effective_rank - h.exp()).abs() < 1e-9);
    }

    #[test]
    fn uniform_sphere_knn_entropy_is_log_area() {
        let x = crate::dynamics::init_tokens(2000, 3, crate::dynamics::InitDistribution::UniformSphere, 3).unwrap();
        let h = knn_entropy_on_sphere(x.tokens(), DEFAULT_KNN_K).unwrap();
        let exact = (4.0 * std::f64::consts::PI).ln();
        assert!((h - exact).abs() < 0.15, "{h} vs {exact}");
    }

    #[test]
    fn knn_entropy_decreases_along_concentration() {
        use crate::meanfield::{run_pde, ParticleSystem};
        let x = crate::dynamics::init_tokens(500, 3, crate::dynamics::InitDistribution::UniformSphere, 4).unwrap();
        let p = ParticleSystem::from_tokens(&x, 1.0, 0.02).unwrap();
        let trace = run_pde(&p, 6.0, 1.0, 10).unwrap();
        for w in trace.entropies.windows(2) {
            assert!(w[1] <= w[0] + 0.05, "{} -> {}", w[0], w[1]);
        }
        assert!(trace.entropies.last().unwrap() < &(trace.entropies[0] - 1.0));
    }

    #[test]
    fn knn_dirac_diverges() {
        let m = Matrix::from_rows(&vec![vec![0.0, 0.0, 1.0]; 10]).unwrap();
        assert_eq!(knn_entropy_on_sphere(&m, 4).unwrap(), f64::NEG_INFINITY);
    }

    fn stochastic(n: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(0.001f64..1.0, n * n).prop_map(move |d| {
            let rows: Vec<Vec<f64>> = d
                .chunks(n)
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                })
                .collect();
            Matrix::from_rows(&rows).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rank_bounds_and_consistency(m in stochastic(7)) {
            let s = spectral_summary(&AttnMatrix::new(m).unwrap()).unwrap();
            prop_assert!(s.effective_rank >= 1.0 - 1e-12 && s.effective_rank <= 7.0 + 1e-9);
            prop_assert!((s.effective_rank - (s.entropy_normalized * 7f64.ln()).exp()).abs() < 1e-9);
        }

        #[test]
        fn entropy_is_permutation_invariant(m in stochastic(6), order in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
            let h = sv_entropy_normalized(&AttnMatrix::new(m.clone()).unwrap()).unwrap();
            let rows = m.select_rows(&order);
            let permuted = rows.transpose().select_rows(&order).transpose();
            let hp = sv_entropy_normalized(&AttnMatrix::new(permuted).unwrap()).unwrap();
            prop_assert!((h - hp).abs() < 1e-10);
        }
    }
}
