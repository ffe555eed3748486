//! Wall-clock measurements of dense attention and of the merged pipeline.
//!
//! Times are medians over repetitions after one warmup run. Only relative
//! runtimes and scaling exponents are meaningful across machines.

use std::time::Instant;

use crate::dynamics::{init_tokens, merged_step, DynamicsConfig, InitDistribution, TokenMatrix};
use crate::error::{LabError, Result};
use crate::linalg::{matmul, matmul_transpose, parallel_enabled, row_softmax, Matrix};
use crate::merging::{build_merge_map, effective_downsampling, MergeConfig};
use crate::theory::linear_regression;

pub const MIN_BENCH_TOKENS: usize = 16;
pub const MIN_REPETITIONS: usize = 3;
pub const WARMUP_RUNS: usize = 1;

pub const CSV_HEADER: &str = "n_tokens,fusion_m,d_effective,wall_time_s,relative_runtime,speedup";

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeSample {
    pub n_tokens: usize,
    pub fusion_m: f64,
    /// Realized down-sampling factor of the first merge, 1 for plain attention.
    pub d: f64,
    /// Median seconds per repetition.
    pub wall_time: f64,
    pub repetitions: usize,
    pub warmup: usize,
    /// Merged over baseline median; 1 for plain attention.
    pub relative_runtime: f64,
    pub parallel: bool,
}

impl RuntimeSample {
    pub fn speedup(&self) -> f64 {
        1.0 / self.relative_runtime
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.6},{:.6}",
            self.n_tokens,
            self.fusion_m,
            self.d,
            self.wall_time,
            self.relative_runtime,
            self.speedup()
        )
    }
}

fn check_request(n: usize, repetitions: usize) -> Result<()> {
    if n < MIN_BENCH_TOKENS {
        return Err(LabError::invalid(format!("benchmarks need n >= {MIN_BENCH_TOKENS}, got {n}")));
    }
    if repetitions < MIN_REPETITIONS {
        return Err(LabError::invalid(format!(
            "benchmarks need at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let entries = n.checked_mul(n).ok_or(LabError::Resource { n, bytes: usize::MAX })?;
    let bytes = entries.saturating_mul(std::mem::size_of::<f64>());
    let mut probe: Vec<f64> = Vec::new();
    probe
        .try_reserve_exact(entries)
        .map_err(|_| LabError::Resource { n, bytes })?;
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time<T>(f: impl FnOnce() -> Result<T>) -> Result<(f64, T)> {
    let start = Instant::now();
    let out = f()?;
    Ok((start.elapsed().as_secs_f64(), out))
}

/// Similarity matrix, row softmax and value aggregation on `x`.
pub fn attention_step(x: &Matrix, alpha: f64) -> Result<Matrix> {
    let scores = matmul_transpose(x, x)?.scale(alpha);
    let a = row_softmax(&scores, 1.0)?;
    matmul(&a, x)
}

/// Median time of one dense attention step on `n` random unit tokens.
pub fn measure_attention_cost(n: usize, dim: usize, repetitions: usize, seed: u64) -> Result<RuntimeSample> {
    check_request(n, repetitions)?;
    let x = init_tokens(n, dim, InitDistribution::UniformSphere, seed)?;
    let alpha = DynamicsConfig::default().alpha;
    for _ in 0..WARMUP_RUNS {
        std::hint::black_box(attention_step(x.tokens(), alpha)?);
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let (t, out) = time(|| attention_step(x.tokens(), alpha))?;
        std::hint::black_box(out);
        times.push(t);
    }
    Ok(RuntimeSample {
        n_tokens: n,
        fusion_m: 0.0,
        d: 1.0,
        wall_time: median(times),
        repetitions,
        warmup: WARMUP_RUNS,
        relative_runtime: 1.0,
        parallel: parallel_enabled(),
    })
}

/// `layers` iterations of merge, attention over representatives and unmerge.
/// This is the computation the merged benchmark times.
pub fn merged_pipeline(x0: &TokenMatrix, cfg: &DynamicsConfig, merge: &MergeConfig, layers: usize) -> Result<TokenMatrix> {
    let mut x = x0.clone();
    for _ in 0..layers {
        let map = build_merge_map(&x, merge)?;
        x = merged_step(&x, &map, cfg)?;
    }
    Ok(x)
}

fn bench_config() -> DynamicsConfig {
    DynamicsConfig::default()
}

/// Times the merged pipeline at each fusion strength against the
/// `fusion_m = 0` baseline, interleaving repetitions so drift affects all
/// strengths alike.
pub fn measure_merge_sweep(
    n: usize,
    dim: usize,
    fusion_ms: &[f64],
    layers: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<RuntimeSample>> {
    check_request(n, repetitions)?;
    if layers == 0 {
        return Err(LabError::invalid("benchmark needs at least one layer"));
    }
    let x = init_tokens(n, dim, InitDistribution::UniformSphere, seed)?;
    let cfg = bench_config();
    let mut strengths = vec![0.0];
    strengths.extend_from_slice(fusion_ms);
    let merges: Vec<MergeConfig> = strengths.iter().map(|&m| MergeConfig::with_fusion(m)).collect();
    for m in &merges {
        m.validate()?;
    }
    let ds: Vec<f64> = merges
        .iter()
        .map(|m| build_merge_map(&x, m).map(|map| effective_downsampling(&map)))
        .collect::<Result<_>>()?;
    for m in &merges {
        for _ in 0..WARMUP_RUNS {
            std::hint::black_box(merged_pipeline(&x, &cfg, m, layers)?);
        }
    }
    let mut times = vec![Vec::with_capacity(repetitions); merges.len()];
    for _ in 0..repetitions {
        for (slot, m) in times.iter_mut().zip(&merges) {
            let (t, out) = time(|| merged_pipeline(&x, &cfg, m, layers))?;
            std::hint::black_box(out);
            slot.push(t);
        }
    }
    let medians: Vec<f64> = times.into_iter().map(median).collect();
    let baseline = medians[0];
    Ok(strengths
        .iter()
        .zip(&ds)
        .zip(&medians)
        .skip(1)
        .map(|((&m, &d), &t)| RuntimeSample {
            n_tokens: n,
            fusion_m: m,
            d,
            wall_time: t,
            repetitions,
            warmup: WARMUP_RUNS,
            relative_runtime: t / baseline,
            parallel: parallel_enabled(),
        })
        .collect())
}

/// Relative runtime of one fusion strength against its own baseline.
pub fn measure_merged_pipeline(
    n: usize,
    dim: usize,
    fusion_m: f64,
    layers: usize,
    repetitions: usize,
    seed: u64,
) -> Result<RuntimeSample> {
    let mut samples = measure_merge_sweep(n, dim, &[fusion_m], layers, repetitions, seed)?;
    Ok(samples.remove(0))
}

/// Log-log slope and R² of wall time against token count.
pub fn scaling_exponent(samples: &[RuntimeSample]) -> Result<(f64, f64)> {
    let xs: Vec<f64> = samples.iter().map(|s| (s.n_tokens as f64).ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.wall_time.ln()).collect();
    let (_, slope, r2) = linear_regression(&xs, &ys)?;
    Ok((slope, r2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_requests() {
        assert!(matches!(measure_attention_cost(8, 4, 3, 0), Err(LabError::InvalidInput(_))));
        assert!(matches!(measure_attention_cost(32, 4, 2, 0), Err(LabError::InvalidInput(_))));
    }

    #[test]
    fn huge_request_is_a_resource_error() {
        let err = check_request(usize::MAX / 4, 3).unwrap_err();
        assert!(matches!(err, LabError::Resource { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sample_reports_configuration() {
        let s = measure_attention_cost(32, 4, 3, 1).unwrap();
        assert_eq!((s.n_tokens, s.repetitions, s.warmup), (32, 3, 1));
        assert!(s.wall_time > 0.0);
        assert_eq!(s.csv_row().split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn timing_does_not_change_results() {
        let x = init_tokens(64, 8, InitDistribution::UniformSphere, 2).unwrap();
        let m = MergeConfig::with_fusion(0.7);
        let a = merged_pipeline(&x, &bench_config(), &m, 3).unwrap();
        let (_, b) = time(|| merged_pipeline(&x, &bench_config(), &m, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exponent_of_exact_quadratic() {
        let samples: Vec<RuntimeSample> = [256usize, 512, 1024]
            .iter()
            .map(|&n| RuntimeSample {
                n_tokens: n,
                fusion_m: 0.0,
                d: 1.0,
                wall_time: 1e-9 * (n * n) as f64,
                repetitions: 3,
                warmup: 1,
                relative_runtime: 1.0,
                parallel: false,
            })
            .collect();
        let (slope, r2) = scaling_exponent(&samples).unwrap();
        assert!((slope - 2.0).abs() < 1e-9 && r2 > 0.999_999);
    }
}
