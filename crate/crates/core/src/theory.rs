//! Closed-form collapse laws and least-squares fits of their constants.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Fraction of leading layers treated as transient and left out of fits.
pub const TRANSIENT_FRACTION: f64 = 0.1;
/// Rank fits keep points where the fitted `bound - r` exceeds this share of `C`.
pub const RANK_WINDOW_FRACTION: f64 = 0.05;
/// Entropy values at or below this floor count as the collapsed tail.
pub const ENTROPY_FLOOR: f64 = 1e-6;
const MIN_LAYERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryModel {
    /// Dominant subspace dimension.
    pub r: f64,
    pub c: f64,
    pub alpha_fit: f64,
    pub h0: f64,
    pub k: f64,
}

impl Default for TheoryModel {
    fn default() -> Self {
        TheoryModel {
            r: 1.0,
            c: 1.0,
            alpha_fit: 1.0,
            h0: 1.0,
            k: 1.0,
        }
    }
}

/// `r + C exp(-alpha l / (d N))`.
pub fn rank_bound(model: &TheoryModel, layer: f64, n_tokens: usize, d: f64) -> f64 {
    if d.is_infinite() {
        return model.r + model.c;
    }
    model.r + model.c * (-model.alpha_fit * layer / (d * n_tokens as f64)).exp()
}

/// `max(H0 - k L / (N d), 0)`.
pub fn entropy_law(model: &TheoryModel, layers: f64, n_tokens: usize, d: f64) -> f64 {
    (model.h0 - model.k * layers / (n_tokens as f64 * d)).max(0.0)
}

/// Collapse time after merging at down-sampling factor `d`.
pub fn tau_prediction(tau_base: f64, d: f64) -> f64 {
    d * tau_base
}

/// Pairwise-interaction count `(D T / d)²` of dense attention over `views`
/// views of `tokens_per_view` tokens.
pub fn complexity_model(tokens_per_view: usize, views: usize, d: f64) -> f64 {
    let t = tokens_per_view as f64 * views as f64 / d;
    t * t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitLaw {
    RankExp,
    EntropyLinear,
}

/// One metric-versus-layer series at down-sampling factor `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSeries {
    pub d: f64,
    pub n_tokens: usize,
    /// `(layer, value)` pairs in layer order.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub law: FitLaw,
    pub parameters: TheoryModel,
    /// `1 - SSE/SST` over the fit window, in the space the fit is linear in.
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    /// Down-sampling factor of the series each residual came from.
    pub residual_d: Vec<f64>,
    /// `(d, mean residual)` per series.
    pub per_d_mean_residual: Vec<(f64, f64)>,
    pub pooled_residual_sd: f64,
}

impl FitReport {
    /// Largest gap between per-`d` mean residuals.
    pub fn residual_mean_spread(&self) -> f64 {
        let means = self.per_d_mean_residual.iter().map(|p| p.1);
        let max = means.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = means.fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Whether the per-`d` mean residuals stay within two pooled SDs of each other.
    pub fn residuals_balanced(&self) -> bool {
        self.residual_mean_spread() < 2.0 * self.pooled_residual_sd
    }
}

struct Line {
    intercept: f64,
    slope: f64,
    r_squared: f64,
    residuals: Vec<f64>,
}

fn ols(xs: &[f64], ys: &[f64]) -> Result<Line> {
    let n = xs.len();
    if n < 2 {
        return Err(LabError::FitFailure(format!("need at least 2 points, got {n}")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sst: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(LabError::FitFailure("abscissa has no spread".into()));
    }
    if sst <= f64::EPSILON * nf * my.abs().max(1.0) {
        return Err(LabError::FitFailure(format!(
            "series is constant ({n} points at {my})"
        )));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    let sse: f64 = residuals.iter().map(|r| r * r).sum();
    Ok(Line {
        intercept,
        slope,
        r_squared: 1.0 - sse / sst,
        residuals,
    })
}

/// Ordinary least squares `y = a + b x`, returning `(a, b, R²)`.
pub fn linear_regression(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let l = ols(xs, ys)?;
    Ok((l.intercept, l.slope, l.r_squared))
}

struct Point {
    d: f64,
    s: f64,
    value: f64,
}

fn windowed_points(family: &[TraceSeries], law: FitLaw, floor: f64) -> Result<Vec<Point>> {
    let mut distinct: Vec<f64> = family.iter().map(|s| s.d).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(LabError::invalid("fit needs at least two distinct d values"));
    }
    let mut out = Vec::new();
    for series in family {
        if series.points.len() < MIN_LAYERS {
            return Err(LabError::invalid(format!(
                "series at d = {} has {} layers, need {MIN_LAYERS}",
                series.d,
                series.points.len()
            )));
        }
        let last_layer = series.points.last().map_or(0.0, |p| p.0);
        let first_layer = series.points[0].0;
        let cutoff = first_layer + TRANSIENT_FRACTION * (last_layer - first_layer);
        let scale = series.d * series.n_tokens as f64;
        let peak_excess = series
            .points
            .iter()
            .filter(|p| p.0 >= cutoff)
            .map(|p| p.1 - floor)
            .fold(0.0, f64::max);
        for &(layer, value) in &series.points {
            if layer < cutoff {
                continue;
            }
            let collapsed = match law {
                FitLaw::RankExp => value - floor <= RANK_WINDOW_FRACTION * peak_excess,
                FitLaw::EntropyLinear => value <= ENTROPY_FLOOR,
            };
            if collapsed {
                break;
            }
            out.push(Point {
                d: series.d,
                s: layer / scale,
                value,
            });
        }
    }
    Ok(out)
}

fn residual_summary(points: &[Point], residuals: &[f64]) -> (Vec<(f64, f64)>, f64) {
    let mut per_d: Vec<(f64, f64, usize)> = Vec::new();
    for (p, r) in points.iter().zip(residuals) {
        match per_d.iter_mut().find(|e| e.0 == p.d) {
            Some(e) => {
                e.1 += r;
                e.2 += 1;
            }
            None => per_d.push((p.d, *r, 1)),
        }
    }
    let means: Vec<(f64, f64)> = per_d.iter().map(|&(d, s, c)| (d, s / c as f64)).collect();
    let ss: f64 = points
        .iter()
        .zip(residuals)
        .map(|(p, r)| {
            let m = means.iter().find(|e| e.0 == p.d).map_or(0.0, |e| e.1);
            (r - m) * (r - m)
        })
        .sum();
    let dof = residuals.len().saturating_sub(means.len()).max(1);
    (means, (ss / dof as f64).sqrt())
}

/// Fits one parameter set jointly across every series on the abscissa
/// `l / (d N)`, with `r` held at `base.r` for the rank law.
///
/// The rank law is fitted as a line in `ln(value - r)`. Each series enters
/// after its transient and leaves once its excess over `r` drops below
/// `RANK_WINDOW_FRACTION` of its peak excess.
pub fn fit_constants(family: &[TraceSeries], law: FitLaw, base: &TheoryModel) -> Result<FitReport> {
    let floor = base.r;
    let points = windowed_points(family, law, floor)?;
    let (params, line) = match law {
        FitLaw::EntropyLinear => {
            let xs: Vec<f64> = points.iter().map(|p| p.s).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.value).collect();
            let line = ols(&xs, &ys)?;
            if !(line.slope < 0.0) {
                return Err(LabError::FitFailure(format!(
                    "entropy does not decay (slope {})",
                    line.slope
                )));
            }
            let params = TheoryModel {
                h0: line.intercept,
                k: -line.slope,
                ..*base
            };
            (params, line)
        }
        FitLaw::RankExp => {
            let xs: Vec<f64> = points.iter().map(|p| p.s).collect();
            let ys: Vec<f64> = points.iter().map(|p| (p.value - floor).ln()).collect();
            let line = ols(&xs, &ys)?;
            if !(line.slope < 0.0) {
                return Err(LabError::FitFailure(format!(
                    "rank excess does not decay (slope {})",
                    line.slope
                )));
            }
            let params = TheoryModel {
                c: line.intercept.exp(),
                alpha_fit: -line.slope,
                ..*base
            };
            (params, line)
        }
    };
    let (per_d_mean_residual, pooled_residual_sd) = residual_summary(&points, &line.residuals);
    Ok(FitReport {
        law,
        parameters: params,
        r_squared: line.r_squared,
        residual_d: points.iter().map(|p| p.d).collect(),
        residuals: line.residuals,
        per_d_mean_residual,
        pooled_residual_sd,
    })
}

/// Fits `H = H0 - K / d` to `(d, entropy)` pairs measured at a common depth
/// `layers` and token count, returning the model with `k = K N / L`.
pub fn fit_entropy_across_d(points: &[(f64, f64)], layers: f64, n_tokens: usize) -> Result<TheoryModel> {
    let xs: Vec<f64> = points.iter().map(|p| 1.0 / p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let line = ols(&xs, &ys)?;
    Ok(TheoryModel {
        h0: line.intercept,
        k: -line.slope * n_tokens as f64 / layers,
        ..TheoryModel::default()
    })
}

/// Fits `r + C exp(-a L / (d N))` to `(d, rank)` pairs measured at a common
/// depth `layers`, as a line in `ln(rank - r)` against `1 / d`.
pub fn fit_rank_across_d(points: &[(f64, f64)], layers: f64, n_tokens: usize, r: f64) -> Result<TheoryModel> {
    if let Some(p) = points.iter().find(|p| !(p.1 > r)) {
        return Err(LabError::FitFailure(format!(
            "rank {} at d = {} does not exceed the floor {r}",
            p.1, p.0
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| 1.0 / p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| (p.1 - r).ln()).collect();
    let line = ols(&xs, &ys)?;
    if !(line.slope < 0.0) {
        return Err(LabError::FitFailure(format!(
            "rank does not grow with d (slope {} in 1/d)",
            line.slope
        )));
    }
    Ok(TheoryModel {
        r,
        c: line.intercept.exp(),
        alpha_fit: -line.slope * n_tokens as f64 / layers,
        ..TheoryModel::default()
    })
}

fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    match points.iter().position(|p| p.0 >= x) {
        Some(0) => points[0].1,
        Some(i) => {
            let (a, b) = (points[i - 1], points[i]);
            a.1 + (x - a.0) / (b.0 - a.0) * (b.1 - a.1)
        }
        None => points.last().map_or(f64::NAN, |p| p.1),
    }
}

/// Largest pointwise gap between each series on the abscissa `layer / d`
/// and the smallest-`d` series, after the transient share of the common range.
pub fn rescaled_deviation(family: &[TraceSeries]) -> Result<f64> {
    let reference = family
        .iter()
        .min_by(|a, b| a.d.total_cmp(&b.d))
        .ok_or_else(|| LabError::invalid("rescaled comparison needs at least one series"))?;
    let rescaled = |s: &TraceSeries| -> Vec<(f64, f64)> { s.points.iter().map(|&(l, v)| (l / s.d, v)).collect() };
    let reference_points = rescaled(reference);
    if reference_points.len() < 2 {
        return Err(LabError::invalid("reference series needs at least two points"));
    }
    let u_max = family
        .iter()
        .filter_map(|s| s.points.last().map(|p| p.0 / s.d))
        .fold(f64::INFINITY, f64::min);
    let cutoff = TRANSIENT_FRACTION * u_max;
    let mut worst: f64 = 0.0;
    for s in family.iter().filter(|s| s.d != reference.d) {
        for (u, v) in rescaled(s) {
            if u >= cutoff && u <= u_max {
                worst = worst.max((v - interpolate(&reference_points, u)).abs());
            }
        }
    }
    Ok(worst)
}

/// Down-sampling factor `1 / (1 - m)` for fusion strength `m`.
pub fn nominal_downsampling(fusion_m: f64) -> f64 {
    1.0 / (1.0 - fusion_m)
}
