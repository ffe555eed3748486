//! Discrete global-attention dynamics on the unit sphere.
//!
//! Each layer forms `A = softmax(alpha * X Xᵀ / T)` (or its first-order
//! expansion around the uniform kernel), mixes `w X + (1 - w) A X` and
//! projects back to the sphere. Value and output projections are the identity
//! unless a random rotation is requested.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{dot, matmul, matmul_transpose, norm, row_normalize_sphere, row_softmax, Matrix};
use crate::merging::{build_merge_map, cluster_means, MergeConfig, MergeMap};
use crate::metrics::{spectral_summary, AttnMatrix};

/// Number of leading singular values kept in each [`LayerTrace`].
pub const TOP_SINGULAR_VALUES: usize = 5;

const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Token features, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    tokens: Matrix,
    unit_norm: bool,
}

impl TokenMatrix {
    /// Wraps unit-norm rows. Fails if any row norm is off by more than 1e-9.
    pub fn new(tokens: Matrix) -> Result<Self> {
        Self::check_shape(&tokens)?;
        if let Some(i) = (0..tokens.rows()).find(|&i| (norm(tokens.row(i)) - 1.0).abs() > UNIT_NORM_TOLERANCE) {
            return Err(LabError::invalid(format!("token row {i} is not unit norm")));
        }
        Ok(TokenMatrix {
            tokens,
            unit_norm: true,
        })
    }

    /// Wraps arbitrary rows without a norm guarantee.
    pub fn unnormalized(tokens: Matrix) -> Result<Self> {
        Self::check_shape(&tokens)?;
        Ok(TokenMatrix {
            tokens,
            unit_norm: false,
        })
    }

    /// Projects every row onto the sphere.
    pub fn normalized(tokens: Matrix) -> Result<Self> {
        Self::check_shape(&tokens)?;
        Ok(TokenMatrix {
            tokens: row_normalize_sphere(&tokens)?,
            unit_norm: true,
        })
    }

    pub(crate) fn from_parts(tokens: Matrix, unit_norm: bool) -> Result<Self> {
        if unit_norm {
            Self::new(tokens)
        } else {
            Self::unnormalized(tokens)
        }
    }

    fn check_shape(m: &Matrix) -> Result<()> {
        if m.rows() < 2 || m.cols() < 2 {
            return Err(LabError::invalid(format!(
                "token matrix needs at least 2 tokens and 2 features, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn into_matrix(self) -> Matrix {
        self.tokens
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm
    }

    pub fn n(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Mean of the token rows.
    pub fn mean_direction(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for row in self.tokens.iter_rows() {
            for (a, &v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.n() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// `‖(1/N) Σ x_i‖`, which is 1 exactly when all unit tokens coincide.
    pub fn mean_direction_norm(&self) -> f64 {
        norm(&self.mean_direction())
    }

    /// Reorders token rows: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> TokenMatrix {
        TokenMatrix {
            tokens: self.tokens.select_rows(order),
            unit_norm: self.unit_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitDistribution {
    UniformSphere,
    /// `k` centers drawn uniformly; token `i` sits near center `i mod k`
    /// with isotropic Gaussian offset `spread` per coordinate.
    GaussianClusters { k: usize, spread: f64 },
}

pub(crate) fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws `n` unit tokens in `dim` dimensions from a ChaCha8 stream.
pub fn init_tokens(n: usize, dim: usize, distribution: InitDistribution, seed: u64) -> Result<TokenMatrix> {
    if n < 2 || dim < 2 {
        return Err(LabError::invalid(format!(
            "need n >= 2 and dim >= 2, got n = {n}, dim = {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    match distribution {
        InitDistribution::UniformSphere => {
            for _ in 0..n {
                data.extend(gaussian_vector(&mut rng, dim));
            }
        }
        InitDistribution::GaussianClusters { k, spread } => {
            if k < 1 || k > n {
                return Err(LabError::invalid(format!("cluster count {k} must lie in [1, {n}]")));
            }
            if !(spread >= 0.0) || !spread.is_finite() {
                return Err(LabError::invalid(format!("spread must be nonnegative, got {spread}")));
            }
            let centers: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let c = gaussian_vector(&mut rng, dim);
                    let nc = norm(&c);
                    c.into_iter().map(|v| v / nc).collect()
                })
                .collect();
            for i in 0..n {
                let offset = gaussian_vector(&mut rng, dim);
                data.extend(centers[i % k].iter().zip(offset).map(|(c, o)| c + spread * o));
            }
        }
    }
    TokenMatrix::normalized(Matrix::new(n, dim, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    ExactSoftmax,
    Linearized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub alpha: f64,
    pub layers: usize,
    pub residual_weight: f64,
    pub temperature: f64,
    pub mode: AttentionMode,
    pub renormalize_each_layer: bool,
    pub seed: u64,
    /// Seed of a random orthogonal value map; `None` keeps the identity.
    pub value_rotation_seed: Option<u64>,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            alpha: 4.0,
            layers: 48,
            residual_weight: 0.5,
            temperature: 1.0,
            mode: AttentionMode::ExactSoftmax,
            renormalize_each_layer: true,
            seed: 0,
            value_rotation_seed: None,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(LabError::invalid(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if self.layers < 1 {
            return Err(LabError::invalid("layers must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.residual_weight) {
            return Err(LabError::invalid(format!(
                "residual_weight must lie in [0, 1], got {}",
                self.residual_weight
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LabError::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn value_map(&self, dim: usize) -> Option<Matrix> {
        self.value_rotation_seed.map(|s| random_orthogonal(dim, s))
    }
}

/// Haar-like random orthogonal matrix via Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal(dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = gaussian_vector(&mut rng, dim);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            basis.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    Matrix::from_rows(&basis).expect("square basis")
}

fn check_dynamics_input(x: &TokenMatrix, cfg: &DynamicsConfig) -> Result<()> {
    cfg.validate()?;
    if !x.tokens().as_slice().iter().all(|v| v.is_finite()) {
        return Err(LabError::invalid("token matrix has non-finite entries"));
    }
    Ok(())
}

/// `row_softmax(alpha * X Xᵀ / T)`.
pub fn attention_exact(x: &TokenMatrix, cfg: &DynamicsConfig) -> Result<AttnMatrix> {
    check_dynamics_input(x, cfg)?;
    let scores = matmul_transpose(x.tokens(), x.tokens())?.scale(cfg.alpha);
    Ok(AttnMatrix::from_softmax(row_softmax(&scores, cfg.temperature)?))
}

/// First-order kernel `1/N + (a/N)(⟨x_i,x_j⟩ - mean_k ⟨x_i,x_k⟩)` with `a = alpha / T`.
///
/// Rows sum to one; entries can go negative for large `alpha`.
pub fn attention_linearized(x: &TokenMatrix, cfg: &DynamicsConfig) -> Result<AttnMatrix> {
    check_dynamics_input(x, cfg)?;
    let gram = matmul_transpose(x.tokens(), x.tokens())?;
    AttnMatrix::general(linearized_kernel(&gram, cfg.alpha / cfg.temperature))
}

fn linearized_kernel(scores: &Matrix, a: f64) -> Matrix {
    let n = scores.cols();
    let nf = n as f64;
    let mut out = scores.clone();
    for i in 0..scores.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / nf;
        row.iter_mut().for_each(|g| *g = 1.0 / nf + a / nf * (*g - mean));
    }
    out
}

/// Attention under the configured mode.
pub fn attention(x: &TokenMatrix, cfg: &DynamicsConfig) -> Result<AttnMatrix> {
    match cfg.mode {
        AttentionMode::ExactSoftmax => attention_exact(x, cfg),
        AttentionMode::Linearized => attention_linearized(x, cfg),
    }
}

fn mix_and_project(x: &TokenMatrix, mut mixed: Matrix, values: Option<&Matrix>, cfg: &DynamicsConfig) -> Result<TokenMatrix> {
    if let Some(w) = values {
        mixed = matmul(&mixed, w)?;
    }
    let w = cfg.residual_weight;
    let out = if w == 0.0 {
        mixed
    } else {
        let data = x
            .tokens()
            .as_slice()
            .iter()
            .zip(mixed.as_slice())
            .map(|(a, b)| w * a + (1.0 - w) * b)
            .collect();
        Matrix::new(x.n(), x.dim(), data)?
    };
    if cfg.renormalize_each_layer {
        TokenMatrix::normalized(out)
    } else {
        TokenMatrix::unnormalized(out)
    }
}

fn step_with_attention(x: &TokenMatrix, a: &AttnMatrix, values: Option<&Matrix>, cfg: &DynamicsConfig) -> Result<TokenMatrix> {
    if cfg.residual_weight == 1.0 && values.is_none() {
        return Ok(x.clone());
    }
    let mixed = matmul(a.matrix(), x.tokens())?;
    mix_and_project(x, mixed, values, cfg)
}

/// One layer `w x + (1 - w) A x`, projected to the sphere when configured.
pub fn step_layer(x: &TokenMatrix, cfg: &DynamicsConfig) -> Result<TokenMatrix> {
    let a = attention(x, cfg)?;
    step_with_attention(x, &a, cfg.value_map(x.dim()).as_ref(), cfg)
}

/// Attention among cluster representatives.
///
/// `S_cj = ⟨ȳ_c, ȳ_j⟩` between raw cluster means; the diagonal is each
/// cluster's mean squared token norm, so a singleton sees exactly its own
/// unmerged score.
pub fn merged_attention(x: &TokenMatrix, map: &MergeMap, cfg: &DynamicsConfig) -> Result<(Matrix, Matrix)> {
    check_dynamics_input(x, cfg)?;
    let means = cluster_means(x.tokens(), map)?;
    let mut scores = matmul_transpose(&means, &means)?;
    let mut self_score = vec![0.0; map.n_dst()];
    for (src, &dst) in map.assignment().iter().enumerate() {
        let r = x.tokens().row(src);
        self_score[dst] += dot(r, r);
    }
    for (c, (&s, &size)) in self_score.iter().zip(map.cluster_sizes()).enumerate() {
        scores.set(c, c, s / size as f64);
    }
    let kernel = match cfg.mode {
        AttentionMode::ExactSoftmax => row_softmax(&scores.scale(cfg.alpha), cfg.temperature)?,
        AttentionMode::Linearized => linearized_kernel(&scores, cfg.alpha / cfg.temperature),
    };
    Ok((kernel, means))
}

/// One merged layer: tokens attend to `N/d` representatives, each token
/// keeps its own contribution through the diagonal weight and receives its
/// cluster's cross-cluster message.
///
/// An identity map reduces to [`step_layer`] bit for bit.
pub fn merged_step(x: &TokenMatrix, map: &MergeMap, cfg: &DynamicsConfig) -> Result<TokenMatrix> {
    if map.is_identity() {
        return step_layer(x, cfg);
    }
    merged_step_with_values(x, map, cfg.value_map(x.dim()).as_ref(), cfg)
}

fn merged_step_with_values(x: &TokenMatrix, map: &MergeMap, values: Option<&Matrix>, cfg: &DynamicsConfig) -> Result<TokenMatrix> {
    let (kernel, means) = merged_attention(x, map, cfg)?;
    let k = map.n_dst();
    let dim = x.dim();
    let mut cross = Matrix::zeros(k, dim);
    for c in 0..k {
        let krow = kernel.row(c);
        let out = cross.row_mut(c);
        for (j, &w) in krow.iter().enumerate() {
            if j == c || w == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(means.row(j)) {
                *o += w * v;
            }
        }
    }
    let mut mixed = Matrix::zeros(x.n(), dim);
    for (src, &c) in map.assignment().iter().enumerate() {
        let diag = kernel.get(c, c);
        let xi = x.tokens().row(src);
        let cr = cross.row(c);
        for ((o, &a), &b) in mixed.row_mut(src).iter_mut().zip(xi).zip(cr) {
            *o = diag * a + b;
        }
    }
    mix_and_project(x, mixed, values, cfg)
}

/// Per-layer diagnostics computed on the full `N x N` attention of the layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer_index: usize,
    pub entropy_normalized: f64,
    pub effective_rank: f64,
    pub top_singular_values: Vec<f64>,
    pub mean_direction_norm: f64,
    pub attention_snapshot: Option<AttnMatrix>,
    /// `n_src / n_dst` of the merge applied in this layer, 1 when none.
    pub d_effective: f64,
}

#[derive(Debug, Clone)]
pub struct DynamicsRun {
    pub traces: Vec<LayerTrace>,
    pub final_tokens: TokenMatrix,
}

/// Runs `cfg.layers` layers from `x0`.
///
/// Trace `l` describes the attention acting on the input of layer `l`, so
/// trace 0 is computed on `x0`. With a merge config, layers on its schedule
/// attend through a fresh merge map of their input.
pub fn run_dynamics(
    x0: &TokenMatrix,
    cfg: &DynamicsConfig,
    merge: Option<&MergeConfig>,
    snapshot_layers: &[usize],
) -> Result<DynamicsRun> {
    check_dynamics_input(x0, cfg)?;
    if let Some(m) = merge {
        m.validate()?;
    }
    if let Some(&bad) = snapshot_layers.iter().find(|&&l| l > cfg.layers) {
        return Err(LabError::invalid(format!(
            "snapshot layer {bad} exceeds {} layers",
            cfg.layers
        )));
    }
    let values = cfg.value_map(x0.dim());
    let mut x = x0.clone();
    let mut traces = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let step = || -> Result<(LayerTrace, TokenMatrix)> {
            let a = attention(&x, cfg)?;
            let summary = spectral_summary(&a)?;
            let map = match merge {
                Some(m) if m.applies_at(layer) => Some(build_merge_map(&x, m)?),
                _ => None,
            };
            let d_effective = map.as_ref().map_or(1.0, |m| m.n_src() as f64 / m.n_dst() as f64);
            let next = match &map {
                Some(m) if !m.is_identity() => merged_step_with_values(&x, m, values.as_ref(), cfg)?,
                _ => step_with_attention(&x, &a, values.as_ref(), cfg)?,
            };
            let trace = LayerTrace {
                layer_index: layer,
                entropy_normalized: summary.entropy_normalized,
                effective_rank: summary.effective_rank,
                top_singular_values: summary.spectrum.values.iter().take(TOP_SINGULAR_VALUES).copied().collect(),
                mean_direction_norm: x.mean_direction_norm(),
                attention_snapshot: snapshot_layers.contains(&layer).then_some(a),
                d_effective,
            };
            Ok((trace, next))
        };
        let (trace, next) = step().map_err(|e| e.at_layer(layer))?;
        traces.push(trace);
        x = next;
    }
    Ok(DynamicsRun {
        traces,
        final_tokens: x,
    })
}
