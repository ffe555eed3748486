//! Token merging by repeated bipartite soft matching, and the matching
//! unmerge (broadcast) step.
//!
//! Mergeable tokens are split by parity of their position into sets A and B;
//! every A token proposes its most similar B token and the strongest proposals
//! are accepted. One round can remove at most |A| tokens, so stronger fusion
//! runs further rounds over the current cluster representatives until exactly
//! `floor(fusion_m * N_mergeable)` tokens have been absorbed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dynamics::TokenMatrix;
use crate::error::{LabError, Result};
use crate::linalg::{dot, norm, Matrix};

/// Cluster means with a norm below this cannot be projected back to the sphere.
pub const DEGENERATE_MEAN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    /// Fraction of mergeable tokens removed per application, in `[0, 1)`.
    pub fusion_m: f64,
    /// Merge before every `schedule_every`-th layer; 0 disables merging.
    pub schedule_every: usize,
    pub protected_indices: BTreeSet<usize>,
    /// Fraction of the most distinctive tokens exempted from merging.
    pub salient_fraction: f64,
    /// Carried for configuration round-trips; matching itself is deterministic.
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            fusion_m: 0.0,
            schedule_every: 1,
            protected_indices: BTreeSet::new(),
            salient_fraction: 0.0,
            seed: 0,
        }
    }
}

impl MergeConfig {
    pub fn with_fusion(fusion_m: f64) -> Self {
        MergeConfig {
            fusion_m,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fusion_m) {
            return Err(LabError::invalid(format!(
                "fusion_m must lie in [0, 1), got {}",
                self.fusion_m
            )));
        }
        if !(0.0..1.0).contains(&self.salient_fraction) {
            return Err(LabError::invalid(format!(
                "salient_fraction must lie in [0, 1), got {}",
                self.salient_fraction
            )));
        }
        Ok(())
    }

    /// Whether a merge is scheduled before layer `layer`.
    pub fn applies_at(&self, layer: usize) -> bool {
        self.schedule_every > 0 && layer.is_multiple_of(self.schedule_every) && self.fusion_m > 0.0
    }
}

/// Assignment of source tokens to destination representatives.
///
/// Destinations are ordered by their smallest source index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeMap {
    n_src: usize,
    n_dst: usize,
    assignment: Vec<usize>,
    cluster_sizes: Vec<usize>,
}

impl MergeMap {
    pub fn identity(n: usize) -> Self {
        MergeMap {
            n_src: n,
            n_dst: n,
            assignment: (0..n).collect(),
            cluster_sizes: vec![1; n],
        }
    }

    /// Builds a map from explicit clusters, which must partition `0..n_src`.
    pub fn from_clusters(n_src: usize, clusters: &[Vec<usize>]) -> Result<Self> {
        let mut seen = vec![false; n_src];
        for c in clusters {
            if c.is_empty() {
                return Err(LabError::invalid("empty cluster"));
            }
            for &i in c {
                if i >= n_src || seen[i] {
                    return Err(LabError::invalid(format!(
                        "token {i} is out of range or assigned twice"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(LabError::invalid(format!("token {i} is unassigned")));
        }
        let mut ordered: Vec<&Vec<usize>> = clusters.iter().collect();
        ordered.sort_by_key(|c| c.iter().min().copied());
        let mut assignment = vec![0; n_src];
        let mut cluster_sizes = Vec::with_capacity(ordered.len());
        for (dst, c) in ordered.iter().enumerate() {
            for &i in c.iter() {
                assignment[i] = dst;
            }
            cluster_sizes.push(c.len());
        }
        Ok(MergeMap {
            n_src,
            n_dst: ordered.len(),
            assignment,
            cluster_sizes,
        })
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn n_dst(&self) -> usize {
        self.n_dst
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_sizes(&self) -> &[usize] {
        &self.cluster_sizes
    }

    pub fn is_identity(&self) -> bool {
        self.n_src == self.n_dst
    }

    /// Source indices of every destination, each list ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_dst];
        for (src, &dst) in self.assignment.iter().enumerate() {
            out[dst].push(src);
        }
        out
    }
}

/// Indices of the `ceil(fraction * N)` tokens with the lowest mean cosine
/// similarity to all other tokens. Ties go to the lower index.
pub fn select_salient(x: &TokenMatrix, fraction: f64) -> BTreeSet<usize> {
    let n = x.n();
    let count = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if count == 0 {
        return BTreeSet::new();
    }
    let units = unit_rows(x.tokens());
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let ui = units.row(i);
            let total: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| dot(ui, units.row(j)))
                .sum();
            (total / (n - 1) as f64, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(count.min(n)).map(|(_, i)| i).collect()
}

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn unit_mean(x: &Matrix, members: &[usize], out: &mut [f64]) -> bool {
    out.iter_mut().for_each(|v| *v = 0.0);
    for &i in members {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    let n = norm(out);
    if n < DEGENERATE_MEAN_NORM {
        return false;
    }
    out.iter_mut().for_each(|v| *v /= n);
    true
}

/// Bipartite soft matching with protected and salient tokens held out.
pub fn build_merge_map(x: &TokenMatrix, cfg: &MergeConfig) -> Result<MergeMap> {
    cfg.validate()?;
    let n = x.n();
    if let Some(&bad) = cfg.protected_indices.iter().find(|&&i| i >= n) {
        return Err(LabError::invalid(format!(
            "protected index {bad} out of range for {n} tokens"
        )));
    }
    let salient = select_salient(x, cfg.salient_fraction);
    let mergeable: Vec<usize> = (0..n)
        .filter(|i| !cfg.protected_indices.contains(i) && !salient.contains(i))
        .collect();
    let mut remaining = (cfg.fusion_m * mergeable.len() as f64 + 1e-9).floor() as usize;
    if remaining > 0 && remaining >= mergeable.len() {
        return Err(LabError::invalid(format!(
            "cannot remove {remaining} of {} mergeable tokens",
            mergeable.len()
        )));
    }

    let dim = x.dim();
    let tokens = x.tokens();
    let mut clusters: Vec<Vec<usize>> = mergeable.iter().map(|&i| vec![i]).collect();
    while remaining > 0 {
        let reps: Vec<Option<Vec<f64>>> = clusters
            .iter()
            .map(|c| {
                let mut buf = vec![0.0; dim];
                unit_mean(tokens, c, &mut buf).then_some(buf)
            })
            .collect();
        let a_side: Vec<usize> = (0..clusters.len()).step_by(2).collect();
        let b_side: Vec<usize> = (1..clusters.len()).step_by(2).collect();
        if b_side.is_empty() {
            break;
        }
        let mut proposals: Vec<(f64, usize, usize)> = a_side
            .iter()
            .map(|&a| {
                let mut best = (f64::NEG_INFINITY, b_side[0]);
                for &b in &b_side {
                    let sim = match (&reps[a], &reps[b]) {
                        (Some(ra), Some(rb)) => dot(ra, rb),
                        _ => -1.0,
                    };
                    if sim > best.0 {
                        best = (sim, b);
                    }
                }
                (best.0, a, best.1)
            })
            .collect();
        proposals.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
        let accepted = remaining.min(a_side.len());
        let mut absorbed = vec![false; clusters.len()];
        let mut additions: Vec<Vec<usize>> = vec![Vec::new(); clusters.len()];
        for &(_, a, b) in proposals.iter().take(accepted) {
            absorbed[a] = true;
            additions[b].extend_from_slice(&clusters[a]);
        }
        let mut next: Vec<Vec<usize>> = Vec::with_capacity(clusters.len() - accepted);
        for (idx, mut c) in clusters.into_iter().enumerate() {
            if absorbed[idx] {
                continue;
            }
            c.append(&mut additions[idx]);
            c.sort_unstable();
            next.push(c);
        }
        next.sort_by_key(|c| c[0]);
        clusters = next;
        remaining -= accepted;
    }

    clusters.extend(
        cfg.protected_indices
            .iter()
            .chain(salient.iter())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|&i| vec![i]),
    );
    MergeMap::from_clusters(n, &clusters)
}

fn check_map(x: &Matrix, map: &MergeMap) -> Result<()> {
    if x.rows() != map.n_src {
        return Err(LabError::invalid(format!(
            "merge map expects {} tokens, got {}",
            map.n_src,
            x.rows()
        )));
    }
    Ok(())
}

/// Size-weighted cluster means, not projected back to the sphere.
pub fn cluster_means(x: &Matrix, map: &MergeMap) -> Result<Matrix> {
    check_map(x, map)?;
    let dim = x.cols();
    let mut out = Matrix::zeros(map.n_dst, dim);
    for (src, &dst) in map.assignment.iter().enumerate() {
        for (o, &v) in out.row_mut(dst).iter_mut().zip(x.row(src)) {
            *o += v;
        }
    }
    for (dst, &size) in map.cluster_sizes.iter().enumerate() {
        if size > 1 {
            let s = size as f64;
            out.row_mut(dst).iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(out)
}

/// Replaces every cluster by its size-weighted mean on the sphere. Singletons
/// pass through untouched.
pub fn apply_merge(x: &TokenMatrix, map: &MergeMap) -> Result<TokenMatrix> {
    let means = cluster_means(x.tokens(), map)?;
    let mut out = means;
    let clusters = map.clusters();
    for (dst, members) in clusters.iter().enumerate() {
        let row = out.row_mut(dst);
        if members.len() == 1 {
            row.copy_from_slice(x.tokens().row(members[0]));
            continue;
        }
        let n = norm(row);
        if n < DEGENERATE_MEAN_NORM {
            return Err(LabError::Degenerate {
                what: "cluster mean vanishes".into(),
                index: dst,
            });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    let unit = x.is_unit_norm() || clusters.iter().all(|c| c.len() > 1);
    TokenMatrix::from_parts(out, unit)
}

/// Copies destination row `c` to every source assigned to `c`.
pub fn broadcast_rows(y: &Matrix, map: &MergeMap) -> Result<Matrix> {
    if y.rows() != map.n_dst {
        return Err(LabError::invalid(format!(
            "unmerge expects {} representatives, got {}",
            map.n_dst,
            y.rows()
        )));
    }
    Ok(y.select_rows(&map.assignment))
}

/// Broadcasts each representative back to its sources.
pub fn apply_unmerge(y: &TokenMatrix, map: &MergeMap) -> Result<TokenMatrix> {
    TokenMatrix::from_parts(broadcast_rows(y.tokens(), map)?, y.is_unit_norm())
}

/// Realized down-sampling factor `n_src / n_dst`.
pub fn effective_downsampling(map: &MergeMap) -> f64 {
    map.n_src as f64 / map.n_dst as f64
}
