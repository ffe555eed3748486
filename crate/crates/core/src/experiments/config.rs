//! JSON experiment configuration. Every field has a default, so `{}` is a
//! valid document describing the default collapse run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{DynamicsConfig, InitDistribution};
use crate::error::{LabError, Result};
use crate::merging::MergeConfig;
use crate::metrics::DEFAULT_ENTROPY_THRESHOLD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Collapse,
    MergeSweep,
    Pde,
    ScalingFit,
    Benchmark,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Collapse,
        ExperimentKind::MergeSweep,
        ExperimentKind::Pde,
        ExperimentKind::ScalingFit,
        ExperimentKind::Benchmark,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Collapse => "collapse",
            ExperimentKind::MergeSweep => "merge-sweep",
            ExperimentKind::Pde => "pde",
            ExperimentKind::ScalingFit => "scaling-fit",
            ExperimentKind::Benchmark => "benchmark",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::invalid(format!("unknown experiment `{s}`")))
    }
}

/// Sweep lists shared by the sweep experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Fusion strengths of the merge sweep.
    pub fusion_m: Vec<f64>,
    /// Token counts of the benchmark scaling run.
    pub n_tokens: Vec<usize>,
    /// Readout depths of the merge sweep; empty reads one layer past the
    /// collapse time of the weakest fusion strength.
    pub layers: Vec<usize>,
    /// Also time the merged pipeline and write the runtime table.
    pub include_benchmark: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fusion_m: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            n_tokens: vec![256, 512, 1024, 2048],
            layers: Vec::new(),
            include_benchmark: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConfig {
    /// Fusion strengths; the defaults give d = 1, 2, 4, 8.
    pub fusion_m: Vec<f64>,
    /// Run `layers * d` layers at down-sampling `d` so every run can collapse.
    pub scale_depth_with_d: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            fusion_m: vec![0.0, 0.5, 0.75, 0.875],
            scale_depth_with_d: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdeConfig {
    pub particles: usize,
    pub dim: usize,
    pub kappa: f64,
    pub dt: f64,
    /// Horizon at `d = 1`.
    pub t_end: f64,
    pub d_values: Vec<f64>,
    pub record_every: usize,
    /// Stretch the horizon to `t_end * d`.
    pub scale_time_with_d: bool,
    pub noise_sigma: f64,
}

impl Default for PdeConfig {
    fn default() -> Self {
        PdeConfig {
            particles: 1000,
            dim: 3,
            kappa: 1.0,
            dt: 0.01,
            t_end: 10.0,
            d_values: vec![1.0, 2.0, 4.0],
            record_every: 10,
            scale_time_with_d: true,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub dim: usize,
    pub repetitions: usize,
    /// Layers per timed merged-pipeline run.
    pub layers: usize,
    pub fusion_m: Vec<f64>,
    /// Token count of the merged-pipeline comparison.
    pub merge_n_tokens: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dim: 64,
            repetitions: 5,
            layers: 2,
            fusion_m: vec![0.3, 0.5, 0.7, 0.9],
            merge_n_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub n_tokens: usize,
    pub dim: usize,
    pub init: InitDistribution,
    pub dynamics: DynamicsConfig,
    /// Merge schedule for `collapse`, and the template for the sweeps.
    pub merge: Option<MergeConfig>,
    pub sweep: SweepConfig,
    pub scaling: ScalingConfig,
    pub pde: PdeConfig,
    pub bench: BenchConfig,
    pub entropy_threshold: f64,
    /// Layers whose attention is written as a heatmap; `None` picks four.
    pub snapshot_layers: Option<Vec<usize>>,
    pub output_dir: PathBuf,
    /// Seeds token initialization and is copied into `dynamics.seed`.
    pub seed: u64,
    pub emit_plots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Collapse,
            n_tokens: 256,
            dim: 32,
            init: InitDistribution::UniformSphere,
            dynamics: DynamicsConfig::default(),
            merge: None,
            sweep: SweepConfig::default(),
            scaling: ScalingConfig::default(),
            pde: PdeConfig::default(),
            bench: BenchConfig::default(),
            entropy_threshold: DEFAULT_ENTROPY_THRESHOLD,
            snapshot_layers: None,
            output_dir: PathBuf::from("collapse-lab-out"),
            seed: 0,
            emit_plots: true,
        }
    }
}

fn check_m_list(name: &str, ms: &[f64], min_len: usize) -> Result<()> {
    if ms.len() < min_len {
        return Err(LabError::invalid(format!("{name} needs at least {min_len} values")));
    }
    if let Some(m) = ms.iter().find(|m| !(0.0..1.0).contains(*m)) {
        return Err(LabError::invalid(format!("{name} value {m} outside [0, 1)")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::invalid(format!("config: {e}")))
    }

    /// Reads a config file. Unreadable files are I/O errors, malformed ones
    /// are configuration errors.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the config with `output_dir` blanked, so the hash
    /// identifies the computation rather than where it was written.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.dynamics.seed = canonical.seed;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        if self.n_tokens < 2 || self.dim < 2 {
            return Err(LabError::invalid("n_tokens and dim must be at least 2"));
        }
        if let Some(m) = &self.merge {
            m.validate()?;
        }
        if !(self.entropy_threshold > 0.0 && self.entropy_threshold < 1.0) {
            return Err(LabError::invalid(format!(
                "entropy_threshold must lie in (0, 1), got {}",
                self.entropy_threshold
            )));
        }
        if let Some(s) = &self.snapshot_layers {
            if let Some(l) = s.iter().find(|&&l| l >= self.dynamics.layers) {
                return Err(LabError::invalid(format!("snapshot layer {l} is past the last layer")));
            }
        }
        match self.experiment {
            ExperimentKind::Collapse => {}
            ExperimentKind::MergeSweep => {
                check_m_list("sweep.fusion_m", &self.sweep.fusion_m, 2)?;
                if let Some(l) = self.sweep.layers.iter().find(|&&l| l == 0 || l > self.dynamics.layers) {
                    return Err(LabError::invalid(format!("readout depth {l} outside 1..=layers")));
                }
                if self.sweep.include_benchmark {
                    check_m_list("bench.fusion_m", &self.bench.fusion_m, 1)?;
                }
            }
            ExperimentKind::ScalingFit => check_m_list("scaling.fusion_m", &self.scaling.fusion_m, 2)?,
            ExperimentKind::Pde => {
                let p = &self.pde;
                if p.particles <= crate::metrics::DEFAULT_KNN_K || p.dim < 2 {
                    return Err(LabError::invalid("pde needs more than 4 particles in at least 2 dimensions"));
                }
                if p.d_values.is_empty() || p.d_values.iter().any(|d| !(*d >= 1.0)) {
                    return Err(LabError::invalid("pde.d_values must be a nonempty list of values >= 1"));
                }
                if p.record_every == 0 || !(p.t_end > 0.0) || !(p.dt > 0.0) {
                    return Err(LabError::invalid("pde needs positive t_end, dt and record_every"));
                }
            }
            ExperimentKind::Benchmark => {
                if self.sweep.n_tokens.len() < 2 {
                    return Err(LabError::invalid("benchmark needs at least two sizes in sweep.n_tokens"));
                }
                check_m_list("bench.fusion_m", &self.bench.fusion_m, 1)?;
            }
        }
        Ok(())
    }
}
