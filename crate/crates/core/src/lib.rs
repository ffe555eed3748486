//! Attention-collapse numerical laboratory.
//!
//! Discrete softmax attention dynamics on the sphere, token merging, a
//! particle model of the mean-field flow, spectral collapse metrics, fits of
//! the collapse laws and runtime benchmarks, plus an experiment runner that
//! writes CSV, JSON, SVG and PGM artifacts.

// `!(x > 0.0)` deliberately rejects NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod meanfield;
pub mod merging;
pub mod metrics;
pub mod theory;

pub use dynamics::{
    attention_exact, attention_linearized, init_tokens, run_dynamics, step_layer, AttentionMode,
    DynamicsConfig, DynamicsRun, InitDistribution, LayerTrace, TokenMatrix,
};
pub use error::{LabError, Result};
pub use linalg::{Matrix, Spectrum};
pub use meanfield::{compare_discrete_continuum, drift_field, run_pde, step_euler_projected, ParticleSystem, PdeTrace};
pub use merging::{apply_merge, apply_unmerge, build_merge_map, effective_downsampling, select_salient, MergeConfig, MergeMap};
pub use metrics::{collapse_time, effective_rank, particle_entropy_knn, sv_entropy_normalized, AttnMatrix, CollapseDefinition, CollapseTime};
pub use theory::{entropy_law, fit_constants, rank_bound, tau_prediction, FitLaw, FitReport, TheoryModel, TraceSeries};
pub use experiments::{run_experiment, ExperimentConfig, ExperimentKind, ReportBundle};
