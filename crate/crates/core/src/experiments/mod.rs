//! Experiment orchestration and artifact output.
//!
//! [`run_experiment`] executes one of the five canonical experiments and
//! writes its CSV, JSON, SVG and PGM artifacts plus a `manifest.json` that
//! records the config hash and a SHA-256 of every artifact. On failure every
//! file written so far is removed and the error names the failing stage.

mod config;
mod output;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{BenchConfig, ExperimentConfig, ExperimentKind, PdeConfig, ScalingConfig, SweepConfig};
pub use output::{emit_heatmap, emit_line_plot, heatmap_pgm, line_plot_svg, CsvTable, LinePlot, Series, FLAT_GRAY};

use crate::bench::{measure_attention_cost, measure_merge_sweep, scaling_exponent, RuntimeSample};
use crate::dynamics::{init_tokens, run_dynamics, DynamicsConfig, DynamicsRun, InitDistribution, LayerTrace};
use crate::error::{LabError, Result};
use crate::linalg::{parallel_enabled, set_parallel};
use crate::meanfield::{run_pde, ParticleSystem, PdeTrace};
use crate::merging::MergeConfig;
use crate::metrics::{collapse_time, CollapseDefinition, CollapseTime};
use crate::theory::{
    entropy_law, fit_constants, fit_entropy_across_d, fit_rank_across_d, linear_regression, nominal_downsampling,
    rank_bound, rescaled_deviation, FitLaw, FitReport, TheoryModel, TraceSeries,
};

/// Environment variable naming the worker count of the row-parallel kernels.
pub const THREADS_ENV: &str = "COLLAPSE_LAB_THREADS";

/// Reads [`THREADS_ENV`]; a value above 1 sizes the global pool and enables
/// the parallel kernels. Returns the raw value.
pub fn configure_threads_from_env() -> Option<String> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    if let Ok(n) = raw.trim().parse::<usize>() {
        if n > 1 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            set_parallel(true);
        } else {
            set_parallel(false);
        }
    }
    Some(raw)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArtifactRecord {
    /// Path relative to the output directory.
    pub path: String,
    pub kind: String,
    pub sha256: String,
}

/// Everything a run produced. `tables` holds the CSV contents by file name.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub output_dir: PathBuf,
    pub artifacts: Vec<ArtifactRecord>,
    pub tables: BTreeMap<String, CsvTable>,
    pub manifest: PathBuf,
}

impl ReportBundle {
    pub fn paths_of_kind(&self, kind: &str) -> Vec<PathBuf> {
        self.artifacts
            .iter()
            .filter(|a| a.kind == kind)
            .map(|a| self.output_dir.join(&a.path))
            .collect()
    }

    pub fn table(&self, name: &str) -> Option<&CsvTable> {
        self.tables.get(name)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    config_sha256: String,
    seed: u64,
    threads_env: Option<String>,
    parallel_kernels: bool,
    artifacts: &'a [ArtifactRecord],
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    emit_plots: bool,
    artifacts: Vec<ArtifactRecord>,
    tables: BTreeMap<String, CsvTable>,
}

impl Outputs {
    fn open(dir: &Path, emit_plots: bool) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            created_dir,
            emit_plots,
            artifacts: Vec::new(),
            tables: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, kind: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        output::write_bytes(&path, bytes)?;
        self.artifacts.push(ArtifactRecord {
            path: name.to_string(),
            kind: kind.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn csv(&mut self, name: &str, table: CsvTable) -> Result<()> {
        self.write(name, "csv", table.render()?.as_bytes())?;
        self.tables.insert(name.to_string(), table);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(name, "json", text.as_bytes())
    }

    fn plot(&mut self, name: &str, plot: &LinePlot) -> Result<()> {
        if self.emit_plots {
            self.write(name, "svg", line_plot_svg(plot)?.as_bytes())?;
        }
        Ok(())
    }

    fn heatmap(&mut self, name: &str, trace: &LayerTrace) -> Result<()> {
        if let (true, Some(a)) = (self.emit_plots, &trace.attention_snapshot) {
            self.write(name, "pgm", &heatmap_pgm(a))?;
        }
        Ok(())
    }

    fn write_manifest(&mut self, cfg: &ExperimentConfig, threads_env: Option<String>) -> Result<PathBuf> {
        let manifest = Manifest {
            experiment: cfg.experiment.name(),
            config_sha256: cfg.config_hash(),
            seed: cfg.seed,
            threads_env,
            parallel_kernels: parallel_enabled(),
            artifacts: &self.artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join("manifest.json");
        output::write_bytes(&path, text.as_bytes())?;
        Ok(path)
    }

    fn discard(self) {
        for a in &self.artifacts {
            let _ = fs::remove_file(self.dir.join(&a.path));
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// Runs the configured experiment into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let threads_env = configure_threads_from_env();
    let mut out = Outputs::open(&cfg.output_dir, cfg.emit_plots)?;
    let result = match cfg.experiment {
        ExperimentKind::Collapse => collapse(cfg, &mut out),
        ExperimentKind::MergeSweep => merge_sweep(cfg, &mut out),
        ExperimentKind::Pde => pde(cfg, &mut out),
        ExperimentKind::ScalingFit => scaling_fit(cfg, &mut out),
        ExperimentKind::Benchmark => benchmark(cfg, &mut out),
    };
    match result.and_then(|()| out.write_manifest(cfg, threads_env)) {
        Ok(manifest) => Ok(ReportBundle {
            output_dir: out.dir,
            artifacts: out.artifacts,
            tables: out.tables,
            manifest,
        }),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn dynamics_for(cfg: &ExperimentConfig) -> DynamicsConfig {
    DynamicsConfig {
        seed: cfg.seed,
        ..cfg.dynamics.clone()
    }
}

fn initial_tokens(cfg: &ExperimentConfig) -> Result<crate::dynamics::TokenMatrix> {
    init_tokens(cfg.n_tokens, cfg.dim, cfg.init, cfg.seed)
}

fn default_snapshots(layers: usize) -> Vec<usize> {
    let mut s = vec![0, layers / 4, layers / 2, layers - 1];
    s.dedup();
    s
}

const TRACE_COLUMNS: [&str; 10] = [
    "layer",
    "entropy_normalized",
    "effective_rank",
    "mean_direction_norm",
    "d_effective",
    "sv_1",
    "sv_2",
    "sv_3",
    "sv_4",
    "sv_5",
];

fn trace_row(t: &LayerTrace) -> Vec<f64> {
    let mut row = vec![
        t.layer_index as f64,
        t.entropy_normalized,
        t.effective_rank,
        t.mean_direction_norm,
        t.d_effective,
    ];
    row.extend((0..5).map(|i| t.top_singular_values.get(i).copied().unwrap_or(0.0)));
    row
}

fn trace_table(traces: &[LayerTrace]) -> CsvTable {
    let mut table = CsvTable::new(&TRACE_COLUMNS);
    for t in traces {
        table.push(trace_row(t));
    }
    table
}

fn layer_series(name: impl Into<String>, traces: &[LayerTrace], f: impl Fn(&LayerTrace) -> f64) -> Series {
    Series::new(name, traces.iter().map(|t| (t.layer_index as f64, f(t))).collect())
}

/// Mean realized `n_src / n_dst` over the layers that merged, or 1.
fn realized_d(traces: &[LayerTrace], merge: &MergeConfig) -> f64 {
    let merged: Vec<f64> = traces
        .iter()
        .filter(|t| merge.applies_at(t.layer_index))
        .map(|t| t.d_effective)
        .collect();
    if merged.is_empty() {
        1.0
    } else {
        merged.iter().sum::<f64>() / merged.len() as f64
    }
}

#[derive(Serialize)]
struct CollapseReport {
    n_tokens: usize,
    layers: usize,
    entropy_collapse: CollapseTime,
    final_entropy_normalized: f64,
    final_effective_rank: f64,
    final_mean_direction_norm: f64,
}

fn collapse(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let dynamics = dynamics_for(cfg);
    let x0 = stage("init", initial_tokens(cfg))?;
    let snapshots = cfg
        .snapshot_layers
        .clone()
        .unwrap_or_else(|| default_snapshots(dynamics.layers));
    let run = stage("dynamics", run_dynamics(&x0, &dynamics, cfg.merge.as_ref(), &snapshots))?;
    let last = run.traces.last().expect("at least one layer");
    let report = CollapseReport {
        n_tokens: cfg.n_tokens,
        layers: dynamics.layers,
        entropy_collapse: collapse_time(&run.traces, cfg.entropy_threshold, CollapseDefinition::EntropyBelow)?,
        final_entropy_normalized: last.entropy_normalized,
        final_effective_rank: last.effective_rank,
        final_mean_direction_norm: run.final_tokens.mean_direction_norm(),
    };
    stage("write", write_collapse(out, &run, &report))
}

fn write_collapse(out: &mut Outputs, run: &DynamicsRun, report: &CollapseReport) -> Result<()> {
    out.csv("trace.csv", trace_table(&run.traces))?;
    out.json("collapse.json", report)?;
    for t in &run.traces {
        out.heatmap(&format!("attention_layer_{:03}.pgm", t.layer_index), t)?;
    }
    if run.traces.len() >= 2 {
        out.plot(
            "entropy.svg",
            &LinePlot {
                title: "Normalized singular-value entropy".into(),
                x_label: "layer".into(),
                y_label: "entropy / ln N".into(),
                series: vec![layer_series("entropy", &run.traces, |t| t.entropy_normalized)],
            },
        )?;
        out.plot(
            "rank.svg",
            &LinePlot {
                title: "Effective rank of attention".into(),
                x_label: "layer".into(),
                y_label: "effective rank".into(),
                series: vec![layer_series("effective rank", &run.traces, |t| t.effective_rank)],
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepFits {
    readout_layer: usize,
    n_tokens: usize,
    entropy_model: TheoryModel,
    rank_model: TheoryModel,
}

#[derive(Serialize)]
struct SweepReport {
    fits: Vec<SweepFits>,
}

struct SweepPoint {
    m: f64,
    d: f64,
    run: DynamicsRun,
    tau: CollapseTime,
}

fn merge_sweep(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let dynamics = dynamics_for(cfg);
    let x0 = stage("init", initial_tokens(cfg))?;
    let template = cfg.merge.clone().unwrap_or_default();
    let mut points = Vec::with_capacity(cfg.sweep.fusion_m.len());
    for &m in &cfg.sweep.fusion_m {
        let merge = MergeConfig {
            fusion_m: m,
            ..template.clone()
        };
        let run = stage(&format!("dynamics at m = {m}"), run_dynamics(&x0, &dynamics, Some(&merge), &[]))?;
        let tau = collapse_time(&run.traces, cfg.entropy_threshold, CollapseDefinition::EntropyBelow)?;
        points.push(SweepPoint {
            m,
            d: realized_d(&run.traces, &merge),
            run,
            tau,
        });
    }

    let readouts = if cfg.sweep.layers.is_empty() {
        vec![default_readout(&points, dynamics.layers)]
    } else {
        cfg.sweep.layers.clone()
    };
    let mut fits = Vec::new();
    for (idx, &depth) in readouts.iter().enumerate() {
        let at = |p: &SweepPoint| p.run.traces[depth - 1].clone();
        let entropy_pts: Vec<(f64, f64)> = points.iter().map(|p| (p.d, at(p).entropy_normalized)).collect();
        let rank_pts: Vec<(f64, f64)> = points.iter().map(|p| (p.d, at(p).effective_rank)).collect();
        let l = depth as f64;
        let entropy_model = stage("entropy fit", fit_entropy_across_d(&entropy_pts, l, cfg.n_tokens))?;
        let rank_model = stage("rank fit", fit_rank_across_d(&rank_pts, l, cfg.n_tokens, TheoryModel::default().r))?;
        let mut table = CsvTable::new(&["m", "d_effective", "entropy_exp", "entropy_theory", "rank_exp", "rank_theory"]);
        for p in &points {
            table.push(vec![
                p.m,
                p.d,
                at(p).entropy_normalized,
                entropy_law(&entropy_model, l, cfg.n_tokens, p.d),
                at(p).effective_rank,
                rank_bound(&rank_model, l, cfg.n_tokens, p.d),
            ]);
        }
        let name = if idx == 0 && readouts.len() == 1 {
            "table1.csv".to_string()
        } else {
            format!("table1_layer_{depth:03}.csv")
        };
        stage("write", out.csv(&name, table))?;
        fits.push(SweepFits {
            readout_layer: depth,
            n_tokens: cfg.n_tokens,
            entropy_model,
            rank_model,
        });
    }

    let mut tau_table = CsvTable::new(&["m", "d_effective", "tau", "censored"]);
    let mut traces = CsvTable::new(&["m", "d_effective", "layer", "entropy_normalized", "effective_rank"]);
    for p in &points {
        tau_table.push(vec![p.m, p.d, p.tau.tau, if p.tau.censored { 1.0 } else { 0.0 }]);
        for t in &p.run.traces {
            traces.push(vec![p.m, p.d, t.layer_index as f64, t.entropy_normalized, t.effective_rank]);
        }
    }
    stage("write", (|| {
        out.csv("tau.csv", tau_table)?;
        out.csv("sweep_traces.csv", traces)?;
        out.json("fits.json", &SweepReport { fits })?;
        if dynamics.layers >= 2 {
            out.plot(
                "sweep_entropy.svg",
                &LinePlot {
                    title: "Entropy under token merging".into(),
                    x_label: "layer".into(),
                    y_label: "entropy / ln N".into(),
                    series: points
                        .iter()
                        .map(|p| layer_series(format!("m = {}", p.m), &p.run.traces, |t| t.entropy_normalized))
                        .collect(),
                },
            )?;
        }
        Ok(())
    })())?;

    if cfg.sweep.include_benchmark {
        let b = &cfg.bench;
        let samples = stage(
            "merged benchmark",
            measure_merge_sweep(b.merge_n_tokens, b.dim, &b.fusion_m, b.layers, b.repetitions, cfg.seed),
        )?;
        stage("write", out.csv("table2.csv", runtime_table(b.merge_n_tokens, &samples)))?;
    }
    Ok(())
}

/// Depth just past the collapse time of the weakest-fusion run, where the
/// spread between fusion strengths is widest; the full depth if censored.
fn default_readout(points: &[SweepPoint], layers: usize) -> usize {
    let weakest = points.iter().min_by(|a, b| a.m.total_cmp(&b.m)).expect("nonempty sweep");
    if weakest.tau.censored {
        layers
    } else {
        (weakest.tau.tau.floor() as usize + 1).clamp(1, layers)
    }
}

fn runtime_table(n: usize, samples: &[RuntimeSample]) -> CsvTable {
    let mut table = CsvTable::new(&crate::bench::CSV_HEADER.split(',').collect::<Vec<_>>());
    let baseline = samples.first().map_or(0.0, |s| s.wall_time / s.relative_runtime);
    table.push(vec![n as f64, 0.0, 1.0, baseline, 1.0, 1.0]);
    for s in samples {
        table.push(vec![s.n_tokens as f64, s.fusion_m, s.d, s.wall_time, s.relative_runtime, s.speedup()]);
    }
    table
}

#[derive(Serialize)]
struct PdeSummary {
    d: f64,
    t_end: f64,
    time_to_mean_norm_099: Option<f64>,
    final_mean_norm: f64,
}

fn pde(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let p = &cfg.pde;
    let x0 = stage("init", init_tokens(p.particles, p.dim, InitDistribution::UniformSphere, cfg.seed))?;
    let p0 = stage(
        "init",
        ParticleSystem::from_tokens(&x0, p.kappa, p.dt).and_then(|s| s.with_noise(p.noise_sigma, cfg.seed)),
    )?;
    let mut runs: Vec<(f64, PdeTrace)> = Vec::new();
    let mut summary = Vec::new();
    for &d in &p.d_values {
        let t_end = if p.scale_time_with_d { p.t_end * d } else { p.t_end };
        let trace = stage(&format!("pde at d = {d}"), run_pde(&p0, t_end, d, p.record_every))?;
        summary.push(PdeSummary {
            d,
            t_end,
            time_to_mean_norm_099: trace.time_to_mean_norm(0.99),
            final_mean_norm: *trace.mean_norms.last().expect("recorded"),
        });
        runs.push((d, trace));
    }
    let mut table = CsvTable::new(&["d", "time", "mean_norm", "variance", "entropy"]);
    for (d, tr) in &runs {
        for i in 0..tr.times.len() {
            table.push(vec![*d, tr.times[i], tr.mean_norms[i], tr.variances[i], tr.entropies[i]]);
        }
    }
    stage("write", (|| {
        out.csv("pde_trace.csv", table)?;
        out.json("pde.json", &summary)?;
        let series = |f: &dyn Fn(&PdeTrace, usize) -> (f64, f64)| -> Vec<Series> {
            runs.iter()
                .filter(|(_, tr)| tr.times.len() >= 2)
                .map(|(d, tr)| Series::new(format!("d = {d}"), (0..tr.times.len()).map(|i| f(tr, i)).collect()))
                .collect()
        };
        let mean_series = series(&|tr, i| (tr.times[i], tr.mean_norms[i]));
        if !mean_series.is_empty() {
            out.plot(
                "pde_mean_norm.svg",
                &LinePlot {
                    title: "Concentration of the particle cloud".into(),
                    x_label: "time".into(),
                    y_label: "|mean|".into(),
                    series: mean_series,
                },
            )?;
        }
        let entropy_series: Vec<Series> = runs
            .iter()
            .map(|(d, tr)| {
                Series::new(
                    format!("d = {d}"),
                    tr.times
                        .iter()
                        .zip(&tr.entropies)
                        .filter(|(_, h)| h.is_finite())
                        .map(|(&t, &h)| (t / d, h))
                        .collect(),
                )
            })
            .filter(|s| s.points.len() >= 2)
            .collect();
        if !entropy_series.is_empty() {
            out.plot(
                "pde_entropy_rescaled.svg",
                &LinePlot {
                    title: "kNN entropy against rescaled time".into(),
                    x_label: "time / d".into(),
                    y_label: "entropy (nats)".into(),
                    series: entropy_series,
                },
            )?;
        }
        Ok(())
    })())
}

#[derive(Serialize)]
struct TauPoint {
    m: f64,
    d: f64,
    layers: usize,
    tau: f64,
    censored: bool,
}

#[derive(Serialize)]
struct TauRegression {
    intercept: f64,
    slope: f64,
    r_squared: f64,
    /// Slope divided by the collapse time at the smallest d.
    slope_over_tau_base: f64,
    /// `tau(d_{i+1}) / tau(d_i)` along increasing d.
    consecutive_ratios: Vec<f64>,
}

#[derive(Serialize)]
struct ScalingReport {
    n_tokens: usize,
    tau: Vec<TauPoint>,
    tau_regression: TauRegression,
    rank_fit: FitReport,
    entropy_fit: FitReport,
    rescaled_entropy_deviation: f64,
}

/// Per-`d` traces of the scaling sweep.
pub struct ScalingSweep {
    pub runs: Vec<(f64, f64, DynamicsRun)>,
}

impl ScalingSweep {
    /// Entropy or effective-rank series per realized `d`.
    pub fn family(&self, n_tokens: usize, f: impl Fn(&LayerTrace) -> f64) -> Vec<TraceSeries> {
        self.runs
            .iter()
            .map(|(_, d, run)| TraceSeries {
                d: *d,
                n_tokens,
                points: run.traces.iter().map(|t| (t.layer_index as f64, f(t))).collect(),
            })
            .collect()
    }
}

/// Runs the dynamics once per scaling fusion strength, with depth scaled by
/// the nominal `d` when configured.
pub fn run_scaling_sweep(cfg: &ExperimentConfig) -> Result<ScalingSweep> {
    let dynamics = dynamics_for(cfg);
    let x0 = stage("init", initial_tokens(cfg))?;
    let template = cfg.merge.clone().unwrap_or_default();
    let mut runs = Vec::new();
    for &m in &cfg.scaling.fusion_m {
        let merge = MergeConfig {
            fusion_m: m,
            ..template.clone()
        };
        let layers = if cfg.scaling.scale_depth_with_d {
            (dynamics.layers as f64 * nominal_downsampling(m)).ceil() as usize
        } else {
            dynamics.layers
        };
        let run_cfg = DynamicsConfig { layers, ..dynamics.clone() };
        let run = stage(&format!("dynamics at m = {m}"), run_dynamics(&x0, &run_cfg, Some(&merge), &[]))?;
        runs.push((m, realized_d(&run.traces, &merge), run));
    }
    Ok(ScalingSweep { runs })
}

fn scaling_fit(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let sweep = run_scaling_sweep(cfg)?;
    let mut taus = Vec::new();
    for (m, d, run) in &sweep.runs {
        let t = collapse_time(&run.traces, cfg.entropy_threshold, CollapseDefinition::EntropyBelow)?;
        taus.push(TauPoint {
            m: *m,
            d: *d,
            layers: run.traces.len(),
            tau: t.tau,
            censored: t.censored,
        });
    }
    let mut by_d: Vec<&TauPoint> = taus.iter().collect();
    by_d.sort_by(|a, b| a.d.total_cmp(&b.d));
    let xs: Vec<f64> = by_d.iter().map(|t| t.d).collect();
    let ys: Vec<f64> = by_d.iter().map(|t| t.tau).collect();
    let (intercept, slope, r_squared) = stage("tau regression", linear_regression(&xs, &ys))?;
    let tau_regression = TauRegression {
        intercept,
        slope,
        r_squared,
        slope_over_tau_base: slope / ys[0],
        consecutive_ratios: ys.windows(2).map(|w| w[1] / w[0]).collect(),
    };
    let n = cfg.n_tokens;
    let rank_family = sweep.family(n, |t| t.effective_rank);
    let entropy_family = sweep.family(n, |t| t.entropy_normalized);
    let rank_fit = stage("rank fit", fit_constants(&rank_family, FitLaw::RankExp, &TheoryModel::default()))?;
    let entropy_fit = stage("entropy fit", fit_constants(&entropy_family, FitLaw::EntropyLinear, &TheoryModel::default()))?;
    let rescaled_entropy_deviation = stage("rescaled comparison", rescaled_deviation(&entropy_family))?;

    let mut table = CsvTable::new(&["m", "d_effective", "layer", "rescaled_layer", "entropy_normalized", "effective_rank"]);
    for (m, d, run) in &sweep.runs {
        for t in &run.traces {
            let l = t.layer_index as f64;
            table.push(vec![*m, *d, l, l / d, t.entropy_normalized, t.effective_rank]);
        }
    }
    let report = ScalingReport {
        n_tokens: n,
        tau: taus,
        tau_regression,
        rank_fit,
        entropy_fit,
        rescaled_entropy_deviation,
    };
    stage("write", (|| {
        out.csv("scaling_traces.csv", table)?;
        out.json("scaling_fit.json", &report)?;
        out.plot(
            "entropy_rescaled.svg",
            &LinePlot {
                title: "Entropy against layer / d".into(),
                x_label: "layer / d".into(),
                y_label: "entropy / ln N".into(),
                series: entropy_family
                    .iter()
                    .filter(|s| s.points.len() >= 2)
                    .map(|s| Series::new(format!("d = {:.3}", s.d), s.points.iter().map(|&(l, v)| (l / s.d, v)).collect()))
                    .collect(),
            },
        )?;
        Ok(())
    })())
}

#[derive(Serialize)]
struct BenchReport {
    scaling_exponent: f64,
    scaling_r_squared: f64,
    dim: usize,
    repetitions: usize,
    parallel_kernels: bool,
}

fn benchmark(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let b = &cfg.bench;
    let mut samples = Vec::new();
    for &n in &cfg.sweep.n_tokens {
        samples.push(stage(&format!("attention cost at n = {n}"), measure_attention_cost(n, b.dim, b.repetitions, cfg.seed))?);
    }
    let (exponent, r2) = stage("scaling regression", scaling_exponent(&samples))?;
    let merged = stage(
        "merged benchmark",
        measure_merge_sweep(b.merge_n_tokens, b.dim, &b.fusion_m, b.layers, b.repetitions, cfg.seed),
    )?;
    let mut scaling = CsvTable::new(&crate::bench::CSV_HEADER.split(',').collect::<Vec<_>>());
    for s in &samples {
        scaling.push(vec![s.n_tokens as f64, 0.0, 1.0, s.wall_time, 1.0, 1.0]);
    }
    stage("write", (|| {
        out.csv("bench_scaling.csv", scaling)?;
        out.csv("table2.csv", runtime_table(b.merge_n_tokens, &merged))?;
        out.json(
            "bench.json",
            &BenchReport {
                scaling_exponent: exponent,
                scaling_r_squared: r2,
                dim: b.dim,
                repetitions: b.repetitions,
                parallel_kernels: parallel_enabled(),
            },
        )?;
        out.plot(
            "bench_scaling.svg",
            &LinePlot {
                title: "Dense attention cost".into(),
                x_label: "ln N".into(),
                y_label: "ln seconds".into(),
                series: vec![Series::new(
                    "measured",
                    samples.iter().map(|s| ((s.n_tokens as f64).ln(), s.wall_time.ln())).collect(),
                )],
            },
        )?;
        Ok(())
    })())
}
