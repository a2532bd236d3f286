//! Experiment runner.
//!
//! An [`ExperimentConfig`] names a model, how to prepare the initial state, a
//! time grid and the back-ends to run. [`run_experiment`] prepares the state
//! once, propagates it with every requested back-end, compares the results
//! against the exact dynamics and writes CSV files plus a manifest from which
//! the run can be repeated bit for bit.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::classical::{
    stream_trajectory, BoseHubbardClassical, ClassicalHamiltonian, FlowEnd, HoppingOrdering,
    PhaseSpacePoint, TrajectoryStatus,
};
use crate::exact::{
    imbalance_expectation, occupation_expectation, prepare_ground_state,
    tilt_for_target_imbalance, Propagator, QuantumState,
};
use crate::hk::{fidelity, run_hk, HkConfig, HkRun, MomentumGrid};
use crate::model::{build_fock_basis, build_hamiltonian, ModelParams};
use crate::ode::IntegratorOptions;
use crate::twa::{
    fit_gaussian_to_ground_state, run_twa, sample_wigner, EnsembleResult, GaussianFit, TwaConfig,
};
use crate::{Error, Result};

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESET_NAMES: [&str; 7] = ["fig1", "fig2", "fig3", "fig4", "fig5", "fig6", "fig7"];

/// Annotated config file listing every key.
pub const CONFIG_SCHEMA: &str = include_str!("../presets/schema.toml");

const PRESETS: [&str; 7] = [
    include_str!("../presets/fig1.toml"),
    include_str!("../presets/fig2.toml"),
    include_str!("../presets/fig3.toml"),
    include_str!("../presets/fig4.toml"),
    include_str!("../presets/fig5.toml"),
    include_str!("../presets/fig6.toml"),
    include_str!("../presets/fig7.toml"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Exact,
    Classical,
    Twa,
    Hk,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Exact => "exact",
            Backend::Classical => "classical",
            Backend::Twa => "twa",
            Backend::Hk => "hk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    #[default]
    Raw,
    /// Multiples of the plasma period `2π/ω_p`.
    PlasmaPeriods,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t_max: f64,
    /// Number of intervals; the grid has `steps + 1` points starting at 0.
    pub steps: usize,
    #[serde(default)]
    pub unit: TimeUnit,
}

impl TimeGrid {
    /// Raw time per configured unit.
    pub fn scale(&self, params: &ModelParams) -> f64 {
        match self.unit {
            TimeUnit::Raw => 1.0,
            TimeUnit::PlasmaPeriods => 2.0 * PI / params.plasma_frequency(),
        }
    }

    pub fn times(&self, params: &ModelParams) -> Vec<f64> {
        let t_max = self.t_max * self.scale(params);
        (0..=self.steps)
            .map(|k| t_max * k as f64 / self.steps as f64)
            .collect()
    }
}

/// Either the imbalance to reach or the tilt to apply while preparing the
/// ground state; exactly one must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preparation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalConfig {
    #[serde(default)]
    pub integrator: IntegratorOptions,
}

/// Comparison windows, in the unit of the time grid. Both default to the
/// whole grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[f64; 2]>,
    /// Post-collapse window for the revival amplitude.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revival_window: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory relative to the output root.
    pub dir: String,
    /// Write the exact and HK wave functions on the number grid.
    #[serde(default)]
    pub wavefunctions: bool,
    /// Write the sampled initial Wigner points; uses the `twa` section.
    #[serde(default)]
    pub wigner_samples: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub backends: Vec<Backend>,
    /// Operator ordering of the classical hopping term.
    #[serde(default = "default_ordering")]
    pub ordering: HoppingOrdering,
    pub model: ModelParams,
    pub preparation: Preparation,
    pub time_grid: TimeGrid,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classical: Option<ClassicalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twa: Option<TwaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hk: Option<HkConfig>,
}

fn default_ordering() -> HoppingOrdering {
    HoppingOrdering::Symmetric
}

impl ExperimentConfig {
    /// Parses a config file or a manifest (whose `[config]` table is used).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let table = match table.get("config") {
            Some(toml::Value::Table(inner)) if table.contains_key("run") => inner.clone(),
            _ => table,
        };
        let config: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let index = PRESET_NAMES
            .iter()
            .position(|p| *p == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset `{name}`; expected one of {}",
                    PRESET_NAMES.join(", ")
                ))
            })?;
        Self::from_toml_str(PRESETS[index])
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn runs(&self, backend: Backend) -> bool {
        self.backends.contains(&backend)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.backends.is_empty() {
            return fail("at least one backend is required".into());
        }
        for (i, b) in self.backends.iter().enumerate() {
            if self.backends[..i].contains(b) {
                return fail(format!("backend `{}` listed twice", b.name()));
            }
        }
        match (self.preparation.j_target, self.preparation.delta) {
            (Some(j), None) if j.is_finite() => {}
            (None, Some(d)) if d.is_finite() => {}
            _ => return fail("preparation needs exactly one finite j_target or delta".into()),
        }
        let grid = &self.time_grid;
        if !(grid.t_max > 0.0 && grid.t_max.is_finite()) || grid.steps < 1 {
            return fail("time_grid needs t_max > 0 and steps >= 1".into());
        }
        for (key, w) in [
            ("metrics.window", self.metrics.window),
            ("metrics.revival_window", self.metrics.revival_window),
        ] {
            if let Some([a, b]) = w {
                if !(a < b && a.is_finite() && b.is_finite()) {
                    return fail(format!("{key} must satisfy start < end"));
                }
            }
        }
        if (self.runs(Backend::Twa) || self.output.wigner_samples) && self.twa.is_none() {
            return fail("the twa backend and wigner_samples need a [twa] section".into());
        }
        if let Some(twa) = &self.twa {
            if twa.samples < 1 {
                return fail("twa.samples must be at least 1".into());
            }
        }
        if self.runs(Backend::Hk) {
            match &self.hk {
                Some(hk) => hk.validate()?,
                None => return fail("the hk backend needs an [hk] section".into()),
            }
        }
        let dir = Path::new(&self.output.dir);
        if self.output.dir.is_empty()
            || dir.is_absolute()
            || dir.components().any(|c| matches!(c, std::path::Component::ParentDir))
        {
            return fail("output.dir must be a non-empty relative path inside the output root".into());
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        self.time_grid.times(&self.model)
    }

    fn raw_window(&self, w: Option<[f64; 2]>) -> [f64; 2] {
        let s = self.time_grid.scale(&self.model);
        match w {
            Some([a, b]) => [a * s, b * s],
            None => [0.0, self.time_grid.t_max * s],
        }
    }

    /// Metrics window in raw time.
    pub fn window(&self) -> [f64; 2] {
        self.raw_window(self.metrics.window)
    }

    /// Revival window in raw time; falls back to the metrics window.
    pub fn revival_window(&self) -> [f64; 2] {
        self.raw_window(self.metrics.revival_window.or(self.metrics.window))
    }

    fn classical_integrator(&self) -> IntegratorOptions {
        self.classical
            .as_ref()
            .map(|c| c.integrator)
            .unwrap_or_default()
    }
}

/// Column names of the observables: `j` for two wells, `n1, n2, n3` for three.
pub fn observable_names(modes: usize) -> Vec<&'static str> {
    if modes == 2 {
        vec!["j"]
    } else {
        vec!["n1", "n2", "n3"]
    }
}

fn modes_of(names: &[&str]) -> usize {
    if names.len() == 1 {
        2
    } else {
        3
    }
}

/// Observables from the canonical momenta.
fn observables_from_momenta(modes: usize, n_total: f64, p: &[f64]) -> Vec<f64> {
    if modes == 2 {
        vec![p[0]]
    } else {
        vec![p[0], p[1], n_total - p[0] - p[1]]
    }
}

/// A sampled real time series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                found: values.len(),
            });
        }
        Ok(Self { times, values })
    }

    /// Indices of the samples inside `[t0, t1]`.
    fn window_indices(&self, window: [f64; 2]) -> Result<std::ops::Range<usize>> {
        let [t0, t1] = window;
        let (start, end) = match (self.times.first(), self.times.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(Error::ParameterDomain("empty time series".into())),
        };
        let slack = 1e-9 * (end - start).abs().max(1.0);
        if !(t0 < t1) || t0 < start - slack || t1 > end + slack {
            return Err(Error::WindowOutsideGrid {
                t0,
                t1,
                grid_start: start,
                grid_end: end,
            });
        }
        let lo = self.times.partition_point(|&t| t < t0 - slack);
        let hi = self.times.partition_point(|&t| t <= t1 + slack);
        Ok(lo..hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMetrics {
    /// `√(mean (a - b)²)` over the window.
    pub rms: f64,
    pub max_abs_dev: f64,
    /// `max |a|` and `max |b|` over the window.
    pub revival_amplitude: [f64; 2],
    /// Angular frequency of the strongest Fourier component of `a` and `b`.
    pub dominant_frequency: [f64; 2],
}

/// Compares two series sampled on the same grid over `window`.
pub fn compare_metrics(
    a: &TimeSeries,
    b: &TimeSeries,
    window: [f64; 2],
) -> Result<ComparisonMetrics> {
    if a.times != b.times {
        return Err(Error::ParameterDomain(
            "series must share one time grid".into(),
        ));
    }
    let range = a.window_indices(window)?;
    if range.is_empty() {
        return Err(Error::ParameterDomain(format!(
            "window [{}, {}] holds no samples",
            window[0], window[1]
        )));
    }
    let xa = &a.values[range.clone()];
    let xb = &b.values[range.clone()];
    let n = xa.len() as f64;
    let mut sq = 0.0;
    let mut max_abs_dev = 0.0f64;
    for (x, y) in xa.iter().zip(xb) {
        let d = x - y;
        sq += d * d;
        max_abs_dev = max_abs_dev.max(d.abs());
    }
    if sq.is_nan() {
        max_abs_dev = f64::NAN;
    }
    let times = &a.times[range];
    Ok(ComparisonMetrics {
        rms: (sq / n).sqrt(),
        max_abs_dev,
        revival_amplitude: [max_abs(xa), max_abs(xb)],
        dominant_frequency: [
            dominant_frequency(times, xa)?,
            dominant_frequency(times, xb)?,
        ],
    })
}

fn max_abs(x: &[f64]) -> f64 {
    if x.iter().any(|v| v.is_nan()) {
        return f64::NAN;
    }
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Angular frequency of the largest non-zero Fourier peak of a uniformly
/// sampled series, refined by parabolic interpolation on an 8× zero-padded
/// transform. Returns 0 for constant input.
pub fn dominant_frequency(times: &[f64], values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 3 {
        return Ok(f64::NAN);
    }
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    if times
        .windows(2)
        .any(|w| ((w[1] - w[0]) - dt).abs() > 1e-6 * dt)
    {
        return Err(Error::ParameterDomain(
            "dominant frequency needs a uniform time grid".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Ok(f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let len = (8 * n).next_power_of_two();
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (b, v) in buf.iter_mut().zip(values) {
        b.re = v - mean;
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let mag: Vec<f64> = buf[..len / 2].iter().map(|c| c.norm()).collect();
    let (peak, &top) = mag
        .iter()
        .enumerate()
        .skip(1)
        .fold((0, &0.0), |best, (k, m)| if *m > *best.1 { (k, m) } else { best });
    if peak == 0 || top == 0.0 {
        return Ok(0.0);
    }
    let mut k = peak as f64;
    if peak + 1 < mag.len() {
        let (l, c, r) = (mag[peak - 1], mag[peak], mag[peak + 1]);
        let curv = l - 2.0 * c + r;
        if curv < 0.0 {
            k += 0.5 * (l - r) / curv;
        }
    }
    Ok(2.0 * PI * k / (len as f64 * dt))
}

/// Reads `column` (default: the third column) against the `t` column of a
/// CSV written by [`run_experiment`].
pub fn read_series(path: &Path, column: Option<&str>) -> Result<TimeSeries> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?
        .clone();
    if headers.get(0) != Some("t") {
        return Err(Error::Csv(format!(
            "{}: first column must be `t`, found `{}`",
            path.display(),
            headers.get(0).unwrap_or("")
        )));
    }
    let col = match column {
        Some(name) => headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Csv(format!("{}: no column `{name}`", path.display()))
        })?,
        None if headers.len() > 2 => 2,
        None => {
            return Err(Error::Csv(format!(
                "{}: no observable column after `t`, `t_wp`",
                path.display()
            )))
        }
    };
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        let parse = |i: usize| -> Result<f64> {
            let field = record.get(i).unwrap_or("");
            field.trim().parse().map_err(|_| {
                Error::Csv(format!(
                    "{}: row {}: column `{}` holds `{field}`, not a number",
                    path.display(),
                    line + 2,
                    &headers[i]
                ))
            })
        };
        times.push(parse(0)?);
        values.push(parse(col)?);
    }
    TimeSeries::new(times, values)
}

/// Exact expectation values, one vector per observable.
#[derive(Debug, Clone)]
pub struct ExactSeries {
    pub observables: Vec<Vec<f64>>,
    /// Kept when wave functions are written.
    pub states: Option<Vec<QuantumState>>,
}

/// The mean-field trajectory started from the Gaussian center.
#[derive(Debug, Clone)]
pub struct ClassicalSeries {
    /// NaN after the trajectory ended.
    pub observables: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    pub status: TrajectoryStatus,
}

/// Comparison of one back-end against the exact result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendMetrics {
    pub backend: Backend,
    pub observable: String,
    pub window: [f64; 2],
    pub revival_window: [f64; 2],
    /// NaN without an exact reference.
    pub rms: f64,
    pub max_abs_dev: f64,
    pub revival_amplitude: f64,
    pub reference_revival_amplitude: f64,
    pub dominant_frequency: f64,
    pub reference_dominant_frequency: f64,
}

/// Per back-end outcome recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendRecord {
    pub name: String,
    /// `ok`, `flagged` or `failed`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escaped_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtered_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_trajectories: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_fidelity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_status: Option<TrajectoryStatus>,
}

/// Derived quantities of a run, written next to the config in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub code_version: String,
    pub plasma_frequency: f64,
    pub t_max: f64,
    pub window: [f64; 2],
    pub revival_window: [f64; 2],
    pub preparation_tilt: f64,
    pub fit_q: Vec<f64>,
    pub fit_p: Vec<f64>,
    pub fit_gamma: Vec<f64>,
    pub fit_residual: f64,
    pub flagged: bool,
    pub failed: bool,
    pub backends: Vec<BackendRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub run: RunRecord,
    pub config: ExperimentConfig,
}

/// Everything computed by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
    pub times: Vec<f64>,
    pub plasma_frequency: f64,
    pub preparation_tilt: f64,
    pub initial_state: QuantumState,
    pub fit: GaussianFit,
    pub exact: Option<ExactSeries>,
    pub classical: Option<ClassicalSeries>,
    pub twa: Option<EnsembleResult>,
    pub hk: Option<HkRun>,
    /// Fidelity of the t = 0 HK wave function with the fitted Gaussian.
    pub hk_initial_fidelity: Option<f64>,
    pub metrics: Vec<BackendMetrics>,
    pub failures: Vec<(Backend, String)>,
}

impl ExperimentReport {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }

    /// Any back-end crossed its reliability limit.
    pub fn flagged(&self) -> bool {
        self.twa.as_ref().is_some_and(|t| t.flagged())
            || self.hk.as_ref().is_some_and(|h| h.flagged)
    }

    /// Time series of observable `component` from `backend`.
    pub fn series(&self, backend: Backend, component: usize) -> Option<Vec<f64>> {
        let n = self.config.model.n_total as f64;
        let modes = self.config.model.modes;
        let from_ensemble = |e: &EnsembleResult| -> Vec<f64> {
            if modes == 3 && component == 2 {
                e.mean(0)
                    .iter()
                    .zip(e.mean(1))
                    .map(|(a, b)| n - a - b)
                    .collect()
            } else {
                e.mean(component).to_vec()
            }
        };
        match backend {
            Backend::Exact => self.exact.as_ref().map(|e| e.observables[component].clone()),
            Backend::Classical => self
                .classical
                .as_ref()
                .map(|c| c.observables[component].clone()),
            Backend::Twa => self.twa.as_ref().map(from_ensemble),
            Backend::Hk => self.hk.as_ref().map(|h| from_ensemble(&h.ensemble)),
        }
    }

    pub fn manifest(&self) -> Manifest {
        let mut backends = Vec::new();
        for &b in &self.config.backends {
            let mut rec = BackendRecord {
                name: b.name().into(),
                status: "ok".into(),
                error: None,
                seed: None,
                samples: None,
                escaped_fraction: None,
                filtered_fraction: None,
                failed_trajectories: None,
                initial_fidelity: None,
                trajectory_status: None,
            };
            if let Some((_, msg)) = self.failures.iter().find(|(f, _)| *f == b) {
                rec.status = "failed".into();
                rec.error = Some(msg.clone());
            }
            match b {
                Backend::Exact => {}
                Backend::Classical => {
                    rec.trajectory_status = self.classical.as_ref().map(|c| c.status);
                }
                Backend::Twa => {
                    let cfg = self.config.twa.as_ref().expect("validated");
                    rec.seed = Some(cfg.seed);
                    rec.samples = Some(cfg.samples);
                    if let Some(t) = &self.twa {
                        rec.escaped_fraction = Some(t.escaped_fraction);
                        if t.flagged() {
                            rec.status = "flagged".into();
                        }
                    }
                }
                Backend::Hk => {
                    let cfg = self.config.hk.as_ref().expect("validated");
                    rec.seed = Some(cfg.seed);
                    rec.samples = Some(cfg.samples);
                    if let Some(h) = &self.hk {
                        rec.escaped_fraction = Some(h.ensemble.escaped_fraction);
                        rec.filtered_fraction = Some(h.wavefunction.final_filtered_fraction());
                        rec.failed_trajectories = Some(h.failed);
                        rec.initial_fidelity = self.hk_initial_fidelity;
                        if h.flagged {
                            rec.status = "flagged".into();
                        }
                    }
                }
            }
            backends.push(rec);
        }
        let init = &self.fit.state;
        Manifest {
            run: RunRecord {
                code_version: env!("CARGO_PKG_VERSION").into(),
                plasma_frequency: self.plasma_frequency,
                t_max: self.times.last().copied().unwrap_or(0.0),
                window: self.config.window(),
                revival_window: self.config.revival_window(),
                preparation_tilt: self.preparation_tilt,
                fit_q: init.center.q.clone(),
                fit_p: init.center.p.clone(),
                fit_gamma: init.gamma.clone(),
                fit_residual: self.fit.residual,
                flagged: self.flagged(),
                failed: self.failed(),
                backends,
            },
            config: self.config.clone(),
        }
    }
}

/// The initial state shared by all back-ends.
#[derive(Debug, Clone)]
pub struct PreparedState {
    /// Tilt of the preparation Hamiltonian.
    pub tilt: f64,
    pub state: QuantumState,
    pub fit: GaussianFit,
}

/// Ground state of the model under the configured preparation tilt and its
/// Gaussian fit.
pub fn prepare(config: &ExperimentConfig) -> Result<PreparedState> {
    let params = config.model;
    let basis = Arc::new(build_fock_basis(params.modes, params.n_total)?);
    let tilt = match (config.preparation.j_target, config.preparation.delta) {
        (Some(j), _) => tilt_for_target_imbalance(&params, j)?,
        (_, Some(d)) => d,
        _ => return Err(Error::Config("preparation needs j_target or delta".into())),
    };
    let state = prepare_ground_state(&params.with_tilt(tilt), basis)?.state;
    let fit = fit_gaussian_to_ground_state(&state)?;
    Ok(PreparedState { tilt, state, fit })
}

/// Runs `config` and writes its artifacts below `output_root/config.output.dir`.
///
/// Configuration errors and failures while preparing the initial state are
/// returned as errors. A failing back-end is recorded in the report and the
/// manifest while the remaining back-ends still run.
pub fn run_experiment(config: &ExperimentConfig, output_root: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    let params = config.model;
    let modes = params.modes;
    let n_total = params.n_total as f64;
    let PreparedState {
        tilt: preparation_tilt,
        state: initial_state,
        fit,
    } = prepare(config)?;
    let basis = initial_state.basis().clone();
    let times = config.times();
    let omega_p = params.plasma_frequency();
    let dir = output_root.join(&config.output.dir);
    fs::create_dir_all(&dir)?;
    let names = observable_names(modes);
    let hamiltonian = BoseHubbardClassical::new(&params, config.ordering)?;

    let mut report = ExperimentReport {
        config: config.clone(),
        output_dir: dir.clone(),
        times: times.clone(),
        plasma_frequency: omega_p,
        preparation_tilt,
        initial_state: initial_state.clone(),
        fit: fit.clone(),
        exact: None,
        classical: None,
        twa: None,
        hk: None,
        hk_initial_fidelity: None,
        metrics: Vec::new(),
        failures: Vec::new(),
    };

    if config.output.wigner_samples {
        let twa = config.twa.as_ref().expect("validated");
        let points = sample_wigner(&fit.state, twa.samples, twa.seed);
        write_wigner_samples(&dir.join("wigner_samples.csv"), &hamiltonian, &points)?;
    }

    for &backend in &config.backends {
        log::info!("running backend {}", backend.name());
        let outcome = match backend {
            Backend::Exact => run_exact(config, &initial_state, &times).and_then(|e| {
                write_exact(&dir, &times, omega_p, &names, &e)?;
                report.exact = Some(e);
                Ok(())
            }),
            Backend::Classical => {
                let c = run_classical(config, &hamiltonian, &fit.state.center, &times);
                write_classical(&dir, &times, omega_p, &names, &c)?;
                report.classical = Some(c);
                Ok(())
            }
            Backend::Twa => {
                let cfg = config.twa.as_ref().expect("validated");
                run_twa(&hamiltonian, &fit.state, &times, cfg).and_then(|t| {
                    write_twa(&dir, &times, omega_p, &names, n_total, &t)?;
                    report.twa = Some(t);
                    Ok(())
                })
            }
            Backend::Hk => {
                let cfg = config.hk.as_ref().expect("validated");
                let grid = MomentumGrid::from_basis(&basis);
                run_hk(&hamiltonian, &fit.state, &grid, &times, cfg).and_then(|h| {
                    let gaussian = grid.project_gaussian(&fit.state);
                    report.hk_initial_fidelity = Some(fidelity(h.wavefunction.at(0), &gaussian));
                    write_hk(&dir, &times, omega_p, &names, n_total, &h)?;
                    report.hk = Some(h);
                    Ok(())
                })
            }
        };
        if let Err(e) = outcome {
            if let Error::Io(_) = e {
                return Err(e);
            }
            log::error!("backend {} failed: {e}", backend.name());
            report.failures.push((backend, e.to_string()));
        }
    }

    if config.output.wavefunctions {
        if let Some(states) = report.exact.as_ref().and_then(|e| e.states.as_ref()) {
            let amps: Vec<&[Complex64]> = states.iter().map(|s| s.amplitudes()).collect();
            let grid = MomentumGrid::from_basis(&basis);
            write_wavefunction(&dir.join("exact_wavefunction.csv"), &times, omega_p, &names, n_total, &grid, &amps)?;
        }
        if let Some(h) = &report.hk {
            let amps: Vec<&[Complex64]> = h.wavefunction.amplitudes.iter().map(|a| a.as_slice()).collect();
            write_wavefunction(&dir.join("hk_wavefunction.csv"), &times, omega_p, &names, n_total, &h.wavefunction.grid, &amps)?;
        }
    }

    write_comparison(&dir, &report, &names)?;
    report.metrics = compute_metrics(&report)?;
    write_metrics(&dir.join("metrics.csv"), &report.metrics)?;
    let manifest = toml::to_string(&report.manifest()).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), manifest)?;
    Ok(report)
}

fn run_exact(config: &ExperimentConfig, psi0: &QuantumState, times: &[f64]) -> Result<ExactSeries> {
    let h = build_hamiltonian(&config.model, psi0.basis())?;
    let states = Propagator::new(&h)?.evolve(psi0, times)?;
    let observables = if config.model.modes == 2 {
        vec![states.iter().map(imbalance_expectation).collect::<Result<_>>()?]
    } else {
        (1..=3)
            .map(|w| states.iter().map(|s| occupation_expectation(s, w)).collect())
            .collect::<Result<_>>()?
    };
    Ok(ExactSeries {
        observables,
        states: config.output.wavefunctions.then_some(states),
    })
}

fn run_classical(
    config: &ExperimentConfig,
    h: &BoseHubbardClassical,
    z0: &PhaseSpacePoint,
    times: &[f64],
) -> ClassicalSeries {
    let modes = config.model.modes;
    let n_total = config.model.n_total as f64;
    let width = observable_names(modes).len();
    let mut observables = vec![vec![f64::NAN; times.len()]; width];
    let mut energy = vec![f64::NAN; times.len()];
    let end = stream_trajectory::<_, ()>(
        h,
        z0,
        times,
        &config.classical_integrator(),
        false,
        |s, out| {
            if let Some(k) = out {
                for (c, v) in observables_from_momenta(modes, n_total, s.p).into_iter().enumerate() {
                    observables[c][k] = v;
                }
                energy[k] = h.energy(s.q, s.p).unwrap_or(f64::NAN);
            }
            ControlFlow::Continue(())
        },
    );
    let status = match end {
        Ok(()) => TrajectoryStatus::Alive,
        Err(FlowEnd::Escaped { .. }) => TrajectoryStatus::Escaped,
        Err(_) => TrajectoryStatus::Failed,
    };
    ClassicalSeries {
        observables,
        energy,
        status,
    }
}

fn compute_metrics(report: &ExperimentReport) -> Result<Vec<BackendMetrics>> {
    let config = &report.config;
    let window = config.window();
    let revival_window = config.revival_window();
    let name = observable_names(config.model.modes)[0];
    let reference = report
        .series(Backend::Exact, 0)
        .map(|v| TimeSeries::new(report.times.clone(), v))
        .transpose()?;
    let mut out = Vec::new();
    for &backend in &config.backends {
        let Some(values) = report.series(backend, 0) else {
            continue;
        };
        let series = TimeSeries::new(report.times.clone(), values)?;
        let base = reference.as_ref().unwrap_or(&series);
        let main = compare_metrics(base, &series, window)?;
        let revival = compare_metrics(base, &series, revival_window)?;
        let has_ref = reference.is_some();
        let or_nan = |x: f64| if has_ref { x } else { f64::NAN };
        out.push(BackendMetrics {
            backend,
            observable: name.into(),
            window,
            revival_window,
            rms: or_nan(main.rms),
            max_abs_dev: or_nan(main.max_abs_dev),
            revival_amplitude: revival.revival_amplitude[1],
            reference_revival_amplitude: or_nan(revival.revival_amplitude[0]),
            dominant_frequency: main.dominant_frequency[1],
            reference_dominant_frequency: or_nan(main.dominant_frequency[0]),
        });
    }
    Ok(out)
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_table(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn time_header() -> Vec<String> {
    vec!["t".into(), "t_wp".into()]
}

fn time_cells(t: f64, omega_p: f64) -> Vec<String> {
    vec![num(t), num(t * omega_p)]
}

fn write_exact(dir: &Path, times: &[f64], omega_p: f64, names: &[&str], e: &ExactSeries) -> Result<()> {
    let mut header = time_header();
    header.extend(names.iter().map(|n| n.to_string()));
    write_table(
        &dir.join("exact.csv"),
        &header,
        times.iter().enumerate().map(|(k, &t)| {
            let mut row = time_cells(t, omega_p);
            row.extend(e.observables.iter().map(|o| num(o[k])));
            row
        }),
    )
}

fn write_classical(dir: &Path, times: &[f64], omega_p: f64, names: &[&str], c: &ClassicalSeries) -> Result<()> {
    let mut header = time_header();
    header.extend(names.iter().map(|n| n.to_string()));
    header.push("energy".into());
    write_table(
        &dir.join("classical.csv"),
        &header,
        times.iter().enumerate().map(|(k, &t)| {
            let mut row = time_cells(t, omega_p);
            row.extend(c.observables.iter().map(|o| num(o[k])));
            row.push(num(c.energy[k]));
            row
        }),
    )
}

/// Mean and standard error columns for the canonical momenta, plus `n3`
/// (mean only) for three wells.
fn ensemble_columns(names: &[&str], e: &EnsembleResult) -> (Vec<String>, Vec<Vec<String>>) {
    let d = e.observables.len();
    let mut header = Vec::new();
    for name in &names[..d] {
        header.push(name.to_string());
        header.push(format!("{name}_stderr"));
    }
    if names.len() > d {
        header.push(names[d].to_string());
    }
    let rows = (0..e.times.len())
        .map(|k| {
            let mut row = Vec::new();
            for c in 0..d {
                row.push(num(e.mean(c)[k]));
                row.push(num(e.stderr(c).map_or(f64::NAN, |s| s[k])));
            }
            row
        })
        .collect();
    (header, rows)
}

fn write_twa(
    dir: &Path,
    times: &[f64],
    omega_p: f64,
    names: &[&str],
    n_total: f64,
    e: &EnsembleResult,
) -> Result<()> {
    let (cols, rows) = ensemble_columns(names, e);
    let mut header = time_header();
    header.extend(cols);
    header.push("alive_count".into());
    write_table(
        &dir.join("twa.csv"),
        &header,
        rows.into_iter().enumerate().map(|(k, cells)| {
            let mut row = time_cells(times[k], omega_p);
            row.extend(cells);
            if names.len() > e.observables.len() {
                row.push(num(n_total - e.mean(0)[k] - e.mean(1)[k]));
            }
            row.push(e.alive_count[k].to_string());
            row
        }),
    )
}

fn write_hk(
    dir: &Path,
    times: &[f64],
    omega_p: f64,
    names: &[&str],
    n_total: f64,
    h: &HkRun,
) -> Result<()> {
    let e = &h.ensemble;
    let w = &h.wavefunction;
    let mut header = time_header();
    header.extend(names.iter().map(|n| n.to_string()));
    header.extend(
        ["raw_norm", "filtered_fraction", "escaped_fraction", "alive_count"]
            .iter()
            .map(|s| s.to_string()),
    );
    write_table(
        &dir.join("hk.csv"),
        &header,
        times.iter().enumerate().map(|(k, &t)| {
            let mut row = time_cells(t, omega_p);
            let p: Vec<f64> = (0..e.observables.len()).map(|c| e.mean(c)[k]).collect();
            row.extend(
                observables_from_momenta(modes_of(names), n_total, &p)
                    .into_iter()
                    .map(num),
            );
            row.push(num(w.raw_norm[k]));
            row.push(num(w.filtered_fraction[k]));
            row.push(num(w.escaped_fraction[k]));
            row.push(e.alive_count[k].to_string());
            row
        }),
    )
}

fn write_wavefunction(
    path: &Path,
    times: &[f64],
    omega_p: f64,
    names: &[&str],
    n_total: f64,
    grid: &MomentumGrid,
    amplitudes: &[&[Complex64]],
) -> Result<()> {
    let modes = modes_of(names);
    let mut header = time_header();
    header.extend(names.iter().map(|n| n.to_string()));
    header.extend(["probability", "re", "im"].iter().map(|s| s.to_string()));
    let mut text = header.join(",");
    text.push('\n');
    for (k, &t) in times.iter().enumerate() {
        let prefix = time_cells(t, omega_p).join(",");
        for (point, a) in grid.points().iter().zip(amplitudes[k]) {
            let coords: Vec<String> = observables_from_momenta(modes, n_total, point)
                .into_iter()
                .map(num)
                .collect();
            let _ = writeln!(
                text,
                "{prefix},{},{},{},{}",
                coords.join(","),
                num(a.norm_sqr()),
                num(a.re),
                num(a.im)
            );
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_wigner_samples(path: &Path, h: &BoseHubbardClassical, points: &[PhaseSpacePoint]) -> Result<()> {
    let (q_names, p_names): (&[&str], &[&str]) = if h.dof() == 1 {
        (&["phi"], &["j"])
    } else {
        (&["theta1", "theta2"], &["n1", "n2"])
    };
    let mut header = vec!["index".to_string()];
    header.extend(q_names.iter().chain(p_names).map(|s| s.to_string()));
    header.push("energy".into());
    write_table(
        path,
        &header,
        points.iter().enumerate().map(|(i, z)| {
            let mut row = vec![i.to_string()];
            row.extend(z.q.iter().chain(&z.p).map(|&x| num(x)));
            row.push(num(h.energy(&z.q, &z.p).unwrap_or(f64::NAN)));
            row
        }),
    )
}

fn write_comparison(dir: &Path, report: &ExperimentReport, names: &[&str]) -> Result<()> {
    let mut header = time_header();
    let mut columns = Vec::new();
    for &b in &report.config.backends {
        for (c, name) in names.iter().enumerate() {
            if let Some(v) = report.series(b, c) {
                header.push(format!("{}_{name}", b.name()));
                columns.push(v);
            }
        }
    }
    write_table(
        &dir.join("comparison.csv"),
        &header,
        report.times.iter().enumerate().map(|(k, &t)| {
            let mut row = time_cells(t, report.plasma_frequency);
            row.extend(columns.iter().map(|c| num(c[k])));
            row
        }),
    )
}

fn write_metrics(path: &Path, metrics: &[BackendMetrics]) -> Result<()> {
    let header: Vec<String> = [
        "backend",
        "observable",
        "window_start",
        "window_end",
        "revival_window_start",
        "revival_window_end",
        "rms",
        "max_abs_dev",
        "revival_amplitude",
        "reference_revival_amplitude",
        "dominant_frequency",
        "reference_dominant_frequency",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    write_table(
        path,
        &header,
        metrics.iter().map(|m| {
            let mut row = vec![m.backend.name().to_string(), m.observable.clone()];
            row.extend(
                [
                    m.window[0],
                    m.window[1],
                    m.revival_window[0],
                    m.revival_window[1],
                    m.rms,
                    m.max_abs_dev,
                    m.revival_amplitude,
                    m.reference_revival_amplitude,
                    m.dominant_frequency,
                    m.reference_dominant_frequency,
                ]
                .into_iter()
                .map(num),
            );
            row
        }),
    )
}
