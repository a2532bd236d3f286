//! Herman-Kluk propagation of Gaussian wave packets.
//!
//! The propagated state is
//!
//! ```text
//! ψ(p', t) = ∫ d^Dq d^Dp / (2π)^D  ⟨p'|z(t)⟩ R(z, t) exp(i S(z, t)) ⟨z|z₀⟩
//! ```
//!
//! evaluated by Monte Carlo with initial conditions drawn from a Gaussian
//! density built from `|⟨z|z₀⟩|` ([`ImportanceSampling`]). The wave function
//! is reconstructed in the momentum (number) representation on a
//! [`MomentumGrid`]; with `ħ = 1`,
//!
//! ```text
//! ⟨p'|z⟩ = (πγ)^(-1/4) exp(-(p' - p)²/(2γ) - i p' q),
//! ```
//!
//! the Fourier transform of `(γ/π)^(1/4) exp(-γ(r - q)²/2 + i p (r - q))`.
//! With this convention `Σ_p' ⟨z_a|p'⟩⟨p'|z_b⟩` reproduces
//! [`coherent_overlap`], which the tests check.

use std::f64::consts::PI;
use std::ops::ControlFlow;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::classical::{
    stream_trajectory, ClassicalHamiltonian, FlowEnd, Monodromy, PhaseSpacePoint,
};
use crate::model::FockBasis;
use crate::ode::IntegratorOptions;
use crate::rng::{ordered_chunk_reduce, sample_stream, standard_normal};
use crate::twa::{EnsembleResult, GaussianInitialState, ObservableSeries};
use crate::{Error, Result};

/// Largest change of the prefactor argument accepted between two
/// consecutive evaluations. Larger jumps cannot be told apart from a branch
/// flip.
pub const BRANCH_JUMP_LIMIT: f64 = 0.5 * PI;

/// Raw norms below this abort the run.
pub const NORM_COLLAPSE: f64 = 1e-3;

/// Filtered fractions at or above this mark a run unreliable.
pub const FILTERED_FRACTION_LIMIT: f64 = 0.1;

const CHUNK: usize = 64;

/// `⟨z_a|z_b⟩` for frozen Gaussians of equal widths, multiplied over degrees
/// of freedom.
pub fn coherent_overlap(za: &PhaseSpacePoint, zb: &PhaseSpacePoint, gamma: &[f64]) -> Complex64 {
    let mut exponent = Complex64::new(0.0, 0.0);
    for k in 0..gamma.len() {
        let dq = za.q[k] - zb.q[k];
        let dp = za.p[k] - zb.p[k];
        let g = gamma[k];
        exponent += Complex64::new(
            -0.25 * g * dq * dq - 0.25 * dp * dp / g,
            0.5 * dq * (za.p[k] + zb.p[k]),
        );
    }
    exponent.exp()
}

/// `⟨z_a|z_b⟩` for Gaussians of widths `gamma_a` and `gamma_b`.
pub fn mixed_width_overlap(
    za: &PhaseSpacePoint,
    gamma_a: &[f64],
    zb: &PhaseSpacePoint,
    gamma_b: &[f64],
) -> Complex64 {
    let mut log_mag = 0.0;
    let mut phase = 0.0;
    for k in 0..gamma_a.len() {
        let (ga, gb) = (gamma_a[k], gamma_b[k]);
        let sum = ga + gb;
        let dq = za.q[k] - zb.q[k];
        let dp = za.p[k] - zb.p[k];
        log_mag += 0.5 * (2.0 * (ga * gb).sqrt() / sum).ln()
            - 0.5 * ga * gb * dq * dq / sum
            - 0.5 * dp * dp / sum;
        phase += dq * (za.p[k] * gb + zb.p[k] * ga) / sum;
    }
    Complex64::from_polar(log_mag.exp(), phase)
}

/// `⟨p'|z⟩` in the momentum representation.
pub fn coherent_momentum_amplitude(point: &[f64], z: &PhaseSpacePoint, gamma: &[f64]) -> Complex64 {
    let mut log_mag = 0.0;
    let mut phase = 0.0;
    for k in 0..gamma.len() {
        let d = point[k] - z.p[k];
        log_mag += -0.25 * (PI * gamma[k]).ln() - 0.5 * d * d / gamma[k];
        phase -= point[k] * z.q[k];
    }
    Complex64::from_polar(log_mag.exp(), phase)
}

#[derive(Debug, Clone)]
enum GridLayout {
    /// `points[i] = start + i·step`
    Line { start: f64, step: f64 },
    /// `(n₁, n₂)` with `n₁ + n₂ ≤ N`, ordered like a three-mode Fock basis.
    Simplex { n_total: usize, lookup: Vec<usize> },
}

/// Points at which semiclassical wave functions are reconstructed.
#[derive(Debug, Clone)]
pub struct MomentumGrid {
    points: Vec<Vec<f64>>,
    cell: f64,
    layout: GridLayout,
}

impl MomentumGrid {
    /// Evenly spaced one-dimensional grid; `step` may be negative.
    pub fn line(start: f64, step: f64, len: usize) -> Self {
        assert!(step != 0.0 && len > 0);
        Self {
            points: (0..len).map(|i| vec![start + step * i as f64]).collect(),
            cell: step.abs(),
            layout: GridLayout::Line { start, step },
        }
    }

    /// Grid aligned index-for-index with a Fock basis: `j` values for two
    /// wells, `(n₁, n₂)` for three.
    pub fn from_basis(basis: &FockBasis) -> Self {
        let points: Vec<Vec<f64>> = (0..basis.dimension()).map(|i| basis.momenta(i)).collect();
        match basis.modes() {
            2 => Self {
                points,
                cell: 1.0,
                layout: GridLayout::Line {
                    start: 0.5 * basis.n_total() as f64,
                    step: -1.0,
                },
            },
            _ => {
                let n = basis.n_total();
                let mut lookup = vec![usize::MAX; (n + 1) * (n + 1)];
                for (i, s) in basis.states().iter().enumerate() {
                    lookup[s[0] * (n + 1) + s[1]] = i;
                }
                Self {
                    points,
                    cell: 1.0,
                    layout: GridLayout::Simplex { n_total: n, lookup },
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Phase-space volume per grid point.
    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn dof(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    /// Axis `k` as `(origin, step, len)`: coordinate values
    /// `origin + i·step`.
    fn axis(&self, _k: usize) -> (f64, f64, usize) {
        match &self.layout {
            GridLayout::Line { start, step } => (*start, *step, self.points.len()),
            GridLayout::Simplex { n_total, .. } => (0.0, 1.0, n_total + 1),
        }
    }

    /// Index range on axis `k` of coordinates within `radius` of `center`.
    fn window(&self, k: usize, center: f64, radius: f64) -> Option<(usize, usize)> {
        let (origin, step, len) = self.axis(k);
        let a = (center - radius - origin) / step;
        let b = (center + radius - origin) / step;
        let lo = a.min(b).ceil().max(0.0);
        let hi = a.max(b).floor().min(len as f64 - 1.0);
        (lo <= hi).then_some((lo as usize, hi as usize))
    }

    /// Calls `f(index, point)` for grid points inside the box
    /// `|point_k - center_k| ≤ radius_k`.
    pub fn for_each_near(&self, center: &[f64], radius: &[f64], mut f: impl FnMut(usize, &[f64])) {
        let windows: Option<Vec<(usize, usize)>> = (0..self.dof())
            .map(|k| self.window(k, center[k], radius[k]))
            .collect();
        let Some(w) = windows else { return };
        match &self.layout {
            GridLayout::Line { .. } => {
                for i in w[0].0..=w[0].1 {
                    f(i, &self.points[i]);
                }
            }
            GridLayout::Simplex { n_total, lookup } => {
                for n1 in w[0].0..=w[0].1 {
                    for n2 in w[1].0..=w[1].1.min(n_total - n1) {
                        let i = lookup[n1 * (n_total + 1) + n2];
                        f(i, &self.points[i]);
                    }
                }
            }
        }
    }

    /// Adds `coeff · Π_k exp(-(p'_k - p_k)²/(2γ_k) - i p'_k q_k)` to `row`
    /// at grid points within `radius` of `p`.
    ///
    /// Factors along each axis follow from a two-term recurrence, so no
    /// transcendental function is evaluated per grid point.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn add_coherent(
        &self,
        q: &[f64],
        p: &[f64],
        gamma: &[f64],
        radius: &[f64],
        coeff: Complex64,
        row: &mut [Complex64],
        scratch: &mut [Vec<Complex64>],
    ) {
        let d = self.dof();
        let mut windows = [(0usize, 0usize); 2];
        for k in 0..d {
            let Some(w) = self.window(k, p[k], radius[k]) else { return };
            windows[k] = w;
            let (origin, step, _) = self.axis(k);
            axis_factors(origin, step, w, q[k], p[k], gamma[k], &mut scratch[k]);
        }
        match &self.layout {
            GridLayout::Line { .. } => {
                let (lo, _) = windows[0];
                for (i, f) in scratch[0].iter().enumerate() {
                    row[lo + i] += coeff * f;
                }
            }
            GridLayout::Simplex { n_total, lookup } => {
                let (lo1, hi1) = windows[0];
                let (lo2, hi2) = windows[1];
                for n1 in lo1..=hi1 {
                    let c1 = coeff * scratch[0][n1 - lo1];
                    let base = n1 * (n_total + 1);
                    for n2 in lo2..=hi2.min(n_total - n1) {
                        row[lookup[base + n2]] += c1 * scratch[1][n2 - lo2];
                    }
                }
            }
        }
    }

    /// `Σ |ψ|² · cell`
    pub fn norm_sqr(&self, psi: &[Complex64]) -> f64 {
        psi.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.cell
    }

    /// A Gaussian state sampled on the grid, normalized on the grid.
    pub fn project_gaussian(&self, init: &GaussianInitialState) -> Vec<Complex64> {
        let mut psi: Vec<Complex64> = self
            .points
            .iter()
            .map(|p| coherent_momentum_amplitude(p, &init.center, &init.gamma))
            .collect();
        let norm = self.norm_sqr(&psi).sqrt();
        psi.iter_mut().for_each(|a| *a /= norm);
        psi
    }
}

fn axis_factors(
    origin: f64,
    step: f64,
    (lo, hi): (usize, usize),
    q: f64,
    p: f64,
    gamma: f64,
    out: &mut Vec<Complex64>,
) {
    out.clear();
    let x = origin + step * lo as f64;
    let dx = x - p;
    let mut term = Complex64::from_polar((-0.5 * dx * dx / gamma).exp(), -x * q);
    let mut ratio = Complex64::from_polar(
        (-(2.0 * dx * step + step * step) / (2.0 * gamma)).exp(),
        -step * q,
    );
    let curvature = (-step * step / gamma).exp();
    for _ in lo..=hi {
        out.push(term);
        term *= ratio;
        ratio *= curvature;
    }
}

/// `|⟨a|b⟩|² / (⟨a|a⟩⟨b|b⟩)` for grid wave functions.
pub fn fidelity(a: &[Complex64], b: &[Complex64]) -> f64 {
    let ab: Complex64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
    let aa: f64 = a.iter().map(|x| x.norm_sqr()).sum();
    let bb: f64 = b.iter().map(|x| x.norm_sqr()).sum();
    ab.norm_sqr() / (aa * bb)
}

/// The HK prefactor
/// `R = det[½(M_qq + Γ⁻¹ M_pp Γ - i M_qp Γ + i Γ⁻¹ M_pq)]^(1/2)` for a diagonal
/// width matrix `Γ` (`ħ = 1`), on the branch continuous with
/// `previous_phase`.
///
/// Returns `R` and the unwrapped argument of the determinant.
pub fn hk_prefactor(
    monodromy: &Monodromy,
    gamma: &[f64],
    previous_phase: f64,
) -> Result<(Complex64, f64)> {
    let det = prefactor_determinant(monodromy, gamma);
    let phase = unwrap_phase(det.arg(), previous_phase)?;
    Ok((Complex64::from_polar(det.norm().sqrt(), 0.5 * phase), phase))
}

pub(crate) fn prefactor_determinant(monodromy: &Monodromy, gamma: &[f64]) -> Complex64 {
    let d = monodromy.dof();
    let entry = |i: usize, k: usize| {
        let (gi, gk) = (gamma[i], gamma[k]);
        0.5 * Complex64::new(
            monodromy.dq_dq(i, k) + gk / gi * monodromy.dp_dp(i, k),
            -gk * monodromy.dq_dp(i, k) + monodromy.dp_dq(i, k) / gi,
        )
    };
    match d {
        1 => entry(0, 0),
        2 => entry(0, 0) * entry(1, 1) - entry(0, 1) * entry(1, 0),
        _ => {
            let m = nalgebra::DMatrix::from_fn(d, d, entry);
            m.determinant()
        }
    }
}

fn unwrap_phase(arg: f64, previous: f64) -> Result<f64> {
    let jump = (arg - previous + PI).rem_euclid(2.0 * PI) - PI;
    if jump.abs() >= BRANCH_JUMP_LIMIT {
        return Err(Error::BranchAmbiguity { jump });
    }
    Ok(previous + jump)
}

/// Shape of the importance density for initial conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceSampling {
    /// Density ∝ |⟨z|z₀⟩|²; the estimator has unbounded variance.
    SquaredOverlap,
    /// Density ∝ |⟨z|z₀⟩|, twice as wide; the minimum-variance choice
    /// among densities of this family.
    #[default]
    OverlapModulus,
}

impl ImportanceSampling {
    fn power(self) -> f64 {
        match self {
            ImportanceSampling::SquaredOverlap => 2.0,
            ImportanceSampling::OverlapModulus => 1.0,
        }
    }
}

/// Sample count and seed are required when read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HkConfig {
    pub samples: usize,
    pub seed: u64,
    /// Propagator width; defaults to the initial state's width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_override: Option<Vec<f64>>,
    #[serde(default = "default_cutoff")]
    pub prefactor_cutoff: f64,
    #[serde(default = "default_renormalize")]
    pub renormalize: bool,
    #[serde(default)]
    pub sampling: ImportanceSampling,
    /// Draws come in groups rotated jointly in every standardized phase
    /// plane by multiples of `2π/rotations`; 1 gives independent draws.
    #[serde(default = "default_rotations")]
    pub rotations: usize,
    #[serde(default)]
    pub integrator: IntegratorOptions,
}

fn default_cutoff() -> f64 {
    10.0
}

fn default_renormalize() -> bool {
    true
}

fn default_rotations() -> usize {
    16
}

impl Default for HkConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 1,
            gamma_override: None,
            prefactor_cutoff: default_cutoff(),
            renormalize: default_renormalize(),
            sampling: ImportanceSampling::default(),
            rotations: default_rotations(),
            integrator: IntegratorOptions::default(),
        }
    }
}

impl HkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::Config("hk.samples must be at least 1".into()));
        }
        if self.rotations < 1 {
            return Err(Error::Config("hk.rotations must be at least 1".into()));
        }
        if !(self.prefactor_cutoff > 1.0) {
            return Err(Error::Config("hk.prefactor_cutoff must exceed 1".into()));
        }
        if let Some(g) = &self.gamma_override {
            if g.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Config("hk.gamma_override must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn propagator_width(&self, init: &GaussianInitialState) -> Vec<f64> {
        self.gamma_override
            .clone()
            .unwrap_or_else(|| init.gamma.clone())
    }
}

/// A sampled initial condition and its Monte Carlo weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoint {
    pub z: PhaseSpacePoint,
    pub weight: Complex64,
}

struct SamplingPlan {
    center: PhaseSpacePoint,
    init_gamma: Vec<f64>,
    gamma: Vec<f64>,
    sd_q: Vec<f64>,
    sd_p: Vec<f64>,
    power: f64,
    rotations: u64,
    /// (2/s)^D, the ratio of the density normalization to (2π)^D.
    norm: f64,
}

impl SamplingPlan {
    fn new(init: &GaussianInitialState, gamma: Vec<f64>, config: &HkConfig) -> Self {
        let power = config.sampling.power();
        let widen = 2.0 / power;
        let mut sd_q = Vec::new();
        let mut sd_p = Vec::new();
        for (g, g0) in gamma.iter().zip(&init.gamma) {
            // |⟨z|z₀⟩|² ∝ exp(-g g0 Δq²/(g + g0) - Δp²/(g + g0))
            sd_q.push((widen * (g + g0) / (2.0 * g * g0)).sqrt());
            sd_p.push((widen * (g + g0) / 2.0).sqrt());
        }
        Self {
            center: init.center.clone(),
            init_gamma: init.gamma.clone(),
            norm: widen.powi(gamma.len() as i32),
            gamma,
            sd_q,
            sd_p,
            power,
            rotations: config.rotations as u64,
        }
    }

    fn draw(&self, seed: u64, index: u64) -> WeightedPoint {
        let mut rng = sample_stream(seed, index / self.rotations);
        let angle = 2.0 * PI * (index % self.rotations) as f64 / self.rotations as f64;
        let (sin, cos) = angle.sin_cos();
        let d = self.gamma.len();
        let mut q = Vec::with_capacity(d);
        let mut p = Vec::with_capacity(d);
        for k in 0..d {
            let a = standard_normal(&mut rng);
            let b = standard_normal(&mut rng);
            q.push(self.center.q[k] + self.sd_q[k] * (cos * a - sin * b));
            p.push(self.center.p[k] + self.sd_p[k] * (sin * a + cos * b));
        }
        let z = PhaseSpacePoint { q, p };
        let overlap = mixed_width_overlap(&z, &self.gamma, &self.center, &self.init_gamma);
        let weight = overlap * overlap.norm().powf(-self.power) * self.norm;
        WeightedPoint { z, weight }
    }
}

/// Draws initial conditions and their importance weights. Sample `i` uses
/// the random stream `(config.seed, i / rotations)`.
pub fn sample_initial_conditions(
    init: &GaussianInitialState,
    config: &HkConfig,
) -> Vec<WeightedPoint> {
    let plan = SamplingPlan::new(init, config.propagator_width(init), config);
    (0..config.samples as u64)
        .map(|i| plan.draw(config.seed, i))
        .collect()
}

/// Reconstructed semiclassical wave function on a grid.
#[derive(Debug, Clone)]
pub struct SemiclassicalWavefunction {
    pub times: Vec<f64>,
    pub grid: MomentumGrid,
    /// One amplitude vector per time.
    pub amplitudes: Vec<Vec<Complex64>>,
    /// Norm before renormalization.
    pub raw_norm: Vec<f64>,
    /// Fraction of samples dropped by the prefactor filter up to each time.
    pub filtered_fraction: Vec<f64>,
    /// Fraction of samples that escaped the number domain up to each time.
    pub escaped_fraction: Vec<f64>,
}

impl SemiclassicalWavefunction {
    pub fn at(&self, k: usize) -> &[Complex64] {
        &self.amplitudes[k]
    }

    /// `⟨p_k⟩` for every time.
    pub fn momentum_mean(&self, component: usize) -> Vec<f64> {
        self.amplitudes
            .iter()
            .map(|psi| {
                let mut num = 0.0;
                let mut den = 0.0;
                for (a, p) in psi.iter().zip(self.grid.points()) {
                    let w = a.norm_sqr();
                    num += w * p[component];
                    den += w;
                }
                num / den
            })
            .collect()
    }

    pub fn final_filtered_fraction(&self) -> f64 {
        self.filtered_fraction.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct HkRun {
    pub wavefunction: SemiclassicalWavefunction,
    pub ensemble: EnsembleResult,
    /// Filtered fraction reached [`FILTERED_FRACTION_LIMIT`].
    pub flagged: bool,
    /// Trajectories dropped because their prefactor branch became ambiguous
    /// or the integrator failed.
    pub failed: usize,
}

struct Accumulator {
    psi: Vec<Complex64>,
    alive: Vec<u64>,
    filtered_at: Vec<u64>,
    escaped_at: Vec<u64>,
    failed_at: Vec<u64>,
    scratch: Vec<Vec<Complex64>>,
}

impl Accumulator {
    fn new(times: usize, grid: usize) -> Self {
        Self {
            psi: vec![Complex64::new(0.0, 0.0); times * grid],
            alive: vec![0; times],
            filtered_at: vec![0; times + 1],
            escaped_at: vec![0; times + 1],
            failed_at: vec![0; times + 1],
            scratch: vec![Vec::new(); 2],
        }
    }

    fn merge(&mut self, other: Self) {
        for (a, b) in self.psi.iter_mut().zip(other.psi) {
            *a += b;
        }
        for (a, b) in self.alive.iter_mut().zip(other.alive) {
            *a += b;
        }
        for (a, b) in self.filtered_at.iter_mut().zip(other.filtered_at) {
            *a += b;
        }
        for (a, b) in self.escaped_at.iter_mut().zip(other.escaped_at) {
            *a += b;
        }
        for (a, b) in self.failed_at.iter_mut().zip(other.failed_at) {
            *a += b;
        }
    }
}

enum Dropped {
    Filtered,
    Branch,
}

/// Propagates `init` with the Herman-Kluk propagator of `h` and reconstructs
/// the wave function on `grid` at every time.
pub fn run_hk<H>(
    h: &H,
    init: &GaussianInitialState,
    grid: &MomentumGrid,
    times: &[f64],
    config: &HkConfig,
) -> Result<HkRun>
where
    H: ClassicalHamiltonian + ?Sized,
{
    config.validate()?;
    crate::exact::check_ascending(times)?;
    let d = h.dof();
    if init.dof() != d || grid.dof() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: init.dof(),
        });
    }
    let gamma = config.propagator_width(init);
    if gamma.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: gamma.len(),
        });
    }
    let plan = SamplingPlan::new(init, gamma.clone(), config);
    let n_times = times.len();
    let n_grid = grid.len();
    let radius: Vec<f64> = gamma.iter().map(|g| (2.0 * g * 37.0).sqrt()).collect();
    let amp_norm: f64 = gamma.iter().map(|g| (PI * g).powf(-0.25)).product();
    let inv_samples = 1.0 / config.samples as f64;

    let acc = ordered_chunk_reduce(
        config.samples,
        CHUNK,
        || Accumulator::new(n_times, n_grid),
        |acc, index| {
            let sample = plan.draw(config.seed, index as u64);
            let mut phase = 0.0;
            let mut next_output = 0usize;
            let end = stream_trajectory(
                h,
                &sample.z,
                times,
                &config.integrator,
                true,
                |state, out| {
                    let mono = Monodromy::from_row_major(
                        d,
                        state.monodromy.expect("stability integration").to_vec(),
                    );
                    let det = prefactor_determinant(&mono, &gamma);
                    phase = match unwrap_phase(det.arg(), phase) {
                        Ok(p) => p,
                        Err(_) => return ControlFlow::Break(Dropped::Branch),
                    };
                    let Some(k) = out else {
                        return ControlFlow::Continue(());
                    };
                    next_output = k;
                    let r_mag = det.norm().sqrt();
                    if r_mag > config.prefactor_cutoff {
                        return ControlFlow::Break(Dropped::Filtered);
                    }
                    let action = state.action.expect("stability integration");
                    let c = sample.weight
                        * Complex64::from_polar(r_mag * amp_norm * inv_samples, 0.5 * phase + action);
                    let row = &mut acc.psi[k * n_grid..(k + 1) * n_grid];
                    grid.add_coherent(
                        state.q,
                        state.p,
                        &gamma,
                        &radius,
                        c,
                        row,
                        &mut acc.scratch,
                    );
                    acc.alive[k] += 1;
                    next_output = k + 1;
                    ControlFlow::Continue(())
                },
            );
            match end {
                Ok(()) => {}
                Err(FlowEnd::Escaped { .. }) => acc.escaped_at[next_output] += 1,
                Err(FlowEnd::Stopped {
                    reason: Dropped::Filtered,
                    ..
                }) => acc.filtered_at[next_output] += 1,
                Err(FlowEnd::Stopped {
                    reason: Dropped::Branch,
                    ..
                })
                | Err(FlowEnd::Failed { .. }) => acc.failed_at[next_output] += 1,
            }
        },
        |total, part| total.merge(part),
    );

    let count = config.samples as f64;
    let cumulative = |v: &[u64]| -> Vec<f64> {
        let mut run = 0u64;
        (0..n_times)
            .map(|k| {
                run += v[k];
                run as f64 / count
            })
            .collect()
    };
    let filtered_fraction = cumulative(&acc.filtered_at);
    let escaped_fraction = cumulative(&acc.escaped_at);
    let failed: u64 = acc.failed_at.iter().sum();
    if failed > 0 {
        log::warn!("{failed} HK trajectories dropped after integrator or branch failures");
    }

    let mut amplitudes = Vec::with_capacity(n_times);
    let mut raw_norm = Vec::with_capacity(n_times);
    for (k, &t) in times.iter().enumerate() {
        let mut psi = acc.psi[k * n_grid..(k + 1) * n_grid].to_vec();
        let norm = grid.norm_sqr(&psi).sqrt();
        if !(norm >= NORM_COLLAPSE) {
            return Err(Error::NormCollapse { t, norm });
        }
        if config.renormalize {
            psi.iter_mut().for_each(|a| *a /= norm);
        }
        raw_norm.push(norm);
        amplitudes.push(psi);
    }

    let wavefunction = SemiclassicalWavefunction {
        times: times.to_vec(),
        grid: grid.clone(),
        amplitudes,
        raw_norm,
        filtered_fraction,
        escaped_fraction,
    };
    let observables = (0..d)
        .map(|c| ObservableSeries {
            mean: wavefunction.momentum_mean(c),
            stderr: None,
        })
        .collect();
    let final_escaped = wavefunction.escaped_fraction.last().copied().unwrap_or(0.0);
    let flagged = wavefunction.final_filtered_fraction() >= FILTERED_FRACTION_LIMIT;
    if flagged {
        log::warn!(
            "HK filtered fraction {:.3} reached the reliability limit",
            wavefunction.final_filtered_fraction()
        );
    }
    let ensemble = EnsembleResult {
        times: times.to_vec(),
        observables,
        alive_count: acc.alive.iter().map(|&a| a as usize).collect(),
        sample_count: config.samples,
        escaped_fraction: final_escaped,
        rng_seed: config.seed,
    };
    Ok(HkRun {
        wavefunction,
        ensemble,
        flagged,
        failed: failed as usize,
    })
}
