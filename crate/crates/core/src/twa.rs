//! Truncated Wigner approximation.
//!
//! The Wigner function of the initial state is approximated by a Gaussian in
//! the canonical pair (phase, number), sampled, and each sample is carried
//! along the classical flow. Observables are ensemble averages of the
//! momentum coordinates: `j` for two wells, `(n₁, n₂)` for three.

use std::f64::consts::PI;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::classical::{stream_trajectory, ClassicalHamiltonian, FlowEnd, PhaseSpacePoint};
use crate::exact::{hopping_expectation, QuantumState};
use crate::hk::{fidelity, MomentumGrid};
use crate::ode::IntegratorOptions;
use crate::rng::{ordered_chunk_reduce, sample_stream, standard_normal};
use crate::{Error, Result};

/// Escaped fractions above this mark a run unreliable.
pub const ESCAPED_FRACTION_LIMIT: f64 = 0.05;

/// Fit residuals above this mean the state is far from Gaussian.
pub const FIT_RESIDUAL_LIMIT: f64 = 0.1;

const CHUNK: usize = 256;

/// Minimum-uncertainty Gaussian in `(q, p)` with `ħ = 1`: position variance
/// `1/(2γ)`, momentum variance `γ/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianInitialState {
    pub center: PhaseSpacePoint,
    pub gamma: Vec<f64>,
}

impl GaussianInitialState {
    pub fn new(center: PhaseSpacePoint, gamma: Vec<f64>) -> Result<Self> {
        if center.q.len() != gamma.len() || center.p.len() != gamma.len() {
            return Err(Error::DimensionMismatch {
                expected: gamma.len(),
                found: center.q.len(),
            });
        }
        if gamma.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::ParameterDomain(format!(
                "Gaussian widths must be positive, got {gamma:?}"
            )));
        }
        Ok(Self { center, gamma })
    }

    pub fn dof(&self) -> usize {
        self.gamma.len()
    }

    pub fn position_variance(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| 0.5 / g).collect()
    }

    pub fn momentum_variance(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| 0.5 * g).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub state: GaussianInitialState,
    /// `1 - |⟨gaussian|ψ₀⟩|²` on the number grid.
    pub residual: f64,
}

impl GaussianFit {
    pub fn is_gaussian(&self) -> bool {
        self.residual <= FIT_RESIDUAL_LIMIT
    }
}

/// Gaussian matching the number mean and variance and the condensate phase
/// of `psi`.
///
/// The width is `γ = 2 Var(p)` so the momentum variance `γ/2` equals the
/// exact number variance. Phases come from `⟨a_k† a_{k+1}⟩`; for three wells
/// the angles are measured against the third well.
pub fn fit_gaussian_to_ground_state(psi: &QuantumState) -> Result<GaussianFit> {
    let basis = psi.basis();
    let (mean, var) = psi.momentum_moments();
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::ParameterDomain(
            "state has a sharp number distribution; no Gaussian width".into(),
        ));
    }
    let q = match basis.modes() {
        2 => vec![hopping_expectation(psi, 0)?.arg()],
        _ => {
            let phi1 = hopping_expectation(psi, 0)?.arg();
            let phi2 = hopping_expectation(psi, 1)?.arg();
            vec![wrap(phi1 + phi2), phi2]
        }
    };
    let gamma: Vec<f64> = var.iter().map(|v| 2.0 * v).collect();
    let state = GaussianInitialState::new(PhaseSpacePoint::new(q, mean), gamma)?;
    let grid = MomentumGrid::from_basis(basis);
    let gaussian = grid.project_gaussian(&state);
    let residual = 1.0 - fidelity(&gaussian, psi.amplitudes());
    if residual > FIT_RESIDUAL_LIMIT {
        log::warn!("initial state is not Gaussian: fit residual {residual:.3}");
    }
    Ok(GaussianFit { state, residual })
}

fn wrap(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Draws `count` points from the Wigner density of `init`; sample `i` uses
/// the random stream `(seed, i)`.
pub fn sample_wigner(init: &GaussianInitialState, count: usize, seed: u64) -> Vec<PhaseSpacePoint> {
    (0..count as u64)
        .map(|i| wigner_point(init, seed, i))
        .collect()
}

fn wigner_point(init: &GaussianInitialState, seed: u64, index: u64) -> PhaseSpacePoint {
    let mut rng = sample_stream(seed, index);
    let d = init.dof();
    let mut q = Vec::with_capacity(d);
    let mut p = Vec::with_capacity(d);
    for k in 0..d {
        let g = init.gamma[k];
        q.push(init.center.q[k] + (0.5 / g).sqrt() * standard_normal(&mut rng));
        p.push(init.center.p[k] + (0.5 * g).sqrt() * standard_normal(&mut rng));
    }
    PhaseSpacePoint { q, p }
}

/// Sample count and seed are required when read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwaConfig {
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub integrator: IntegratorOptions,
}

impl Default for TwaConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 1,
            integrator: IntegratorOptions::default(),
        }
    }
}

/// Time series of one observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub mean: Vec<f64>,
    /// Monte Carlo standard error, when the estimator provides one.
    pub stderr: Option<Vec<f64>>,
}

/// Ensemble averages of the momentum coordinates over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    /// One series per momentum component.
    pub observables: Vec<ObservableSeries>,
    /// Samples still integrating at each time.
    pub alive_count: Vec<usize>,
    pub sample_count: usize,
    /// Fraction of samples that left the number domain by the final time.
    pub escaped_fraction: f64,
    pub rng_seed: u64,
}

impl EnsembleResult {
    pub fn mean(&self, component: usize) -> &[f64] {
        &self.observables[component].mean
    }

    pub fn stderr(&self, component: usize) -> Option<&[f64]> {
        self.observables[component].stderr.as_deref()
    }

    pub fn flagged(&self) -> bool {
        self.escaped_fraction > ESCAPED_FRACTION_LIMIT
    }
}

struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    alive: Vec<u64>,
    escaped: u64,
    failed: u64,
}

impl Moments {
    fn new(len: usize, times: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
            alive: vec![0; times],
            escaped: 0,
            failed: 0,
        }
    }

    fn merge(&mut self, other: Self) {
        for (a, b) in self.sum.iter_mut().zip(other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(other.sum_sq) {
            *a += b;
        }
        for (a, b) in self.alive.iter_mut().zip(other.alive) {
            *a += b;
        }
        self.escaped += other.escaped;
        self.failed += other.failed;
    }
}

/// Samples the Wigner density of `init` and averages the momenta along the
/// classical flow of `h`.
pub fn run_twa<H>(
    h: &H,
    init: &GaussianInitialState,
    times: &[f64],
    config: &TwaConfig,
) -> Result<EnsembleResult>
where
    H: ClassicalHamiltonian + ?Sized,
{
    if config.samples < 1 {
        return Err(Error::Config("twa.samples must be at least 1".into()));
    }
    if init.dof() != h.dof() {
        return Err(Error::DimensionMismatch {
            expected: h.dof(),
            found: init.dof(),
        });
    }
    propagate_ensemble(
        h,
        config.samples,
        |i| wigner_point(init, config.seed, i as u64),
        times,
        &config.integrator,
        config.seed,
    )
}

/// Propagates `count` points produced by `point(i)` and averages their
/// momenta. Trajectories that leave the number domain are frozen at their
/// last state and counted; the same applies to integrator failures.
pub fn propagate_ensemble<H, P>(
    h: &H,
    count: usize,
    point: P,
    times: &[f64],
    integrator: &IntegratorOptions,
    seed: u64,
) -> Result<EnsembleResult>
where
    H: ClassicalHamiltonian + ?Sized,
    P: Fn(usize) -> PhaseSpacePoint + Sync,
{
    crate::exact::check_ascending(times)?;
    let d = h.dof();
    let n_times = times.len();
    let len = n_times * d;
    let acc = ordered_chunk_reduce(
        count,
        CHUNK,
        || Moments::new(len, n_times),
        |acc, index| {
            let z0 = point(index);
            let mut last = z0.p.clone();
            let mut next_output = 0usize;
            let end = stream_trajectory::<H, ()>(h, &z0, times, integrator, false, |s, out| {
                last.copy_from_slice(s.p);
                if let Some(k) = out {
                    for c in 0..d {
                        acc.sum[k * d + c] += s.p[c];
                        acc.sum_sq[k * d + c] += s.p[c] * s.p[c];
                    }
                    acc.alive[k] += 1;
                    next_output = k + 1;
                }
                ControlFlow::Continue(())
            });
            match end {
                Ok(()) => return,
                Err(FlowEnd::Escaped { .. }) => acc.escaped += 1,
                Err(FlowEnd::Failed { t, reason }) => {
                    log::debug!("TWA trajectory {index} failed at t = {t}: {reason}");
                    acc.failed += 1;
                }
                Err(FlowEnd::Stopped { .. }) => unreachable!("visitor never stops"),
            }
            for k in next_output..n_times {
                for c in 0..d {
                    acc.sum[k * d + c] += last[c];
                    acc.sum_sq[k * d + c] += last[c] * last[c];
                }
            }
        },
        |total, part| total.merge(part),
    );
    if acc.failed > 0 {
        log::warn!("{} TWA trajectories failed to integrate", acc.failed);
    }
    let n = count as f64;
    let observables = (0..d)
        .map(|c| {
            let mut mean = Vec::with_capacity(n_times);
            let mut stderr = Vec::with_capacity(n_times);
            for k in 0..n_times {
                let m = acc.sum[k * d + c] / n;
                let var = if count > 1 {
                    ((acc.sum_sq[k * d + c] - n * m * m) / (n - 1.0)).max(0.0)
                } else {
                    0.0
                };
                mean.push(m);
                stderr.push((var / n).sqrt());
            }
            ObservableSeries {
                mean,
                stderr: Some(stderr),
            }
        })
        .collect();
    let result = EnsembleResult {
        times: times.to_vec(),
        observables,
        alive_count: acc.alive.iter().map(|&a| a as usize).collect(),
        sample_count: count,
        escaped_fraction: (acc.escaped + acc.failed) as f64 / n,
        rng_seed: seed,
    };
    if result.flagged() {
        log::warn!(
            "TWA escaped fraction {:.3} exceeds {ESCAPED_FRACTION_LIMIT}",
            result.escaped_fraction
        );
    }
    Ok(result)
}
