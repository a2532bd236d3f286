//! Reduced classical dynamics in number-phase variables.
//!
//! Positions are phases and momenta are particle numbers:
//!
//! * double well: `q = φ = φ₁ - φ₂`, `p = j = (n₁ - n₂)/2`, with
//!   `H = 2U j² - 2T √(A² - j²) cos φ + 2δ j`, `A = N/2`;
//! * triple well: `p = (n₁, n₂)`, `q = (θ₁, θ₂) = (ϕ₁ - ϕ₃, ϕ₂ - ϕ₃)`, with
//!   `n₃ = N - n₁ - n₂` and
//!   `H = U(n₁² + n₂² + n₃²) - 2T(√(I₁I₂) cos(θ₁ - θ₂) + √(I₂I₃) cos θ₂) + δ(n₁ - n₂)`.
//!
//! The triple-well form follows from `a_i → √n_i e^{iϕ_i}` in the
//! three-site Hamiltonian; number conservation removes `(n₃, ϕ₃)`. Because
//! `Σ n_i ϕ_i = n₁(ϕ₁ - ϕ₃) + n₂(ϕ₂ - ϕ₃) + N ϕ₃`, the variables conjugate to
//! `(n₁, n₂)` are the phases relative to well 3. The nearest-neighbour phase
//! differences are `φ₁ = θ₁ - θ₂` and `φ₂ = θ₂`.
//!
//! `I_k = n_k + w` where `w` is the hopping-ordering offset
//! ([`HoppingOrdering`]). With plain ordering `w = 0`; with symmetric
//! (Weyl) ordering `w = 1/2`, which for two wells amounts to `A = (N + 1)/2`.
//! `n(n-1)` and `n²` differ by a constant at fixed N, so the interaction
//! needs no ordering correction.
//!
//! Along each trajectory the action `S = ∫ (p·q̇ - H) dt` and the monodromy
//! matrix `M = ∂z(t)/∂z(0)` (`z = (q, p)`, `dM/dt = J H'' M`) are integrated
//! in the same state vector, sharing step control.

use std::ops::ControlFlow;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::ode::{integrate, IntegratorOptions, OdeSystem, Outcome};
use crate::{Error, Result};

/// Trajectories closer than this fraction of N to the edge of the number
/// domain are treated as escaped.
pub const BOUNDARY_GUARD: f64 = 1e-6;

/// A point of the reduced phase space. Phases are kept unwrapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpacePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseSpacePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        assert_eq!(q.len(), p.len(), "q and p must have equal length");
        Self { q, p }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    /// `(q₁..q_D, p₁..p_D)`
    pub fn flat(&self) -> Vec<f64> {
        self.q.iter().chain(&self.p).copied().collect()
    }

    pub fn from_flat(z: &[f64]) -> Self {
        let d = z.len() / 2;
        Self {
            q: z[..d].to_vec(),
            p: z[d..2 * d].to_vec(),
        }
    }
}

/// A classical Hamiltonian with analytic first and second derivatives.
pub trait ClassicalHamiltonian: Send + Sync {
    fn dof(&self) -> usize;

    fn energy(&self, q: &[f64], p: &[f64]) -> Result<f64>;

    /// ∂H/∂q and ∂H/∂p.
    fn gradient(&self, q: &[f64], p: &[f64], dh_dq: &mut [f64], dh_dp: &mut [f64]) -> Result<()>;

    /// Row-major `2D × 2D` matrix of second derivatives in `(q, p)` order.
    fn hessian(&self, q: &[f64], p: &[f64], out: &mut [f64]) -> Result<()>;

    /// Distance of `p` from the edge of the number domain (∞ if unbounded).
    fn boundary_distance(&self, _p: &[f64]) -> f64 {
        f64::INFINITY
    }

    /// Minimum admissible [`boundary_distance`](Self::boundary_distance).
    fn boundary_guard(&self) -> f64 {
        0.0
    }
}

/// How the hopping term's number operators are ordered before replacing
/// them with c-numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoppingOrdering {
    /// `√(n_i n_j)`, the plain mean-field substitution.
    #[default]
    Plain,
    /// `√((n_i + ½)(n_j + ½))`, the Weyl symbol of the hopping operator.
    Symmetric,
}

impl HoppingOrdering {
    pub fn offset(self) -> f64 {
        match self {
            HoppingOrdering::Plain => 0.0,
            HoppingOrdering::Symmetric => 0.5,
        }
    }
}

/// Two-well Hamilton function in `(φ, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWell {
    pub tunneling: f64,
    pub interaction: f64,
    pub tilt: f64,
    /// `A` in `√(A² - j²)`.
    pub half_n: f64,
    guard: f64,
}

impl DoubleWell {
    pub fn new(params: &ModelParams, ordering: HoppingOrdering) -> Self {
        let n = params.n_total as f64;
        Self {
            tunneling: params.tunneling,
            interaction: params.interaction,
            tilt: params.tilt,
            half_n: 0.5 * n + ordering.offset(),
            guard: BOUNDARY_GUARD * n,
        }
    }

    fn root(&self, j: f64) -> Result<f64> {
        let r2 = self.half_n * self.half_n - j * j;
        if !(r2 > 0.0) {
            return Err(Error::PhaseSpaceDomain(format!(
                "|j| = {} reaches the edge {}",
                j.abs(),
                self.half_n
            )));
        }
        Ok(r2.sqrt())
    }

    /// Lowest classical energy, reached at `φ = 0, j = 0` for zero tilt.
    pub fn ground_energy(&self) -> f64 {
        -2.0 * self.tunneling * self.half_n
    }

    /// Energy of the hyperbolic point `(φ = π, j = 0)`. Untilted orbits above
    /// it never change the sign of `j`; it sits `2NT` above the ground
    /// energy (with `N → 2A`).
    pub fn self_trapping_threshold(&self) -> f64 {
        2.0 * self.tunneling * self.half_n
    }
}

impl ClassicalHamiltonian for DoubleWell {
    fn dof(&self) -> usize {
        1
    }

    fn energy(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        let (phi, j) = (q[0], p[0]);
        let s = self.root(j)?;
        Ok(2.0 * self.interaction * j * j - 2.0 * self.tunneling * s * phi.cos()
            + 2.0 * self.tilt * j)
    }

    fn gradient(&self, q: &[f64], p: &[f64], dh_dq: &mut [f64], dh_dp: &mut [f64]) -> Result<()> {
        let (phi, j) = (q[0], p[0]);
        let s = self.root(j)?;
        let (sin, cos) = phi.sin_cos();
        dh_dq[0] = 2.0 * self.tunneling * s * sin;
        dh_dp[0] = 4.0 * self.interaction * j + 2.0 * self.tunneling * j * cos / s + 2.0 * self.tilt;
        Ok(())
    }

    fn hessian(&self, q: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let (phi, j) = (q[0], p[0]);
        let s = self.root(j)?;
        let (sin, cos) = phi.sin_cos();
        let t2 = 2.0 * self.tunneling;
        let h_qq = t2 * s * cos;
        let h_qp = -t2 * j * sin / s;
        let h_pp = 4.0 * self.interaction + t2 * cos * self.half_n * self.half_n / (s * s * s);
        out[0] = h_qq;
        out[1] = h_qp;
        out[2] = h_qp;
        out[3] = h_pp;
        Ok(())
    }

    fn boundary_distance(&self, p: &[f64]) -> f64 {
        self.half_n - p[0].abs()
    }

    fn boundary_guard(&self) -> f64 {
        self.guard
    }
}

/// Three-well Hamilton function in `(θ₁, θ₂, n₁, n₂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripleWell {
    pub tunneling: f64,
    pub interaction: f64,
    pub tilt: f64,
    pub n_total: f64,
    pub offset: f64,
    guard: f64,
}

struct TripleTerms {
    n: [f64; 3],
    i: [f64; 3],
    a: f64,
    b: f64,
    c1: f64,
    s1: f64,
    c2: f64,
    s2: f64,
}

impl TripleWell {
    pub fn new(params: &ModelParams, ordering: HoppingOrdering) -> Self {
        let n = params.n_total as f64;
        Self {
            tunneling: params.tunneling,
            interaction: params.interaction,
            tilt: params.tilt,
            n_total: n,
            offset: ordering.offset(),
            guard: BOUNDARY_GUARD * n,
        }
    }

    fn terms(&self, q: &[f64], p: &[f64]) -> Result<TripleTerms> {
        let n = [p[0], p[1], self.n_total - p[0] - p[1]];
        let i = [n[0] + self.offset, n[1] + self.offset, n[2] + self.offset];
        if !(i[0] > 0.0 && i[1] > 0.0 && i[2] > 0.0) {
            return Err(Error::PhaseSpaceDomain(format!(
                "occupations {n:?} leave the simplex"
            )));
        }
        let (s1, c1) = (q[0] - q[1]).sin_cos();
        let (s2, c2) = q[1].sin_cos();
        Ok(TripleTerms {
            n,
            i,
            a: (i[0] * i[1]).sqrt(),
            b: (i[1] * i[2]).sqrt(),
            c1,
            s1,
            c2,
            s2,
        })
    }

    /// Nearest-neighbour phase differences `(ϕ₁ - ϕ₂, ϕ₂ - ϕ₃)`.
    pub fn phase_differences(q: &[f64]) -> [f64; 2] {
        [q[0] - q[1], q[1]]
    }
}

impl ClassicalHamiltonian for TripleWell {
    fn dof(&self) -> usize {
        2
    }

    fn energy(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        let w = self.terms(q, p)?;
        let inter = w.n.iter().map(|x| x * x).sum::<f64>();
        Ok(self.interaction * inter
            - 2.0 * self.tunneling * (w.a * w.c1 + w.b * w.c2)
            + self.tilt * (w.n[0] - w.n[1]))
    }

    fn gradient(&self, q: &[f64], p: &[f64], dh_dq: &mut [f64], dh_dp: &mut [f64]) -> Result<()> {
        let w = self.terms(q, p)?;
        let t2 = 2.0 * self.tunneling;
        let u2 = 2.0 * self.interaction;
        dh_dq[0] = t2 * w.a * w.s1;
        dh_dq[1] = -t2 * w.a * w.s1 + t2 * w.b * w.s2;
        // first derivatives of a = √(I₁I₂), b = √(I₂I₃) with dI₃/dn_k = -1
        let da = [w.i[1] / (2.0 * w.a), w.i[0] / (2.0 * w.a)];
        let db = [-w.i[1] / (2.0 * w.b), (w.i[2] - w.i[1]) / (2.0 * w.b)];
        dh_dp[0] = u2 * (w.n[0] - w.n[2]) - t2 * (w.c1 * da[0] + w.c2 * db[0]) + self.tilt;
        dh_dp[1] = u2 * (w.n[1] - w.n[2]) - t2 * (w.c1 * da[1] + w.c2 * db[1]) - self.tilt;
        Ok(())
    }

    fn hessian(&self, q: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let w = self.terms(q, p)?;
        let t2 = 2.0 * self.tunneling;
        let u = self.interaction;
        let (a, b) = (w.a, w.b);
        let [i1, i2, i3] = w.i;
        let da = [i2 / (2.0 * a), i1 / (2.0 * a)];
        let db = [-i2 / (2.0 * b), (i3 - i2) / (2.0 * b)];
        let a3 = a * a * a;
        let b3 = b * b * b;
        let daa = [
            [-i2 * i2 / (4.0 * a3), 1.0 / (4.0 * a)],
            [1.0 / (4.0 * a), -i1 * i1 / (4.0 * a3)],
        ];
        let b12 = -1.0 / (2.0 * b) + i2 * (i3 - i2) / (4.0 * b3);
        let dbb = [
            [-i2 * i2 / (4.0 * b3), b12],
            [b12, -1.0 / b - (i3 - i2) * (i3 - i2) / (4.0 * b3)],
        ];

        let mut h = [[0.0f64; 4]; 4];
        // phase block
        h[0][0] = t2 * a * w.c1;
        h[0][1] = -t2 * a * w.c1;
        h[1][1] = t2 * a * w.c1 + t2 * b * w.c2;
        // mixed block
        for k in 0..2 {
            h[0][2 + k] = t2 * w.s1 * da[k];
            h[1][2 + k] = -t2 * w.s1 * da[k] + t2 * w.s2 * db[k];
        }
        // number block
        for k in 0..2 {
            for l in 0..2 {
                let kron = if k == l { 1.0 } else { 0.0 };
                h[2 + k][2 + l] =
                    2.0 * u * (kron + 1.0) - t2 * (w.c1 * daa[k][l] + w.c2 * dbb[k][l]);
            }
        }
        for r in 0..4 {
            for c in 0..r {
                h[r][c] = h[c][r];
            }
        }
        for r in 0..4 {
            out[4 * r..4 * r + 4].copy_from_slice(&h[r]);
        }
        Ok(())
    }

    fn boundary_distance(&self, p: &[f64]) -> f64 {
        let n3 = self.n_total - p[0] - p[1];
        (p[0].min(p[1]).min(n3)) + self.offset
    }

    fn boundary_guard(&self) -> f64 {
        self.guard
    }
}

/// `H = (p² + ω² q²)/2`, summed over degrees of freedom. Used to check the
/// semiclassical machinery where it must be exact.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicOscillator {
    pub omega: Vec<f64>,
}

impl HarmonicOscillator {
    pub fn new(omega: Vec<f64>) -> Self {
        Self { omega }
    }
}

impl ClassicalHamiltonian for HarmonicOscillator {
    fn dof(&self) -> usize {
        self.omega.len()
    }

    fn energy(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        Ok(self
            .omega
            .iter()
            .zip(q.iter().zip(p))
            .map(|(w, (q, p))| 0.5 * (p * p + w * w * q * q))
            .sum())
    }

    fn gradient(&self, q: &[f64], p: &[f64], dh_dq: &mut [f64], dh_dp: &mut [f64]) -> Result<()> {
        for (k, w) in self.omega.iter().enumerate() {
            dh_dq[k] = w * w * q[k];
            dh_dp[k] = p[k];
        }
        Ok(())
    }

    fn hessian(&self, _q: &[f64], _p: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.omega.len();
        out.iter_mut().for_each(|x| *x = 0.0);
        for (k, w) in self.omega.iter().enumerate() {
            out[k * 2 * d + k] = w * w;
            out[(d + k) * 2 * d + d + k] = 1.0;
        }
        Ok(())
    }
}

/// The Bose-Hubbard Hamilton function for either well count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoseHubbardClassical {
    Double(DoubleWell),
    Triple(TripleWell),
}

impl BoseHubbardClassical {
    pub fn new(params: &ModelParams, ordering: HoppingOrdering) -> Result<Self> {
        params.validate()?;
        Ok(match params.modes {
            2 => BoseHubbardClassical::Double(DoubleWell::new(params, ordering)),
            _ => BoseHubbardClassical::Triple(TripleWell::new(params, ordering)),
        })
    }

    fn inner(&self) -> &dyn ClassicalHamiltonian {
        match self {
            BoseHubbardClassical::Double(h) => h,
            BoseHubbardClassical::Triple(h) => h,
        }
    }
}

impl ClassicalHamiltonian for BoseHubbardClassical {
    fn dof(&self) -> usize {
        self.inner().dof()
    }
    fn energy(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        self.inner().energy(q, p)
    }
    fn gradient(&self, q: &[f64], p: &[f64], dh_dq: &mut [f64], dh_dp: &mut [f64]) -> Result<()> {
        self.inner().gradient(q, p, dh_dq, dh_dp)
    }
    fn hessian(&self, q: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner().hessian(q, p, out)
    }
    fn boundary_distance(&self, p: &[f64]) -> f64 {
        self.inner().boundary_distance(p)
    }
    fn boundary_guard(&self) -> f64 {
        self.inner().boundary_guard()
    }
}

fn check_point<H: ClassicalHamiltonian + ?Sized>(h: &H, z: &PhaseSpacePoint) -> Result<()> {
    if z.q.len() != h.dof() || z.p.len() != h.dof() {
        return Err(Error::DimensionMismatch {
            expected: h.dof(),
            found: z.q.len(),
        });
    }
    Ok(())
}

/// Hamilton function of the model at `z` (plain ordering, constant dropped).
pub fn hamiltonian_value(params: &ModelParams, z: &PhaseSpacePoint) -> Result<f64> {
    let h = BoseHubbardClassical::new(params, HoppingOrdering::Plain)?;
    check_point(&h, z)?;
    h.energy(&z.q, &z.p)
}

/// Phase-space velocity `(dq/dt, dp/dt) = (∂H/∂p, -∂H/∂q)`.
pub fn eom_rhs(params: &ModelParams, z: &PhaseSpacePoint) -> Result<PhaseSpacePoint> {
    let h = BoseHubbardClassical::new(params, HoppingOrdering::Plain)?;
    check_point(&h, z)?;
    velocity(&h, z)
}

pub fn velocity(h: &dyn ClassicalHamiltonian, z: &PhaseSpacePoint) -> Result<PhaseSpacePoint> {
    if h.boundary_distance(&z.p) < h.boundary_guard() {
        return Err(Error::PhaseSpaceDomain(format!(
            "{:?} within the boundary guard",
            z.p
        )));
    }
    let d = h.dof();
    let mut dq = vec![0.0; d];
    let mut dp = vec![0.0; d];
    h.gradient(&z.q, &z.p, &mut dq, &mut dp)?;
    Ok(PhaseSpacePoint {
        q: dp,
        p: dq.into_iter().map(|x| -x).collect(),
    })
}

/// Symmetric `2D × 2D` Hessian of the model's Hamilton function.
pub fn hessian(params: &ModelParams, z: &PhaseSpacePoint) -> Result<DMatrix<f64>> {
    let h = BoseHubbardClassical::new(params, HoppingOrdering::Plain)?;
    check_point(&h, z)?;
    hessian_matrix(&h, z)
}

pub fn hessian_matrix(h: &dyn ClassicalHamiltonian, z: &PhaseSpacePoint) -> Result<DMatrix<f64>> {
    let n = 2 * h.dof();
    let mut out = vec![0.0; n * n];
    h.hessian(&z.q, &z.p, &mut out)?;
    Ok(DMatrix::from_row_slice(n, n, &out))
}

/// Jacobian `∂z(t)/∂z(0)` of the flow, `z = (q, p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monodromy {
    dof: usize,
    /// Row-major `2D × 2D`.
    entries: Vec<f64>,
}

impl Monodromy {
    pub fn identity(dof: usize) -> Self {
        let n = 2 * dof;
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { dof, entries }
    }

    pub fn from_row_major(dof: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), 4 * dof * dof);
        Self { dof, entries }
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.entries[r * 2 * self.dof + c]
    }

    /// ∂q_i(t)/∂q_k
    pub fn dq_dq(&self, i: usize, k: usize) -> f64 {
        self.at(i, k)
    }
    /// ∂q_i(t)/∂p_k
    pub fn dq_dp(&self, i: usize, k: usize) -> f64 {
        self.at(i, self.dof + k)
    }
    /// ∂p_i(t)/∂q_k
    pub fn dp_dq(&self, i: usize, k: usize) -> f64 {
        self.at(self.dof + i, k)
    }
    /// ∂p_i(t)/∂p_k
    pub fn dp_dp(&self, i: usize, k: usize) -> f64 {
        self.at(self.dof + i, self.dof + k)
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        let n = 2 * self.dof;
        DMatrix::from_row_slice(n, n, &self.entries)
    }

    pub fn determinant(&self) -> f64 {
        match self.dof {
            1 => self.entries[0] * self.entries[3] - self.entries[1] * self.entries[2],
            _ => self.as_matrix().determinant(),
        }
    }
}

/// Life cycle of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Alive,
    /// Came within the boundary guard of the number domain.
    Escaped,
    /// Dropped by the semiclassical prefactor filter.
    Filtered,
    /// Integrator failure (step underflow or step budget).
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub z: PhaseSpacePoint,
    pub action: f64,
    pub monodromy: Monodromy,
    /// Unwrapped argument of the prefactor determinant (0 when no width was
    /// given).
    pub prefactor_phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub initial: PhaseSpacePoint,
    pub samples: Vec<TrajectorySample>,
    pub status: TrajectoryStatus,
    /// Time of the last valid state.
    pub end_time: f64,
}

/// What to integrate besides `z(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryOptions {
    pub integrator: IntegratorOptions,
    /// Integrate the action and the monodromy matrix.
    pub stability: bool,
    /// Coherent-state widths for prefactor branch tracking; requires
    /// `stability`.
    pub prefactor_width: Option<Vec<f64>>,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            integrator: IntegratorOptions::default(),
            stability: true,
            prefactor_width: None,
        }
    }
}

/// Flattened ODE: `[q, p]` or `[q, p, S, M]`.
pub(crate) struct FlowSystem<'a, H: ?Sized> {
    pub h: &'a H,
    pub dof: usize,
    pub stability: bool,
}

impl<'a, H: ClassicalHamiltonian + ?Sized> FlowSystem<'a, H> {
    pub fn new(h: &'a H, stability: bool) -> Self {
        Self {
            h,
            dof: h.dof(),
            stability,
        }
    }

    pub fn initial_state(&self, z0: &PhaseSpacePoint) -> Vec<f64> {
        let mut y = z0.flat();
        if self.stability {
            y.push(0.0);
            y.extend_from_slice(Monodromy::identity(self.dof).entries());
        }
        y
    }
}

impl<'a, H: ClassicalHamiltonian + ?Sized> OdeSystem for FlowSystem<'a, H> {
    type Refusal = Error;

    fn dim(&self) -> usize {
        let n = 2 * self.dof;
        if self.stability {
            n + 1 + n * n
        } else {
            n
        }
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let d = self.dof;
        let n = 2 * d;
        let (q, p) = (&y[..d], &y[d..n]);
        let mut grad = [0.0f64; 4];
        {
            let (gq, gp) = grad[..n].split_at_mut(d);
            self.h.gradient(q, p, gq, gp)?;
        }
        for k in 0..d {
            dy[k] = grad[d + k];
            dy[d + k] = -grad[k];
        }
        if !self.stability {
            return Ok(());
        }
        let energy = self.h.energy(q, p)?;
        let p_qdot: f64 = (0..d).map(|k| p[k] * grad[d + k]).sum();
        dy[n] = p_qdot - energy;

        let mut hess = [0.0f64; 16];
        self.h.hessian(q, p, &mut hess[..n * n])?;
        // dM/dt = J H'' M with J = [[0, 1], [-1, 0]] in (q, p) blocks
        let m = &y[n + 1..];
        let dm = &mut dy[n + 1..];
        for r in 0..n {
            let (src, sign) = if r < d { (r + d, 1.0) } else { (r - d, -1.0) };
            let hrow = &hess[src * n..src * n + n];
            for c in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += hrow[k] * m[k * n + c];
                }
                dm[r * n + c] = sign * acc;
            }
        }
        Ok(())
    }
}

/// One state along a trajectory as seen by streaming consumers.
pub struct FlowState<'s> {
    pub t: f64,
    pub q: &'s [f64],
    pub p: &'s [f64],
    /// Present when stability integration is on.
    pub action: Option<f64>,
    pub monodromy: Option<&'s [f64]>,
}

/// Why a streamed trajectory ended early.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowEnd<B> {
    Escaped { t: f64 },
    Failed { t: f64, reason: String },
    Stopped { t: f64, reason: B },
}

/// Integrates `z0` through `times`, handing every accepted step to
/// `visit(state, output_index)`.
///
/// Returns `Ok(())` when all times were reached.
pub fn stream_trajectory<H, B>(
    h: &H,
    z0: &PhaseSpacePoint,
    times: &[f64],
    integrator: &IntegratorOptions,
    stability: bool,
    mut visit: impl FnMut(&FlowState<'_>, Option<usize>) -> ControlFlow<B>,
) -> std::result::Result<(), FlowEnd<B>>
where
    H: ClassicalHamiltonian + ?Sized,
{
    let system = FlowSystem::new(h, stability);
    let d = system.dof;
    let n = 2 * d;
    let guard = h.boundary_guard();
    let t0 = times.first().copied().unwrap_or(0.0).min(0.0);
    let y0 = system.initial_state(z0);
    if h.boundary_distance(&z0.p) < guard || h.energy(&z0.q, &z0.p).is_err() {
        // the starting state itself is still reported at outputs at t0
        let state = FlowState {
            t: t0,
            q: &y0[..d],
            p: &y0[d..n],
            action: stability.then(|| y0[n]),
            monodromy: stability.then(|| &y0[n + 1..]),
        };
        for (k, _) in times.iter().enumerate().take_while(|(_, &t)| t <= t0) {
            if let ControlFlow::Break(reason) = visit(&state, Some(k)) {
                return Err(FlowEnd::Stopped { t: t0, reason });
            }
        }
        return Err(FlowEnd::Escaped { t: t0 });
    }
    enum Stop<B> {
        Escape,
        Visitor(B),
    }
    let outcome = integrate(&system, t0, &y0, times, integrator, |t, y, out| {
        if h.boundary_distance(&y[d..n]) < guard {
            return ControlFlow::Break(Stop::Escape);
        }
        let state = FlowState {
            t,
            q: &y[..d],
            p: &y[d..n],
            action: stability.then(|| y[n]),
            monodromy: stability.then(|| &y[n + 1..]),
        };
        match visit(&state, out) {
            ControlFlow::Continue(()) => ControlFlow::Continue(()),
            ControlFlow::Break(b) => ControlFlow::Break(Stop::Visitor(b)),
        }
    });
    match outcome {
        Outcome::Completed { .. } => Ok(()),
        Outcome::Stopped {
            t,
            reason: Stop::Escape,
        } => Err(FlowEnd::Escaped { t }),
        Outcome::Stopped {
            t,
            reason: Stop::Visitor(reason),
        } => Err(FlowEnd::Stopped { t, reason }),
        Outcome::Refused {
            t,
            refusal: Error::PhaseSpaceDomain(_),
        } => Err(FlowEnd::Escaped { t }),
        Outcome::Refused { t, refusal } => Err(FlowEnd::Failed {
            t,
            reason: refusal.to_string(),
        }),
        Outcome::Failed { t, reason } => Err(FlowEnd::Failed { t, reason }),
    }
}

/// Integrates a trajectory with action, monodromy and (optionally) the
/// prefactor branch, recording a sample at every grid time.
pub fn integrate_trajectory<H>(
    h: &H,
    z0: &PhaseSpacePoint,
    times: &[f64],
    opts: &TrajectoryOptions,
) -> Result<TrajectoryRecord>
where
    H: ClassicalHamiltonian + ?Sized,
{
    check_point(h, z0)?;
    crate::exact::check_ascending(times)?;
    let d = h.dof();
    let mut samples = Vec::with_capacity(times.len());
    let mut phase = 0.0;
    let mut end_time = times.first().copied().unwrap_or(0.0);
    let result = stream_trajectory(h, z0, times, &opts.integrator, opts.stability, |s, out| {
        if let (Some(width), Some(m)) = (&opts.prefactor_width, s.monodromy) {
            let mono = Monodromy::from_row_major(d, m.to_vec());
            match crate::hk::hk_prefactor(&mono, width, phase) {
                Ok((_, next)) => phase = next,
                Err(e) => return ControlFlow::Break(e.to_string()),
            }
        }
        end_time = s.t;
        if out.is_some() {
            samples.push(TrajectorySample {
                t: s.t,
                z: PhaseSpacePoint::new(s.q.to_vec(), s.p.to_vec()),
                action: s.action.unwrap_or(0.0),
                monodromy: s
                    .monodromy
                    .map(|m| Monodromy::from_row_major(d, m.to_vec()))
                    .unwrap_or_else(|| Monodromy::identity(d)),
                prefactor_phase: phase,
            });
        }
        ControlFlow::Continue(())
    });
    let status = match result {
        Ok(()) => TrajectoryStatus::Alive,
        Err(FlowEnd::Escaped { .. }) => TrajectoryStatus::Escaped,
        Err(FlowEnd::Failed { t, reason }) => {
            log::debug!("trajectory from {z0:?} failed at t = {t}: {reason}");
            TrajectoryStatus::Failed
        }
        Err(FlowEnd::Stopped { t, reason }) => {
            log::debug!("trajectory from {z0:?} stopped at t = {t}: {reason}");
            TrajectoryStatus::Filtered
        }
    };
    Ok(TrajectoryRecord {
        initial: z0.clone(),
        samples,
        status,
        end_time,
    })
}
