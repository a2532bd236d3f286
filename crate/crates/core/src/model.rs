//! Bose-Hubbard chains with two or three sites at fixed particle number.
//!
//! The Hamiltonian is
//!
//! ```text
//! H = -T Σ_<i,i+1> (a_i† a_{i+1} + h.c.) + U Σ_i n_i (n_i - 1) + δ (n_1 - n_2)
//! ```
//!
//! with nearest-neighbour hopping only (no 1-3 bond for the triple well).

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Above this Fock-space dimension dense storage gets expensive; we warn.
pub const DENSE_DIMENSION_WARNING: usize = 5000;

/// Physical parameters of a Bose-Hubbard chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Number of wells, 2 or 3.
    pub modes: usize,
    /// Total particle number N.
    pub n_total: usize,
    /// Tunnelling amplitude T.
    pub tunneling: f64,
    /// On-site interaction U.
    pub interaction: f64,
    /// Tilt δ, applied as δ (n_1 - n_2).
    #[serde(default)]
    pub tilt: f64,
}

impl ModelParams {
    pub fn new(
        modes: usize,
        n_total: usize,
        tunneling: f64,
        interaction: f64,
        tilt: f64,
    ) -> Result<Self> {
        let params = Self {
            modes,
            n_total,
            tunneling,
            interaction,
            tilt,
        };
        params.validate()?;
        Ok(params)
    }

    /// Builds parameters from the dimensionless interaction Λ = U N / T.
    pub fn from_lambda(modes: usize, n_total: usize, tunneling: f64, lambda: f64) -> Result<Self> {
        if n_total == 0 {
            return Err(Error::ParameterDomain("n_total must be at least 1".into()));
        }
        Self::new(
            modes,
            n_total,
            tunneling,
            lambda * tunneling / n_total as f64,
            0.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.modes == 2 || self.modes == 3) {
            return Err(Error::ParameterDomain(format!(
                "modes must be 2 or 3, got {}",
                self.modes
            )));
        }
        if self.n_total < 1 {
            return Err(Error::ParameterDomain("n_total must be at least 1".into()));
        }
        if !(self.tunneling > 0.0 && self.tunneling.is_finite()) {
            return Err(Error::ParameterDomain(format!(
                "tunneling must be positive, got {}",
                self.tunneling
            )));
        }
        if !(self.interaction >= 0.0 && self.interaction.is_finite()) {
            return Err(Error::ParameterDomain(format!(
                "interaction must be non-negative, got {}",
                self.interaction
            )));
        }
        if !self.tilt.is_finite() {
            return Err(Error::ParameterDomain("tilt must be finite".into()));
        }
        Ok(())
    }

    pub fn with_tilt(&self, tilt: f64) -> Self {
        Self { tilt, ..*self }
    }

    /// Λ = U N / T.
    pub fn lambda(&self) -> f64 {
        self.interaction * self.n_total as f64 / self.tunneling
    }

    pub fn regime(&self) -> Regime {
        classify_regime(self)
    }

    pub fn plasma_frequency(&self) -> f64 {
        plasma_frequency(self)
    }
}

/// Dynamical regime of the double well as a function of Λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Rabi,
    Josephson,
    Fock,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Regime::Rabi => "Rabi",
            Regime::Josephson => "Josephson",
            Regime::Fock => "Fock",
        };
        f.write_str(name)
    }
}

/// Rabi for Λ < 1, Josephson for 1 ≤ Λ < N², Fock for Λ ≥ N².
///
/// Informational only; nothing downstream branches on it.
pub fn classify_regime(params: &ModelParams) -> Regime {
    let lambda = params.lambda();
    let n = params.n_total as f64;
    if lambda < 1.0 {
        Regime::Rabi
    } else if lambda < n * n {
        Regime::Josephson
    } else {
        Regime::Fock
    }
}

/// Small-amplitude oscillation frequency ω_p = 2 T √(1 + Λ).
pub fn plasma_frequency(params: &ModelParams) -> f64 {
    2.0 * params.tunneling * (1.0 + params.lambda()).sqrt()
}

/// Occupation-number basis of the fixed-N sector.
///
/// States are ordered descending-lexicographically, so the first state puts
/// every particle in well 1 and the last one every particle in the last well.
#[derive(Debug, Clone)]
pub struct FockBasis {
    modes: usize,
    n_total: usize,
    states: Vec<Vec<usize>>,
    index: HashMap<Vec<usize>, usize>,
}

pub fn build_fock_basis(modes: usize, n_total: usize) -> Result<FockBasis> {
    if !(modes == 2 || modes == 3) {
        return Err(Error::ParameterDomain(format!(
            "modes must be 2 or 3, got {modes}"
        )));
    }
    if n_total < 1 {
        return Err(Error::ParameterDomain("n_total must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(fock_dimension(modes, n_total));
    let mut current = vec![0; modes];
    fill_states(&mut states, &mut current, 0, n_total);
    let index = states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    if states.len() > DENSE_DIMENSION_WARNING {
        log::warn!(
            "Fock space dimension {} exceeds the dense-storage comfort zone ({})",
            states.len(),
            DENSE_DIMENSION_WARNING
        );
    }
    Ok(FockBasis {
        modes,
        n_total,
        states,
        index,
    })
}

fn fill_states(out: &mut Vec<Vec<usize>>, current: &mut [usize], mode: usize, remaining: usize) {
    if mode + 1 == current.len() {
        current[mode] = remaining;
        out.push(current.to_vec());
        return;
    }
    for n in (0..=remaining).rev() {
        current[mode] = n;
        fill_states(out, current, mode + 1, remaining - n);
    }
}

/// binomial(N + M - 1, M - 1)
pub fn fock_dimension(modes: usize, n_total: usize) -> usize {
    let mut dim = 1usize;
    for k in 1..modes {
        dim = dim * (n_total + k) / k;
    }
    dim
}

impl FockBasis {
    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn dimension(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[Vec<usize>] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[usize] {
        &self.states[i]
    }

    pub fn index_of(&self, occupation: &[usize]) -> Option<usize> {
        self.index.get(occupation).copied()
    }

    /// Canonical momenta of basis state `i`: j = (n₁ - n₂)/2 for two wells,
    /// (n₁, n₂) for three.
    pub fn momenta(&self, i: usize) -> Vec<f64> {
        let s = &self.states[i];
        match self.modes {
            2 => vec![0.5 * (s[0] as f64 - s[1] as f64)],
            _ => vec![s[0] as f64, s[1] as f64],
        }
    }

    pub fn matches(&self, params: &ModelParams) -> bool {
        self.modes == params.modes && self.n_total == params.n_total
    }
}

/// Dense real-symmetric Hamiltonian matrix. All Bose-Hubbard matrix elements
/// are real in the Fock basis, so Hermitian means symmetric here.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix {
    entries: DMatrix<f64>,
}

impl HermitianMatrix {
    /// Wraps a matrix after checking it is exactly symmetric.
    pub fn from_symmetric(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::DimensionMismatch {
                expected: entries.nrows(),
                found: entries.ncols(),
            });
        }
        let n = entries.nrows();
        for i in 0..n {
            for j in 0..i {
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(Error::ParameterDomain(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn dimension(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

pub fn build_hamiltonian(params: &ModelParams, basis: &FockBasis) -> Result<HermitianMatrix> {
    params.validate()?;
    if basis.modes != params.modes {
        return Err(Error::DimensionMismatch {
            expected: params.modes,
            found: basis.modes,
        });
    }
    if basis.n_total != params.n_total {
        return Err(Error::DimensionMismatch {
            expected: params.n_total,
            found: basis.n_total,
        });
    }
    let dim = basis.dimension();
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let mut target = vec![0usize; basis.modes];
    for (col, state) in basis.states.iter().enumerate() {
        let interaction: f64 = state
            .iter()
            .map(|&n| {
                let n = n as f64;
                n * (n - 1.0)
            })
            .sum();
        let tilt = state[0] as f64 - state[1] as f64;
        h[(col, col)] = params.interaction * interaction + params.tilt * tilt;

        // a_i† a_{i+1}: one particle hops from well i+1 into well i. The
        // reverse hop is filled in by symmetry.
        for i in 0..basis.modes - 1 {
            if state[i + 1] == 0 {
                continue;
            }
            target.copy_from_slice(state);
            target[i] += 1;
            target[i + 1] -= 1;
            let row = basis.index[&target];
            let element =
                -params.tunneling * ((state[i] as f64 + 1.0) * state[i + 1] as f64).sqrt();
            h[(row, col)] = element;
            h[(col, row)] = element;
        }
    }
    Ok(HermitianMatrix { entries: h })
}
