//! Out-of-equilibrium dynamics of bosons in two- and three-well Bose-Hubbard
//! models.
//!
//! Four propagation back-ends share one model definition:
//!
//! * [`exact`]: full diagonalization in the fixed-N Fock space,
//! * [`classical`]: reduced mean-field dynamics in number-phase variables,
//!   integrated together with the action and the monodromy matrix,
//! * [`twa`]: the truncated Wigner approximation,
//! * [`hk`]: the Herman-Kluk frozen-Gaussian propagator evaluated by
//!   importance-sampled Monte Carlo.
//!
//! [`experiment`] wires the back-ends together, compares them and writes the
//! CSV artifacts consumed by plotting tools.

pub mod classical;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod hk;
pub mod model;
pub mod ode;
pub mod rng;
pub mod twa;

pub use error::{Error, Result};
