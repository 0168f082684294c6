//! cohwork: simulation and analysis of repeatable work extraction from the
//! coherence of individually processed qubits, assisted by a ladder-shaped
//! coherence reservoir under strict energy conservation.
//!
//! The crate is organized in layers:
//!
//! - [`qcore`] — dense density-operator toolkit (the oracle layer),
//! - [`thermo`] — thermal states, free energies and incoherent work formulas,
//! - [`ladder`] — the reservoir: windowed ladder states, the joint
//!   preprocessing unitary, its Kraus back-reaction, repumping and the
//!   restoration measurement,
//! - [`protocol`] — end-to-end protocol runners with full work ledgers,
//! - [`checks`] — executable entropy-fluctuation and covariance checks,
//! - [`cli`] — batch experiment driver (sweeps, scaling studies, validation),
//! - [`validate`] — the runtime invariant suite behind `cohwork validate`.

pub mod checks;
// pub mod cli;
pub mod error;
pub mod ladder;
pub mod protocol;
pub mod qcore;
pub mod thermo;
// pub mod validate;

pub use error::{CohworkError, Result};
