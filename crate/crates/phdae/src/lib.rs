//! Learn and simulate constrained electrical-network dynamics as
//! port-Hamiltonian differential algebraic equations: assemble the system
//! matrices from a circuit graph, reduce the DAE to an equivalent ODE,
//! train neural component relations, and compose trained subsystems into
//! larger networks without retraining.

pub mod assembly;
pub mod autodiff;
pub mod error;
pub mod neural;
pub mod numerics;
pub mod reduction;
pub mod simulate;
pub mod train;
pub mod systems;
pub mod topology;

pub use error::{Error, Result};
