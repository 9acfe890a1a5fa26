//! Mean-field Schrödinger bridges on the real line.
//!
//! A bridge is computed by minimizing a discretized Benamou–Brenier cost over
//! marginal flows on a uniform grid. The crate also provides the McKean–Vlasov
//! flow, an interacting particle simulator with its pathwise Θ map, and a set
//! of checks that compare solved bridges against the quantitative bounds
//! (entropy, turnpike, Talagrand, HWI, conserved quantity, time reversal).

pub mod bridge;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod functionals;
pub mod grid;
pub mod potential;
pub mod verify;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
