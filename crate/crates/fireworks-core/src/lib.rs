//! Solvers and diagnostics for a linear kinetic equation describing an
//! exploding cloud of fragments: particles stream freely, explode at a
//! state-dependent rate, lose a mass fraction per explosion and redistribute
//! their velocity by a dot-product density.
//!
//! The deterministic path iterates two contraction mappings of the
//! characteristic-form integral equation to their common fixed point; a
//! weighted-particle Monte Carlo path cross-validates the observables; the
//! analysis layer verifies mass decay and convergence to free motion.

pub mod analysis;
pub mod error;
pub mod field;
pub mod grid;
pub mod kernels;
pub mod mc;
pub mod runner;
pub mod scenario;
pub mod solver;
pub mod tolerances;

pub use error::{CoreError, Result};
