//! Physics-informed neural-network surrogates for steady 2-D lid-driven
//! cavity flow.
//!
//! The crate couples a finite-difference reference solver with a tape-based
//! automatic-differentiation engine so that small dense networks can be
//! trained against any mix of simulation data and Navier-Stokes residuals.
//! On top of that it ships a reproducible experiment harness covering loss
//! weighting sweeps, multi-Reynolds meta-models, sparse noisy data, and
//! transfer-style warm starts.

pub mod autodiff;
pub mod dataset;
pub mod experiment;
pub mod network;
pub mod physics;
pub mod solver;
pub mod training;

pub use autodiff::{AutodiffError, NodeId, Tape, TaylorTuple};
