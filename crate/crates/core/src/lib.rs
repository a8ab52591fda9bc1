//! Exact-diagonalization toolkit for a frustrated bosonic t-J model on
//! triangular ladders and small 2D triangular clusters, together with a
//! simulated detection pipeline (shots, readout errors, correlator
//! reconstruction) and a classical model of correlated preparation errors.

pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod hamiltonian;
pub mod hilbert;
pub mod initmodel;
pub mod measurement;
pub mod observables;
pub mod reconstruction;
pub mod spectra;
pub mod toymodel;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
