//! Simulation and reconstruction of multidimensional jump-diffusion
//! processes.
//!
//! The crate simulates processes of the form
//! `dX = f(X,t) dt + sigma(X,t) dB + sum_s beta_s(X,t) dÑ_s`
//! (compensated Poisson jumps over a finite mark set) and reconstructs
//! unknown drift, diffusion, and jump-amplitude functions from
//! trajectory ensembles by minimizing ensemble-comparison losses,
//! chiefly a temporally decoupled squared Wasserstein-2 distance.

pub mod error;
pub mod io;
pub mod loss;
pub mod nn;
pub mod process;
pub mod reconstruct;
pub mod rng;
pub mod sim;
pub mod transport;

pub use error::{Error, Result};
pub use process::{CoefficientSet, InitialLaw, JumpMeasure, ProcessSpec, SpecSource};
pub use sim::{Ensemble, NoiseTape, TimeGrid};
