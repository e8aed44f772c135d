//! Numerical laboratory for the finite-temperature random k-SAT model.
//!
//! * [`model`]: formulas, random and planted ensembles, overlaps, balance.
//! * [`bp`]: belief propagation on the factor graph and the Bethe free energy.
//! * [`exact`]: brute-force partition function, marginals, correlations, sampler.
//! * [`tree`]: Galton-Watson trees and belief propagation on them.
//! * [`density`]: population dynamics for the distributional recursion.
//! * [`scalars`]: moment rates, the overlap landscape and related solvers.
//! * [`rsb`]: Bethe functional, interpolation bound, stable sets, polarization.
//! * [`cli`]: the experiment runner behind the `ksatlab` binary.

pub mod bp;
pub mod cli;
pub mod density;
pub mod error;
pub mod exact;
pub mod model;
pub mod real;
pub mod rng;
pub mod rsb;
pub mod scalars;
pub mod tree;

pub use error::{Error, Result};
pub use model::{Assignment, Beta, Formula, ModelParams};
