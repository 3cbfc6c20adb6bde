//! Numerical laboratory for ergodic BSDEs driven by McKean-Vlasov SDEs: particle
//! simulation, Wasserstein contraction, reflection coupling, backward regression
//! solvers, vanishing-discount extraction of the ergodic triple, long-time behavior
//! and the associated partial mean-field control problem.

// Guards like `!(dt > 0.0)` are written negated so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod bsde;
pub mod control;
pub mod coupling;
pub mod ebsde;
pub mod error;
pub mod ltb;
pub mod measure;
pub mod model;
pub mod quadrature;
pub mod regression;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
pub use measure::{EmpiricalMeasure, MeasureFlow};
pub use model::{preset, ProblemSpec};
