//! Quasi-maximum likelihood estimation for binary choice models.
//!
//! The crate fits misspecified logit/probit models to data from
//! `Y = sgn(alpha0 + X'beta0 - U)`, computes the pseudo-true parameter the
//! fit converges to, and checks that its slope is a positive multiple of
//! `beta0` when the error law depends on `X` only through the index and
//! `E(X | index)` is linear.

pub mod dgp;
pub mod harness;
pub mod links;
pub mod population;
pub mod qmle;
pub mod reweight;

pub use dgp::{Assumption, Dataset, DgpError, DgpSpec, ModelParams};
pub use links::{builtin_links, CustomLinkFns, LinkError, LinkFamily};
pub use population::{pseudo_true, PopulationError, PopulationProblem, PseudoTrue};
pub use qmle::{fit, fit_weighted, FitError, FitResult, Hypothesis, HypothesisResult};
