//! Moment estimation for one-dimensional ergodic diffusions
//! `dX = S(X) dt + σ(X) dW`: empirical, maximum-likelihood and one-step
//! estimators of `ϑ = E[F(ξ)]`, their efficiency bounds, and the first-order
//! Edgeworth correction to the law of the empirical estimator.

pub mod edgeworth;
pub mod error;
pub mod field;
pub mod harness;
pub mod invariant;
pub mod model;
pub mod nonparam;
pub mod param;
pub mod quadrature;
pub mod simulate;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use field::{GrowthBound, ScalarField, Smoothness};
pub use invariant::{InvariantLaw, TruncationDomain};
pub use model::{make_nonlinear_family, make_ou_family, DiffusionModel, ParametricFamily, Path};
