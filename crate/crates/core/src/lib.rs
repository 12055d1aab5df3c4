//! Center and radius estimation for noisy point clouds spread around a
//! complete or truncated sphere.
//!
//! The estimator is a projected Robbins-Monro recursion on the quadratic
//! criterion `G(z, a) = ½ E[(‖X − z‖ − a)²]` followed by Polyak averaging.
//! Around it sit the pieces needed to use it in practice and to study it:
//!
//! - [`model`]: the generative law `X = μ + r·W·U_Ω` and its samplers.
//! - [`geometry`]: circumspheres and the robust quadruplet initializer.
//! - [`prm`]: the stochastic gradient, projection and the streaming estimator.
//! - [`inference`]: online plug-in covariance estimates, the pivotal
//!   statistic and confidence ellipsoids.
//! - [`baseline`]: a batch backfitting fixed point on the moment equations.
//! - [`experiments`]: a seeded Monte Carlo harness.

pub mod baseline;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod model;
pub mod prm;
pub mod quadrature;
pub mod rng;
pub mod special;

pub use error::{Error, Result};
pub use geometry::CompactRegion;
pub use model::{DistributionSpec, RadialLaw, SphereParams, TruncationRegion};
pub use prm::{EstimatorState, FitSummary, StepSchedule};
