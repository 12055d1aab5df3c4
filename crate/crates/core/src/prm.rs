//! Projected Robbins-Monro recursion with Polyak averaging.
//!
//! The per-sample direction is `h(x, (z, a)) = ∇_y ½(‖x − z‖ − a)²`, so that
//! `E[h(X, y)] = ∇G(y)` with `G(y) = ½ E[(‖X − z‖ − a)²]`. Any other scaling
//! of the gradient is equivalent to rescaling `c_γ`.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{initialize, CompactRegion, InitConfig};
use crate::model::SphereParams;

/// Membership tolerance used when counting projection events.
/// An iterate farther than this many initial radii from the starting point
/// marks the run as diverged.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

pub const MEMBERSHIP_TOL: f64 = 1e-12;

/// `γ_n = c_γ · n^{−α}` with `α ∈ (½, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub c_gamma: f64,
    pub alpha: f64,
}

impl StepSchedule {
    pub fn new(c_gamma: f64, alpha: f64) -> Result<Self> {
        if !(c_gamma > 0.0 && c_gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("c_gamma must be positive, got {c_gamma}")));
        }
        if !(alpha > 0.5 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0.5, 1), got {alpha}")));
        }
        Ok(Self { c_gamma, alpha })
    }

    pub fn step(&self, n: usize) -> f64 {
        self.c_gamma * (n as f64).powf(-self.alpha)
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            c_gamma: 1.0,
            alpha: 2.0 / 3.0,
        }
    }
}

/// Per-sample gradient `h(x, θ)` as `(center part, radius part)`.
///
/// Returns `None` when `x` sits on the current center, where the gradient is
/// undefined; callers skip such samples.
pub fn stochastic_gradient(x: &DVector<f64>, theta: &SphereParams) -> Option<(DVector<f64>, f64)> {
    let diff = &theta.center - x;
    let dist = diff.norm();
    if dist < 1e-12 * (1.0 + theta.center.norm()) {
        return None;
    }
    let center_part = &diff * (1.0 - theta.radius / dist);
    Some((center_part, theta.radius - dist))
}

pub fn project(y: &SphereParams, region: &CompactRegion) -> SphereParams {
    region.project(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Updated { projected: bool },
    Skipped,
    /// The recursion has produced a non-finite iterate and is frozen.
    Frozen,
}

/// Streaming estimator state: the current iterate `θ̂ₙ`, its running mean
/// `θ̄ₙ` and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    /// Index of the current iterate (`θ̂₁` is the initial point).
    pub n: usize,
    pub theta_hat: SphereParams,
    pub theta_bar: SphereParams,
    pub schedule: StepSchedule,
    /// `None` runs the plain, unprojected recursion.
    pub region: Option<CompactRegion>,
    pub projection_count: usize,
    /// Step index of the most recent projection event.
    pub last_projection: Option<usize>,
    pub skipped: usize,
    pub diverged: bool,
    /// Iterates with index `≤ avg_burn` are left out of the average.
    pub avg_burn: usize,
    averaged: usize,
    origin: SphereParams,
}

impl EstimatorState {
    pub fn new(initial: SphereParams, schedule: StepSchedule, region: Option<CompactRegion>) -> Result<Self> {
        if let Some(r) = &region {
            if r.dim() != initial.dim() {
                return Err(Error::DimensionMismatch {
                    expected: initial.dim(),
                    got: r.dim(),
                });
            }
        }
        let theta_hat = match &region {
            Some(r) => r.project(&initial),
            None => initial,
        };
        Ok(Self {
            n: 1,
            origin: theta_hat.clone(),
            theta_bar: theta_hat.clone(),
            theta_hat,
            schedule,
            region,
            projection_count: 0,
            last_projection: None,
            skipped: 0,
            diverged: false,
            avg_burn: 0,
            averaged: 1,
        })
    }

    /// Drops the first `burn` iterates from the running average.
    pub fn with_avg_burn(mut self, burn: usize) -> Self {
        self.avg_burn = burn;
        if burn >= 1 {
            self.averaged = 0;
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.dim()
    }

    /// Number of iterates currently in the average.
    pub fn averaged_count(&self) -> usize {
        self.averaged
    }

    /// One step: `θ̂ₙ₊₁ = π(θ̂ₙ − γₙ h(x, θ̂ₙ))`, then the running mean.
    pub fn update(&mut self, x: &DVector<f64>) -> Result<UpdateOutcome> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if self.diverged && !self.theta_hat.is_finite() {
            return Ok(UpdateOutcome::Frozen);
        }
        let Some((grad_center, grad_radius)) = stochastic_gradient(x, &self.theta_hat) else {
            self.skipped += 1;
            return Ok(UpdateOutcome::Skipped);
        };
        let gamma = self.schedule.step(self.n);
        let raw = SphereParams::from_parts(
            &self.theta_hat.center - grad_center * gamma,
            self.theta_hat.radius - gamma * grad_radius,
        );
        let (next, projected) = match &self.region {
            Some(region) => {
                let outside = !region.contains(&raw, MEMBERSHIP_TOL);
                (if outside { region.project(&raw) } else { raw }, outside)
            }
            None => (raw, false),
        };
        if !next.is_finite() {
            self.diverged = true;
            return Ok(UpdateOutcome::Frozen);
        }
        let escape = DIVERGENCE_FACTOR * self.origin.radius.abs();
        if next.radius <= 0.0 || (next.to_vector() - self.origin.to_vector()).norm() > escape {
            self.diverged = true;
        }
        self.n += 1;
        if projected {
            self.projection_count += 1;
            self.last_projection = Some(self.n - 1);
        }
        self.theta_hat = next;
        if self.n > self.avg_burn {
            self.averaged += 1;
            let w = 1.0 / self.averaged as f64;
            let bar = &mut self.theta_bar;
            bar.center += (&self.theta_hat.center - &bar.center) * w;
            bar.radius += (self.theta_hat.radius - bar.radius) * w;
        } else {
            self.theta_bar = self.theta_hat.clone();
        }
        Ok(UpdateOutcome::Updated { projected })
    }

    pub fn summary(&self, points: usize) -> FitSummary {
        FitSummary {
            n: self.n,
            points,
            theta_hat: self.theta_hat.clone(),
            theta_bar: self.theta_bar.clone(),
            projections: self.projection_count,
            skipped: self.skipped,
            diverged: self.diverged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    /// Index of the last iterate.
    pub n: usize,
    /// Points read from the input.
    pub points: usize,
    pub theta_hat: SphereParams,
    pub theta_bar: SphereParams,
    pub projections: usize,
    pub skipped: usize,
    pub diverged: bool,
}

/// Where the recursion starts.
#[derive(Debug, Clone)]
pub enum Start {
    /// Quadruplet-median estimate from the data, with the region around it.
    Initializer(InitConfig),
    Explicit {
        initial: SphereParams,
        region: Option<CompactRegion>,
    },
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub start: Start,
    /// Run the projected recursion. When false the region is only used for
    /// reporting and the plain recursion runs.
    pub projected: bool,
    pub avg_burn: usize,
    /// Keep the initializer's first points out of the recursion stream.
    pub fresh_init: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            start: Start::Initializer(InitConfig::default()),
            projected: true,
            avg_burn: 0,
            fresh_init: false,
        }
    }
}

/// Resolves the starting point and region for `points`.
pub fn starting_point<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    start: &Start,
    rng: &mut R,
) -> Result<(SphereParams, Option<CompactRegion>)> {
    match start {
        Start::Initializer(cfg) => initialize(points, *cfg, rng).map(|(s, r)| (s, Some(r))),
        Start::Explicit { initial, region } => Ok((initial.clone(), region.clone())),
    }
}

/// Runs the recursion over `points` and returns the final state.
pub fn fit<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    schedule: StepSchedule,
    options: &FitOptions,
    rng: &mut R,
) -> Result<(EstimatorState, FitSummary)> {
    if points.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (initial, region) = starting_point(points, &options.start, rng)?;
    let skip = match (&options.start, options.fresh_init) {
        (Start::Initializer(cfg), true) => cfg.k_first,
        _ => 0,
    };
    if skip >= points.len() {
        return Err(Error::InsufficientData {
            needed: skip + 1,
            got: points.len(),
        });
    }
    let region = if options.projected { region } else { None };
    let mut state = EstimatorState::new(initial, schedule, region)?.with_avg_burn(options.avg_burn);
    for x in &points[skip..] {
        state.update(x)?;
    }
    let summary = state.summary(points.len());
    Ok((state, summary))
}
