//! Backfitting baseline: alternate the empirical versions of
//! `μ = E[X − r(X − μ)/‖X − μ‖]` and `r = E[‖X − μ‖]` until they stop moving.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SphereParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackfitConfig {
    pub max_iterations: usize,
    /// Stop once `‖θ_{t+1} − θ_t‖ ≤ tolerance · r_{t+1}`.
    pub tolerance: f64,
    /// Update `r` from the previous center instead of the fresh one.
    pub simultaneous: bool,
}

impl Default for BackfitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-8,
            simultaneous: false,
        }
    }
}

impl BackfitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "backfitting needs positive max_iterations and tolerance, got {} and {}",
                self.max_iterations, self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackfitResult {
    pub estimate: SphereParams,
    pub iterations: usize,
    pub converged: bool,
    /// Iterates `θ_0 = init, θ_1, …`.
    pub trace: Vec<SphereParams>,
}

fn center_step(points: &[DVector<f64>], center: &DVector<f64>, radius: f64) -> DVector<f64> {
    let d = center.len();
    let mut sum = DVector::zeros(d);
    let mut used = 0usize;
    for x in points {
        let diff = x - center;
        let dist = diff.norm();
        if dist < 1e-12 * (1.0 + center.norm()) {
            continue;
        }
        sum += x - diff * (radius / dist);
        used += 1;
    }
    if used == 0 {
        return center.clone();
    }
    sum / used as f64
}

fn mean_distance(points: &[DVector<f64>], center: &DVector<f64>) -> f64 {
    points.iter().map(|x| (x - center).norm()).sum::<f64>() / points.len() as f64
}

/// Runs the fixed-point iteration from `init`.
///
/// With fewer than `d + 2` points the sphere is not identified; the
/// iteration is not run and the result reports `converged = false`.
pub fn backfit(points: &[DVector<f64>], init: &SphereParams, config: &BackfitConfig) -> Result<BackfitResult> {
    config.validate()?;
    let d = init.dim();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: p.len() });
    }
    let mut trace = vec![init.clone()];
    if points.len() < d + 2 {
        return Ok(BackfitResult {
            estimate: init.clone(),
            iterations: 0,
            converged: false,
            trace,
        });
    }
    let mut current = init.clone();
    for it in 1..=config.max_iterations {
        let center = center_step(points, &current.center, current.radius);
        let radius = if config.simultaneous {
            mean_distance(points, &current.center)
        } else {
            mean_distance(points, &center)
        };
        let next = SphereParams::from_parts(center, radius);
        if !next.is_finite() {
            return Err(Error::Numeric(format!("backfitting produced a non-finite iterate at step {it}")));
        }
        let change = (next.to_vector() - current.to_vector()).norm();
        trace.push(next.clone());
        current = next;
        if change <= config.tolerance * current.radius.abs() {
            return Ok(BackfitResult {
                estimate: current,
                iterations: it,
                converged: true,
                trace,
            });
        }
    }
    Ok(BackfitResult {
        estimate: current,
        iterations: config.max_iterations,
        converged: false,
        trace,
    })
}
