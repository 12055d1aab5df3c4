//! Exact spheres through `d + 1` points, the quadruplet-median initializer and
//! the compact product region the projected recursion lives in.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SphereParams;

/// `𝒦 = B̄(μ₀, R_μ) × [r₀ − R_r, r₀ + R_r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactRegion {
    #[serde(with = "dvector_serde")]
    pub center_ball_center: DVector<f64>,
    pub center_ball_radius: f64,
    pub radius_ball_center: f64,
    pub radius_ball_radius: f64,
}

mod dvector_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Vec::<f64>::deserialize(d).map(DVector::from_vec)
    }
}

impl CompactRegion {
    pub fn new(
        center_ball_center: DVector<f64>,
        center_ball_radius: f64,
        radius_ball_center: f64,
        radius_ball_radius: f64,
    ) -> Result<Self> {
        if !(center_ball_radius > 0.0 && radius_ball_radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "region radii must be positive, got {center_ball_radius} and {radius_ball_radius}"
            )));
        }
        if !(radius_ball_center - radius_ball_radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "radius interval [{}, {}] must stay positive",
                radius_ball_center - radius_ball_radius,
                radius_ball_center + radius_ball_radius
            )));
        }
        Ok(Self {
            center_ball_center,
            center_ball_radius,
            radius_ball_center,
            radius_ball_radius,
        })
    }

    /// Region with both ball radii equal to `initial.radius / 10`.
    pub fn around(initial: &SphereParams) -> Result<Self> {
        let r = initial.radius / 10.0;
        Self::new(initial.center.clone(), r, initial.radius, r)
    }

    pub fn dim(&self) -> usize {
        self.center_ball_center.len()
    }

    pub fn contains(&self, y: &SphereParams, tol: f64) -> bool {
        self.boundary_distance(y) >= -tol
    }

    /// Signed distance from `y` to the boundary: positive inside, negative
    /// outside (then it is minus the largest component violation).
    pub fn boundary_distance(&self, y: &SphereParams) -> f64 {
        let center_slack = self.center_ball_radius - (&y.center - &self.center_ball_center).norm();
        let radius_slack = self.radius_ball_radius - (y.radius - self.radius_ball_center).abs();
        center_slack.min(radius_slack)
    }

    /// Component-wise radial projection onto the region.
    pub fn project(&self, y: &SphereParams) -> SphereParams {
        let offset = &y.center - &self.center_ball_center;
        let dist = offset.norm();
        // Points within rounding error of the boundary count as inside.
        let slack = 8.0 * f64::EPSILON * (self.center_ball_radius + self.center_ball_center.norm());
        let center = if dist <= self.center_ball_radius + slack {
            y.center.clone()
        } else {
            &self.center_ball_center + offset * (self.center_ball_radius / dist)
        };
        let lo = self.radius_ball_center - self.radius_ball_radius;
        let hi = self.radius_ball_center + self.radius_ball_radius;
        SphereParams::from_parts(center, y.radius.clamp(lo, hi))
    }
}

/// Sphere through `d + 1` points in `ℝᵈ`.
///
/// Solves `2⟨pᵢ − p₀, c − p₀⟩ = ‖pᵢ − p₀‖²` for `i = 1..d`, which is the
/// difference of the sphere equations written relative to `p₀`.
pub fn circumsphere(points: &[DVector<f64>]) -> Result<SphereParams> {
    let d = points.first().map(|p| p.len()).unwrap_or(0);
    if d < 2 {
        return Err(Error::InvalidParameter(format!("dimension must be at least 2, got {d}")));
    }
    if points.len() != d + 1 {
        return Err(Error::InvalidParameter(format!(
            "need exactly {} points in dimension {d}, got {}",
            d + 1,
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: p.len() });
    }
    let p0 = &points[0];
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for (i, p) in points[1..].iter().enumerate() {
        let diff = p - p0;
        b[i] = diff.norm_squared();
        a.row_mut(i).copy_from(&(diff.transpose() * 2.0));
    }
    let mut scale: f64 = 0.0;
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            scale = scale.max((p - q).norm());
        }
    }
    let lu = a.lu();
    let det = lu.determinant();
    let threshold = 1e-10 * scale.powi(d as i32);
    if !(det.abs() >= threshold) || scale == 0.0 {
        return Err(Error::DegenerateConfiguration { det, threshold });
    }
    let offset = lu
        .solve(&b)
        .ok_or(Error::DegenerateConfiguration { det, threshold })?;
    let radius = offset.norm();
    Ok(SphereParams::from_parts(p0 + offset, radius))
}

/// Coordinatewise median; an even count averages the two middle values.
pub fn coordinatewise_median(points: &[DVector<f64>]) -> DVector<f64> {
    let d = points[0].len();
    let mut column = Vec::with_capacity(points.len());
    DVector::from_fn(d, |j, _| {
        column.clear();
        column.extend(points.iter().map(|p| p[j]));
        median_in_place(&mut column)
    })
}

pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Tuples are drawn from (and the radius is averaged over) the first
    /// `k_first` points.
    pub k_first: usize,
    pub n_tuples: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            k_first: 50,
            n_tuples: 200,
        }
    }
}

/// Robust preliminary estimate `(μ₀, r₀)` and the region `𝒦` around it.
///
/// Draws `n_tuples` tuples of `d + 1` points with replacement among the first
/// `k_first` points, takes the coordinatewise median of their circumcenters
/// as `μ₀`, then `r₀ = mean ‖Xᵢ − μ₀‖` over the same first points. Degenerate
/// tuples are redrawn.
pub fn initialize<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    config: InitConfig,
    rng: &mut R,
) -> Result<(SphereParams, CompactRegion)> {
    let InitConfig { k_first, n_tuples } = config;
    if points.len() < k_first {
        return Err(Error::InsufficientData {
            needed: k_first,
            got: points.len(),
        });
    }
    let d = points[0].len();
    if k_first < d + 1 || n_tuples == 0 {
        return Err(Error::InvalidParameter(format!(
            "initializer needs k_first ≥ {} and n_tuples ≥ 1 (got {k_first}, {n_tuples})",
            d + 1
        )));
    }
    let head = &points[..k_first];
    if let Some(p) = head.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: p.len() });
    }

    let budget = 100 * n_tuples;
    let mut centers = Vec::with_capacity(n_tuples);
    let mut tuple = Vec::with_capacity(d + 1);
    let mut failures = 0;
    while centers.len() < n_tuples {
        tuple.clear();
        tuple.extend((0..=d).map(|_| head[rng.random_range(0..k_first)].clone()));
        match circumsphere(&tuple) {
            Ok(s) if s.is_finite() => {
                centers.push(s.center);
                failures = 0;
            }
            Ok(_) | Err(Error::DegenerateConfiguration { .. }) => {
                failures += 1;
                if failures > budget {
                    return Err(Error::DegenerateData(failures));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let center = coordinatewise_median(&centers);
    let radius = head.iter().map(|p| (p - &center).norm()).sum::<f64>() / k_first as f64;
    let initial = SphereParams::new(center.as_slice().to_vec(), radius)?;
    let region = CompactRegion::around(&initial)?;
    Ok((initial, region))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn unit_sphere_through_four_points() {
        let s = circumsphere(&[v(&[1., 0., 0.]), v(&[-1., 0., 0.]), v(&[0., 1., 0.]), v(&[0., 0., 1.])]).unwrap();
        assert!(s.center.norm() < 1e-12);
        assert_relative_eq!(s.radius, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn translated_and_scaled() {
        let s = circumsphere(&[v(&[51., 0., 0.]), v(&[-49., 0., 0.]), v(&[1., 50., 0.]), v(&[1., 0., 50.])]).unwrap();
        assert!((s.center - v(&[1., 0., 0.])).norm() < 1e-10);
        assert_relative_eq!(s.radius, 50.0, max_relative = 1e-12);
    }

    #[test]
    fn coplanar_points_are_degenerate() {
        let r = circumsphere(&[v(&[0., 0., 0.]), v(&[1., 0., 0.]), v(&[0., 1., 0.]), v(&[1., 1., 0.])]);
        assert!(matches!(r, Err(Error::DegenerateConfiguration { .. })));
        let repeated = circumsphere(&[v(&[0., 0., 0.]), v(&[0., 0., 0.]), v(&[0., 1., 0.]), v(&[1., 1., 1.])]);
        assert!(matches!(repeated, Err(Error::DegenerateConfiguration { .. })));
    }

    #[test]
    fn circle_in_the_plane() {
        let s = circumsphere(&[v(&[3., 2.]), v(&[1., 4.]), v(&[-1., 2.])]).unwrap();
        assert!((s.center - v(&[1., 2.])).norm() < 1e-12);
        assert_relative_eq!(s.radius, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn wrong_point_count() {
        assert!(circumsphere(&[v(&[0., 0., 0.]), v(&[1., 0., 0.])]).is_err());
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median_in_place(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_in_place(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn projection_examples() {
        let region = CompactRegion::new(v(&[0., 0., 0.]), 5.0, 50.0, 5.0).unwrap();
        let y = SphereParams::new(vec![30., 40., 0.], 50.0).unwrap();
        let p = region.project(&y);
        assert!((p.center - v(&[3., 4., 0.])).norm() < 1e-12);
        assert_eq!(p.radius, 50.0);
        let y = SphereParams::new(vec![0., 0., 0.], 60.0).unwrap();
        assert_eq!(region.project(&y).radius, 55.0);
        let inside = SphereParams::new(vec![1., -1., 2.], 47.0).unwrap();
        assert_eq!(region.project(&inside), inside);
    }

    #[test]
    fn region_invariants() {
        assert!(CompactRegion::new(v(&[0., 0.]), 1.0, 1.0, 1.0).is_err());
        assert!(CompactRegion::new(v(&[0., 0.]), 0.0, 10.0, 1.0).is_err());
        assert!(CompactRegion::new(v(&[0., 0.]), 1.0, 10.0, 1.0).is_ok());
    }

    fn fibonacci_sphere(n: usize, radius: f64) -> Vec<DVector<f64>> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rho = (1.0 - y * y).sqrt();
                let t = golden * i as f64;
                v(&[rho * t.cos(), y, rho * t.sin()]) * radius
            })
            .collect()
    }

    #[test]
    fn noise_free_initialization_recovers_truth() {
        let pts = fibonacci_sphere(60, 50.0);
        let (init, region) = initialize(&pts, InitConfig::default(), &mut stream(11)).unwrap();
        assert!(init.center.norm() < 1e-9);
        assert!((init.radius - 50.0).abs() < 1e-9);
        assert!((region.center_ball_radius - 5.0).abs() < 1e-9);
        assert!(region.radius_ball_center - region.radius_ball_radius > 0.0);
    }

    #[test]
    fn initialization_is_deterministic() {
        let pts = fibonacci_sphere(80, 10.0);
        let a = initialize(&pts, InitConfig::default(), &mut stream(5)).unwrap();
        let b = initialize(&pts, InitConfig::default(), &mut stream(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initialization_needs_enough_points() {
        let pts = fibonacci_sphere(20, 1.0);
        assert!(matches!(
            initialize(&pts, InitConfig::default(), &mut stream(0)),
            Err(Error::InsufficientData { needed: 50, got: 20 })
        ));
    }

    #[test]
    fn all_coplanar_data_exhausts_the_budget() {
        let pts: Vec<_> = (0..50).map(|i| v(&[i as f64, (i * i) as f64, 0.0])).collect();
        let cfg = InitConfig { k_first: 50, n_tuples: 3 };
        assert!(matches!(initialize(&pts, cfg, &mut stream(0)), Err(Error::DegenerateData(_))));
    }
}
