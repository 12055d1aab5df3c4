//! Online plug-in estimates of the Hessian `Γ_θ` and of the gradient-noise
//! covariance `Σ`, the pivotal statistic `Qₙ = √n Σ̂^{−1/2} Γ̂ (θ̄ₙ − θ)`,
//! χ² confidence ellipsoids and a one-sample Kolmogorov–Smirnov test against
//! the standard normal.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{direction_moments, radial_moments, theoretical_beta, DistributionSpec, SphereParams};
use crate::special::{chi2_quantile, kolmogorov_survival, normal_cdf};

/// Running means `Γ̂ₙ`, `Σ̂ₙ`, both seeded with the identity at `n = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulators {
    pub n: usize,
    pub gamma_hat: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
}

/// Per-sample Hessian and gradient outer product at `theta`.
///
/// With `ρ = ‖x − z‖` and `U = (x − z)/ρ` the Hessian of `½(‖x − z‖ − a)²` is
/// `[(1 − a/ρ)I + (a/ρ)UUᵀ, U; Uᵀ, 1]` and the gradient is
/// `v = ((a − ρ)U, a − ρ)`.
pub fn increments(x: &DVector<f64>, theta: &SphereParams) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let d = theta.dim();
    let diff = x - &theta.center;
    let rho = diff.norm();
    if rho < 1e-12 * (1.0 + theta.center.norm()) {
        return None;
    }
    let u = diff / rho;
    let ratio = theta.radius / rho;
    let mut hess = DMatrix::zeros(d + 1, d + 1);
    {
        let mut block = hess.view_mut((0, 0), (d, d));
        block.copy_from(&(&u * u.transpose() * ratio));
        for i in 0..d {
            block[(i, i)] += 1.0 - ratio;
        }
    }
    for i in 0..d {
        hess[(i, d)] = u[i];
        hess[(d, i)] = u[i];
    }
    hess[(d, d)] = 1.0;

    let residual = theta.radius - rho;
    let v = DVector::from_fn(d + 1, |i, _| if i < d { residual * u[i] } else { residual });
    let outer = &v * v.transpose();
    Some((hess, outer))
}

impl CovarianceAccumulators {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 1,
            gamma_hat: DMatrix::identity(dim + 1, dim + 1),
            sigma_hat: DMatrix::identity(dim + 1, dim + 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma_hat.nrows() - 1
    }

    /// Folds one observation in, evaluated at the running average
    /// `theta_bar`. Returns `false` (and changes nothing) when `x` sits on the
    /// center.
    pub fn update(&mut self, x: &DVector<f64>, theta_bar: &SphereParams) -> Result<bool> {
        if x.len() != self.dim() || theta_bar.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: if x.len() != self.dim() { x.len() } else { theta_bar.dim() },
            });
        }
        let Some((hess, outer)) = increments(x, theta_bar) else {
            return Ok(false);
        };
        self.n += 1;
        let w = 1.0 / self.n as f64;
        self.gamma_hat *= 1.0 - w;
        self.gamma_hat += hess * w;
        self.sigma_hat *= 1.0 - w;
        self.sigma_hat += outer * w;
        Ok(true)
    }

    /// Accumulates every point at one fixed parameter, for diagnostics.
    pub fn at_fixed(points: &[DVector<f64>], theta: &SphereParams) -> Result<Self> {
        let mut acc = Self::new(theta.dim());
        for x in points {
            acc.update(x, theta)?;
        }
        Ok(acc)
    }
}

/// `Γ_θ = [I − β(I − E[UUᵀ]), E[U]; E[U]ᵀ, 1]`.
pub fn theoretical_gamma(spec: &DistributionSpec) -> Result<DMatrix<f64>> {
    let d = spec.dim();
    let beta = theoretical_beta(spec)?;
    let dir = direction_moments(&spec.region, d)?;
    let mut g = DMatrix::zeros(d + 1, d + 1);
    let top = DMatrix::identity(d, d) - (DMatrix::identity(d, d) - &dir.second) * beta;
    g.view_mut((0, 0), (d, d)).copy_from(&top);
    for i in 0..d {
        g[(i, d)] = dir.mean[i];
        g[(d, i)] = dir.mean[i];
    }
    g[(d, d)] = 1.0;
    Ok(g)
}

/// `Σ = E[vvᵀ]` with `v = ((r* − rW)U, r* − rW)`, which factorizes as
/// `r²Var(W) · [E[UUᵀ], E[U]; E[U]ᵀ, 1]`.
pub fn theoretical_sigma(spec: &DistributionSpec) -> Result<DMatrix<f64>> {
    let d = spec.dim();
    let r = spec.truth.radius;
    let w = radial_moments(&spec.radial, r, d)?;
    let dir = direction_moments(&spec.region, d)?;
    let scale = r * r * w.variance;
    let mut s = DMatrix::zeros(d + 1, d + 1);
    s.view_mut((0, 0), (d, d)).copy_from(&(&dir.second * scale));
    for i in 0..d {
        s[(i, d)] = dir.mean[i] * scale;
        s[(d, i)] = dir.mean[i] * scale;
    }
    s[(d, d)] = scale;
    Ok(s)
}

/// Symmetric inverse square root with eigenvalues floored at
/// `1e-10 · trace / dim`. Also returns how many eigenvalues were floored.
pub fn inverse_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let sym = (m + m.transpose()) * 0.5;
    let k = sym.nrows();
    let floor = (1e-10 * sym.trace() / k as f64).max(f64::MIN_POSITIVE);
    let eig = sym.symmetric_eigen();
    let mut floored = 0;
    let scaled = DVector::from_iterator(
        k,
        eig.eigenvalues.iter().map(|&l| {
            if l < floor {
                floored += 1;
                1.0 / floor.sqrt()
            } else {
                1.0 / l.sqrt()
            }
        }),
    );
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&scaled) * q.transpose(), floored)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QStatistic {
    pub values: DVector<f64>,
    /// More than half of `Σ̂`'s spectrum hit the eigenvalue floor.
    pub ill_conditioned: bool,
}

/// `√n Σ̂^{−1/2} Γ̂`, the linear map shared by `Qₙ` and the ellipsoid.
fn whitening(acc: &CovarianceAccumulators) -> Result<(DMatrix<f64>, bool)> {
    let k = acc.dim() + 1;
    let (s, floored) = inverse_sqrt(&acc.sigma_hat);
    Ok((s * &acc.gamma_hat * (acc.n as f64).sqrt(), floored * 2 > k))
}

pub fn q_statistic(
    acc: &CovarianceAccumulators,
    theta_bar: &SphereParams,
    theta_true: &SphereParams,
) -> Result<QStatistic> {
    let (map, ill_conditioned) = whitening(acc)?;
    let diff = theta_bar.to_vector() - theta_true.to_vector();
    Ok(QStatistic {
        values: map * diff,
        ill_conditioned,
    })
}

/// `{θ : (θ̄ − θ)ᵀ M (θ̄ − θ) ≤ threshold}` with `M = n Γ̂ᵀ Σ̂⁻¹ Γ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEllipsoid {
    #[serde(with = "vector_serde")]
    pub center: DVector<f64>,
    #[serde(with = "matrix_serde")]
    pub shape: DMatrix<f64>,
    pub threshold: f64,
    pub level: f64,
    #[serde(skip)]
    pub ill_conditioned: bool,
}

impl ConfidenceEllipsoid {
    pub fn mahalanobis2(&self, theta: &SphereParams) -> f64 {
        let diff = &self.center - theta.to_vector();
        (diff.transpose() * &self.shape * &diff)[(0, 0)]
    }

    pub fn contains(&self, theta: &SphereParams) -> bool {
        self.mahalanobis2(theta) <= self.threshold
    }

    /// Shadow of the ellipsoid on each coordinate axis, as `(lo, hi)`.
    pub fn intervals(&self) -> Result<Vec<(f64, f64)>> {
        let cov = self
            .shape
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular ellipsoid shape".into()))?;
        Ok((0..self.center.len())
            .map(|i| {
                let half = (self.threshold * cov[(i, i)]).sqrt();
                (self.center[i] - half, self.center[i] + half)
            })
            .collect())
    }

    pub fn volume(&self) -> f64 {
        let k = self.center.len() as f64;
        let unit_ball = std::f64::consts::PI.powf(k / 2.0) / statrs::function::gamma::gamma(k / 2.0 + 1.0);
        unit_ball * self.threshold.powf(k / 2.0) / self.shape.determinant().sqrt()
    }
}

pub fn confidence_ball(
    acc: &CovarianceAccumulators,
    theta_bar: &SphereParams,
    level: f64,
) -> Result<ConfidenceEllipsoid> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence level {level} not in (0, 1)")));
    }
    let (map, ill_conditioned) = whitening(acc)?;
    let shape = map.transpose() * &map;
    let k = acc.dim() + 1;
    Ok(ConfidenceEllipsoid {
        center: theta_bar.to_vector(),
        shape,
        threshold: chi2_quantile(level, k as f64)?,
        level,
        ill_conditioned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against `N(0, 1)`. The p-value uses
/// the limiting Kolmogorov law at `(√m + 0.12 + 0.11/√m)·D`.
pub fn ks_statistic(samples: &[f64]) -> Result<KsResult> {
    let m = samples.len();
    if m < 20 {
        return Err(Error::InsufficientData { needed: 20, got: m });
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in KS sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mf = m as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            ((i + 1) as f64 / mf - f).max(f - i as f64 / mf)
        })
        .fold(0.0, f64::max);
    let root = mf.sqrt();
    let p_value = kolmogorov_survival((root + 0.12 + 0.11 / root) * statistic);
    Ok(KsResult { statistic, p_value })
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) mod matrix_serde {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::matrix_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(D::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_row_iterator(n, k, rows.into_iter().flatten()))
    }
}

mod vector_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Vec::<f64>::deserialize(d).map(DVector::from_vec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RadialLaw, TruncationRegion};
    use approx::assert_relative_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn shell_spec(delta: f64, region: TruncationRegion) -> DistributionSpec {
        DistributionSpec::new(
            SphereParams::new(vec![0.0; 3], 50.0).unwrap(),
            RadialLaw::Shell { delta },
            region,
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_increments() {
        let theta = SphereParams::new(vec![0., 0., 0.], 1.0).unwrap();
        let (h, s) = increments(&v(&[2., 0., 0.]), &theta).unwrap();
        let expected_h = DMatrix::from_row_slice(
            4,
            4,
            &[1., 0., 0., 1., 0., 0.5, 0., 0., 0., 0., 0.5, 0., 1., 0., 0., 1.],
        );
        assert!((h - expected_h).amax() < 1e-15);
        // v = ((a − ρ)U, a − ρ) = ((−1, 0, 0), −1)
        let vv = v(&[-1., 0., 0., -1.]);
        assert!((s - &vv * vv.transpose()).amax() < 1e-15);
    }

    #[test]
    fn on_sphere_residual_is_zero() {
        let theta = SphereParams::new(vec![1., 1., 1.], 2.0).unwrap();
        let (_, s) = increments(&v(&[1., 3., 1.]), &theta).unwrap();
        assert!(s.amax() < 1e-15);
    }

    #[test]
    fn recursion_is_an_exact_mean() {
        let theta = SphereParams::new(vec![0.1, -0.2, 0.3], 4.0).unwrap();
        let pts: Vec<_> = (0..500)
            .map(|i| {
                let t = i as f64;
                v(&[4.0 * (0.3 * t).cos(), 4.0 * (0.7 * t).sin(), (0.11 * t).sin() * 3.0])
            })
            .collect();
        let acc = CovarianceAccumulators::at_fixed(&pts, &theta).unwrap();
        let mut g = DMatrix::identity(4, 4);
        let mut s = DMatrix::identity(4, 4);
        for x in &pts {
            let (h, o) = increments(x, &theta).unwrap();
            g += h;
            s += o;
        }
        let n = acc.n as f64;
        assert_eq!(acc.n, 501);
        assert!((&acc.gamma_hat * n - g).amax() < 1e-9);
        assert!((&acc.sigma_hat * n - s).amax() < 1e-9);
        assert!((&acc.gamma_hat - acc.gamma_hat.transpose()).amax() < 1e-10);
        assert!((&acc.sigma_hat - acc.sigma_hat.transpose()).amax() < 1e-10);
    }

    #[test]
    fn center_sample_is_skipped() {
        let theta = SphereParams::new(vec![0., 0., 0.], 1.0).unwrap();
        let mut acc = CovarianceAccumulators::new(3);
        assert!(!acc.update(&v(&[0., 0., 0.]), &theta).unwrap());
        assert_eq!(acc.n, 1);
    }

    #[test]
    fn complete_sphere_gamma() {
        let spec = shell_spec(0.1, TruncationRegion::Complete);
        let beta = theoretical_beta(&spec).unwrap();
        let g = theoretical_gamma(&spec).unwrap();
        let mut expected = DMatrix::identity(4, 4) * (1.0 - 2.0 * beta / 3.0);
        expected[(3, 3)] = 1.0;
        assert!((g - expected).amax() < 1e-14);

        let g0 = theoretical_gamma(&shell_spec(1e-9, TruncationRegion::Complete)).unwrap();
        let lim = DMatrix::from_diagonal(&v(&[1. / 3., 1. / 3., 1. / 3., 1.]));
        assert!((g0 - lim).amax() < 1e-8);
    }

    #[test]
    fn half_sphere_gamma_is_positive_definite() {
        let spec = shell_spec(0.1, TruncationRegion::HalfSpace { axis: 1, sign: 1 });
        let beta = theoretical_beta(&spec).unwrap();
        assert!(beta < 12.0 / 11.0);
        let g = theoretical_gamma(&spec).unwrap();
        let min = g.symmetric_eigen().eigenvalues.min();
        assert!(min > 0.0, "{min}");
    }

    #[test]
    fn complete_sphere_positivity_condition() {
        let spec = shell_spec(0.1, TruncationRegion::Complete);
        assert!(theoretical_beta(&spec).unwrap() < 3.0 / 2.0);
    }

    #[test]
    fn shell_sigma_closed_form() {
        let spec = shell_spec(0.1, TruncationRegion::Complete);
        let s = theoretical_sigma(&spec).unwrap();
        let c = 2500.0 * 0.01 / 3.0;
        let expected = DMatrix::from_diagonal(&v(&[c / 3.0, c / 3.0, c / 3.0, c]));
        assert!((s - expected).amax() < 1e-12);
        let tiny = theoretical_sigma(&shell_spec(1e-9, TruncationRegion::Complete)).unwrap();
        assert!(tiny.amax() < 1e-12);
    }

    #[test]
    fn sigma_is_psd_for_truncated_gaussian() {
        let spec = DistributionSpec::new(
            SphereParams::new(vec![0.0; 3], 50.0).unwrap(),
            RadialLaw::RadialGaussian { sigma: 1.0 },
            TruncationRegion::HalfSpace { axis: 1, sign: 1 },
        )
        .unwrap();
        let s = theoretical_sigma(&spec).unwrap();
        assert!(s.symmetric_eigen().eigenvalues.min() >= -1e-12);
    }

    #[test]
    fn q_statistic_examples() {
        let mut acc = CovarianceAccumulators::new(3);
        acc.n = 4;
        let truth = SphereParams::new(vec![0., 0., 0.], 1.0).unwrap();
        let q = q_statistic(&acc, &truth, &truth).unwrap();
        assert_eq!(q.values, DVector::zeros(4));
        let bar = SphereParams::new(vec![1., 0., 0.], 1.0).unwrap();
        let q = q_statistic(&acc, &bar, &truth).unwrap();
        assert!((q.values - v(&[2., 0., 0., 0.])).amax() < 1e-14);
        assert!(!q.ill_conditioned);
    }

    #[test]
    fn inverse_sqrt_whitens() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (s, floored) = inverse_sqrt(&a);
        assert_eq!(floored, 0);
        assert!((&s * &a * &s - DMatrix::identity(3, 3)).amax() < 1e-8);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(inverse_sqrt(&singular).1, 1);
    }

    #[test]
    fn ill_conditioned_flag() {
        let mut acc = CovarianceAccumulators::new(3);
        acc.n = 100;
        acc.sigma_hat = DMatrix::from_diagonal(&v(&[1.0, 0.0, 0.0, 0.0]));
        let t = SphereParams::new(vec![0., 0., 0.], 1.0).unwrap();
        assert!(q_statistic(&acc, &t, &t).unwrap().ill_conditioned);
    }

    #[test]
    fn confidence_threshold_and_errors() {
        let mut acc = CovarianceAccumulators::new(3);
        acc.n = 100;
        let t = SphereParams::new(vec![0., 0., 0.], 1.0).unwrap();
        let ball = confidence_ball(&acc, &t, 0.95).unwrap();
        assert_relative_eq!(ball.threshold, 9.487_729_036_781_154, max_relative = 1e-8);
        assert!(ball.contains(&t));
        assert!(confidence_ball(&acc, &t, 1.0).is_err());
        assert!(confidence_ball(&acc, &t, 0.0).is_err());
        let iv = ball.intervals().unwrap();
        let half = (9.487_729_036_781_154f64 / 100.0).sqrt();
        assert_relative_eq!(iv[0].1, half, max_relative = 1e-8);
    }

    #[test]
    fn ellipsoid_volume_shrinks_with_n() {
        let mut acc = CovarianceAccumulators::new(3);
        acc.gamma_hat = DMatrix::from_diagonal(&v(&[0.3, 0.35, 0.4, 1.0]));
        acc.sigma_hat = DMatrix::from_diagonal(&v(&[2.0, 3.0, 2.5, 8.0]));
        let t = SphereParams::new(vec![0., 0., 0.], 1.0).unwrap();
        acc.n = 100;
        let v1 = confidence_ball(&acc, &t, 0.9).unwrap().volume();
        acc.n = 400;
        let v2 = confidence_ball(&acc, &t, 0.9).unwrap().volume();
        // Factor 4 in n shrinks each of 4 semi-axes by 2.
        assert_relative_eq!(v1 / v2, 16.0, max_relative = 1e-9);
    }

    #[test]
    fn confidence_json_shape() {
        let mut acc = CovarianceAccumulators::new(2);
        acc.n = 10;
        let t = SphereParams::new(vec![0., 0.], 1.0).unwrap();
        let json = serde_json::to_value(confidence_ball(&acc, &t, 0.5).unwrap()).unwrap();
        assert_eq!(json["shape"].as_array().unwrap().len(), 3);
        assert_eq!(json["shape"][0].as_array().unwrap().len(), 3);
        assert_eq!(json["level"], 0.5);
        assert_eq!(json["center"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn ks_on_exact_quantiles() {
        let m = 1000;
        let normal = Normal::standard();
        // Polish the quantiles with Newton steps on the CDF used by the test.
        let xs: Vec<f64> = (1..=m)
            .map(|i| {
                let p = (i as f64 - 0.5) / m as f64;
                let mut x = normal.inverse_cdf(p);
                for _ in 0..3 {
                    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    x -= (normal_cdf(x) - p) / density;
                }
                x
            })
            .collect();
        let r = ks_statistic(&xs).unwrap();
        assert!(r.statistic <= 0.5 / m as f64 + 1e-12);
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn ks_rejects_point_mass() {
        let r = ks_statistic(&[0.3; 200]).unwrap();
        assert!(r.p_value < 1e-6);
        assert!(ks_statistic(&[0.0; 10]).is_err());
    }

    #[test]
    fn ks_sorts_internally() {
        let xs: Vec<f64> = (0..50).map(|i| ((i * 37) % 50) as f64 / 10.0 - 2.5).collect();
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(ks_statistic(&xs).unwrap(), ks_statistic(&sorted).unwrap());
    }
}
