//! Generative model `X = μ + r·W·U_Ω` for points spread around a complete or
//! truncated sphere, and the closed-form or quadrature moments the inference
//! layer needs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::integrate;

/// Center and radius of a sphere. Used both for the truth `(μ, r)` and for
/// estimates `(z, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SphereRepr", into = "SphereRepr")]
pub struct SphereParams {
    pub center: DVector<f64>,
    pub radius: f64,
}

#[derive(Serialize, Deserialize)]
struct SphereRepr {
    center: Vec<f64>,
    radius: f64,
}

impl TryFrom<SphereRepr> for SphereParams {
    type Error = Error;

    fn try_from(r: SphereRepr) -> Result<Self> {
        SphereParams::new(r.center, r.radius)
    }
}

impl From<SphereParams> for SphereRepr {
    fn from(s: SphereParams) -> Self {
        SphereRepr {
            center: s.center.iter().copied().collect(),
            radius: s.radius,
        }
    }
}

impl SphereParams {
    pub fn new(center: impl Into<Vec<f64>>, radius: f64) -> Result<Self> {
        let center: Vec<f64> = center.into();
        if center.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "dimension must be at least 2, got {}",
                center.len()
            )));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter(format!("radius must be positive, got {radius}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("center has non-finite coordinates".into()));
        }
        Ok(Self {
            center: DVector::from_vec(center),
            radius,
        })
    }

    /// Builds parameters without validation. The unprojected recursion can
    /// leave the admissible set, so it needs to hold such values.
    pub fn from_parts(center: DVector<f64>, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Stacks `(center, radius)` into one vector of length `d + 1`.
    pub fn to_vector(&self) -> DVector<f64> {
        let d = self.dim();
        DVector::from_fn(d + 1, |i, _| if i < d { self.center[i] } else { self.radius })
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let d = v.len() - 1;
        Self {
            center: v.rows(0, d).into_owned(),
            radius: v[d],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.radius.is_finite() && self.center.iter().all(|c| c.is_finite())
    }
}

/// Law of the normalized radial coordinate `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RadialRepr", into = "RadialRepr")]
pub enum RadialLaw {
    /// `W ~ Uniform[1 − δ, 1 + δ]`.
    Shell { delta: f64 },
    /// Radial marginal of the density `∝ exp(−(‖x − μ‖ − r)² / 2σ²)`.
    RadialGaussian { sigma: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RadialRepr {
    Shell(f64),
    Gaussian(f64),
}

impl TryFrom<RadialRepr> for RadialLaw {
    type Error = Error;

    fn try_from(r: RadialRepr) -> Result<Self> {
        let law = match r {
            RadialRepr::Shell(delta) => RadialLaw::Shell { delta },
            RadialRepr::Gaussian(sigma) => RadialLaw::RadialGaussian { sigma },
        };
        law.validate()?;
        Ok(law)
    }
}

impl From<RadialLaw> for RadialRepr {
    fn from(l: RadialLaw) -> Self {
        match l {
            RadialLaw::Shell { delta } => RadialRepr::Shell(delta),
            RadialLaw::RadialGaussian { sigma } => RadialRepr::Gaussian(sigma),
        }
    }
}

impl RadialLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RadialLaw::Shell { delta } if !(delta > 0.0 && delta < 1.0) => Err(Error::InvalidParameter(
                format!("shell half-width must lie in (0, 1), got {delta}"),
            )),
            RadialLaw::RadialGaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => Err(
                Error::InvalidParameter(format!("radial sigma must be positive, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Subset `Ω` of the unit sphere carrying the uniform direction law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationRegion {
    Complete,
    /// `{u : sign·u[axis] ≥ 0}`.
    HalfSpace { axis: usize, sign: i8 },
    /// `{u : ⟨u, axis⟩ ≥ cos(max_angle)}`.
    Cap { axis: Vec<f64>, max_angle: f64 },
}

impl TruncationRegion {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            TruncationRegion::Complete => Ok(()),
            TruncationRegion::HalfSpace { axis, sign } => {
                if *axis >= dim {
                    return Err(Error::InvalidRegion(format!(
                        "half-space axis {axis} out of range for dimension {dim}"
                    )));
                }
                if *sign != 1 && *sign != -1 {
                    return Err(Error::InvalidRegion(format!("half-space sign must be ±1, got {sign}")));
                }
                Ok(())
            }
            TruncationRegion::Cap { axis, max_angle } => {
                if axis.len() != dim {
                    return Err(Error::InvalidRegion(format!(
                        "cap axis has dimension {}, expected {dim}",
                        axis.len()
                    )));
                }
                let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidRegion(format!("cap axis must be a unit vector (norm {norm})")));
                }
                if !(*max_angle > 0.0 && *max_angle <= std::f64::consts::PI) {
                    return Err(Error::InvalidRegion(format!(
                        "cap angle must lie in (0, π], got {max_angle}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        match self {
            TruncationRegion::Complete => true,
            TruncationRegion::HalfSpace { axis, sign } => f64::from(*sign) * u[*axis] >= 0.0,
            TruncationRegion::Cap { axis, max_angle } => {
                if *max_angle >= std::f64::consts::PI {
                    return true;
                }
                let dot: f64 = axis.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                dot >= max_angle.cos()
            }
        }
    }

    /// Axis and opening angle of the equivalent cap.
    fn as_cap(&self, dim: usize) -> (DVector<f64>, f64) {
        match self {
            TruncationRegion::Complete => {
                let mut e = DVector::zeros(dim);
                e[0] = 1.0;
                (e, std::f64::consts::PI)
            }
            TruncationRegion::HalfSpace { axis, sign } => {
                let mut e = DVector::zeros(dim);
                e[*axis] = f64::from(*sign);
                (e, std::f64::consts::FRAC_PI_2)
            }
            TruncationRegion::Cap { axis, max_angle } => (DVector::from_column_slice(axis), *max_angle),
        }
    }
}

/// Full generative law: truth `(μ, r)`, radial law and truncation region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct DistributionSpec {
    pub truth: SphereParams,
    pub radial: RadialLaw,
    pub region: TruncationRegion,
}

#[derive(Serialize, Deserialize)]
struct SpecRepr {
    center: Vec<f64>,
    radius: f64,
    radial: RadialLaw,
    region: TruncationRegion,
}

impl TryFrom<SpecRepr> for DistributionSpec {
    type Error = Error;

    fn try_from(r: SpecRepr) -> Result<Self> {
        DistributionSpec::new(SphereParams::new(r.center, r.radius)?, r.radial, r.region)
    }
}

impl From<DistributionSpec> for SpecRepr {
    fn from(s: DistributionSpec) -> Self {
        SpecRepr {
            center: s.truth.center.iter().copied().collect(),
            radius: s.truth.radius,
            radial: s.radial,
            region: s.region,
        }
    }
}

impl DistributionSpec {
    pub fn new(truth: SphereParams, radial: RadialLaw, region: TruncationRegion) -> Result<Self> {
        radial.validate()?;
        region.validate(truth.dim())?;
        Ok(Self { truth, radial, region })
    }

    pub fn dim(&self) -> usize {
        self.truth.dim()
    }

    /// The identifiable parameter `θ = (μ, r·E[W])`.
    pub fn theta(&self) -> Result<SphereParams> {
        Ok(SphereParams::from_parts(self.truth.center.clone(), theoretical_r_star(self)?))
    }
}

const MAX_REJECTIONS: usize = 100_000_000;

/// Draws a direction uniformly on `Ω` by normalizing a standard Gaussian
/// vector and rejecting draws outside the region.
pub fn sample_unit_direction<R: Rng + ?Sized>(
    region: &TruncationRegion,
    dim: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!("dimension must be at least 2, got {dim}")));
    }
    region.validate(dim)?;
    for _ in 0..MAX_REJECTIONS {
        let mut u = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = u.norm();
        if !(norm > 1e-300) {
            continue;
        }
        u /= norm;
        if region.contains(&u) {
            return Ok(u);
        }
    }
    Err(Error::Numeric(format!(
        "direction rejection sampler exceeded {MAX_REJECTIONS} attempts"
    )))
}

/// Draws `W`. For the radial Gaussian law `W = ρ/r` where `ρ` has density
/// `∝ ρ^{d−1} exp(−(ρ − r)²/2σ²)` on `(0, ∞)`.
///
/// The radial Gaussian sampler proposes from `N(ρ*, σ²)` restricted to
/// `ρ > 0`, with `ρ*` the mode of the target, and accepts with probability
/// `(ρ/ρ*)^{d−1} exp(−(ρ − ρ*)(ρ* − r)/σ²)`. That ratio is maximal (equal to
/// one) at `ρ = ρ*`, so the sampler is exact.
pub fn sample_radial<R: Rng + ?Sized>(law: &RadialLaw, radius: f64, dim: usize, rng: &mut R) -> f64 {
    match *law {
        RadialLaw::Shell { delta } => rng.random_range(1.0 - delta..=1.0 + delta),
        RadialLaw::RadialGaussian { sigma } => {
            let k = (dim - 1) as f64;
            let mode = radial_mode(radius, sigma, dim);
            let slope = (mode - radius) / (sigma * sigma);
            loop {
                let z: f64 = rng.sample(StandardNormal);
                let rho = mode + sigma * z;
                if rho <= 0.0 {
                    continue;
                }
                let log_accept = k * (rho / mode).ln() - (rho - mode) * slope;
                let u: f64 = rng.random();
                if u.ln() < log_accept {
                    return rho / radius;
                }
            }
        }
    }
}

// Positive root of ρ² − rρ − (d−1)σ² = 0.
fn radial_mode(radius: f64, sigma: f64, dim: usize) -> f64 {
    let k = (dim - 1) as f64;
    0.5 * (radius + (radius * radius + 4.0 * k * sigma * sigma).sqrt())
}

pub fn sample_observation<R: Rng + ?Sized>(spec: &DistributionSpec, rng: &mut R) -> Result<DVector<f64>> {
    let d = spec.dim();
    let r = spec.truth.radius;
    let w = sample_radial(&spec.radial, r, d, rng);
    let u = sample_unit_direction(&spec.region, d, rng)?;
    Ok(&spec.truth.center + u * (r * w))
}

pub fn sample_cloud<R: Rng + ?Sized>(spec: &DistributionSpec, n: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
    (0..n).map(|_| sample_observation(spec, rng)).collect()
}

/// Moments of `W` needed downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialMoments {
    pub mean: f64,
    pub mean_inverse: f64,
    pub variance: f64,
}

const QUAD_REL_TOL: f64 = 1e-13;

pub fn radial_moments(law: &RadialLaw, radius: f64, dim: usize) -> Result<RadialMoments> {
    law.validate()?;
    match *law {
        RadialLaw::Shell { delta } => Ok(RadialMoments {
            mean: 1.0,
            mean_inverse: (delta.ln_1p() - (-delta).ln_1p()) / (2.0 * delta),
            variance: delta * delta / 3.0,
        }),
        RadialLaw::RadialGaussian { sigma } => {
            // Work in w = ρ/r; the kernel is w^{d−1} exp(−(w − 1)²/2s²), s = σ/r.
            // The log-kernel is shifted by its value at the mode to stay in range.
            let s = sigma / radius;
            let k = (dim - 1) as f64;
            let mode = radial_mode(radius, sigma, dim) / radius;
            let log_kernel = |w: f64| k * w.ln() - (w - 1.0).powi(2) / (2.0 * s * s);
            let peak = log_kernel(mode);
            let kernel = move |w: f64| if w <= 0.0 { 0.0 } else { (log_kernel(w) - peak).exp() };
            let lo = (mode - 40.0 * s).max(0.0);
            let hi = mode + 40.0 * s;
            let moment = |p: i32| integrate(|w| w.powi(p) * kernel(w), lo, hi, QUAD_REL_TOL, 0.0);
            let mass = moment(0)?;
            let m1 = moment(1)? / mass;
            let m2 = moment(2)? / mass;
            let minv = moment(-1)? / mass;
            Ok(RadialMoments {
                mean: m1,
                mean_inverse: minv,
                variance: (m2 - m1 * m1).max(0.0),
            })
        }
    }
}

/// `r* = r·E[W]`, the identifiable radius.
pub fn theoretical_r_star(spec: &DistributionSpec) -> Result<f64> {
    let m = radial_moments(&spec.radial, spec.truth.radius, spec.dim())?;
    Ok(spec.truth.radius * m.mean)
}

/// `β = E[W]·E[1/W]`.
pub fn theoretical_beta(spec: &DistributionSpec) -> Result<f64> {
    let m = radial_moments(&spec.radial, spec.truth.radius, spec.dim())?;
    Ok(m.mean * m.mean_inverse)
}

/// First and second moments of the uniform direction on `Ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionMoments {
    pub mean: DVector<f64>,
    pub second: DMatrix<f64>,
}

impl DirectionMoments {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.second - &self.mean * self.mean.transpose()
    }
}

/// Every supported region is a cap `{⟨u, a⟩ ≥ cos θ}`. With `t = ⟨U, a⟩`,
/// `E[U] = E[t]·a` and `E[UUᵀ] = E[t²]·aaᵀ + (1 − E[t²])/(d − 1)·(I − aaᵀ)`.
/// The polar angle has density `∝ sin^{d−2} φ` on `[0, θ]`.
pub fn direction_moments(region: &TruncationRegion, dim: usize) -> Result<DirectionMoments> {
    region.validate(dim)?;
    if matches!(region, TruncationRegion::Complete) {
        return Ok(DirectionMoments {
            mean: DVector::zeros(dim),
            second: DMatrix::identity(dim, dim) / dim as f64,
        });
    }
    let (axis, angle) = region.as_cap(dim);
    let p = (dim - 2) as i32;
    let weight = |phi: f64| phi.sin().powi(p);
    let mass = integrate(weight, 0.0, angle, QUAD_REL_TOL, 0.0)?;
    let m1 = integrate(|phi| phi.cos() * weight(phi), 0.0, angle, QUAD_REL_TOL, 1e-15)? / mass;
    let m2 = integrate(|phi| phi.cos().powi(2) * weight(phi), 0.0, angle, QUAD_REL_TOL, 0.0)? / mass;
    let aat = &axis * axis.transpose();
    let transverse = (1.0 - m2) / (dim - 1) as f64;
    let second = &aat * m2 + (DMatrix::identity(dim, dim) - &aat) * transverse;
    Ok(DirectionMoments {
        mean: axis * m1,
        second,
    })
}
