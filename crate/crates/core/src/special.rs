//! Special functions used by the inference layer: the regularized incomplete
//! gamma function, χ² quantiles, the standard normal CDF and the Kolmogorov
//! distribution.

use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

/// Regularized lower incomplete gamma function `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || x < 0.0 || x.is_nan() {
        return Err(Error::InvalidParameter(format!("gamma_p({a}, {x})")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        Ok(1.0 - gamma_continued_fraction(a, x)?)
    }
}

fn gamma_series(a: f64, x: f64) -> Result<f64> {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            return Ok(sum * (-x + a * x.ln() - ln_gamma(a)).exp());
        }
    }
    Err(Error::Numeric(format!("incomplete gamma series failed at ({a}, {x})")))
}

// Modified Lentz evaluation of the continued fraction for Q(a, x).
fn gamma_continued_fraction(a: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            return Ok((-x + a * x.ln() - ln_gamma(a)).exp() * h);
        }
    }
    Err(Error::Numeric(format!(
        "incomplete gamma continued fraction failed at ({a}, {x})"
    )))
}

pub fn chi2_cdf(x: f64, dof: f64) -> Result<f64> {
    if x <= 0.0 {
        return Ok(0.0);
    }
    gamma_p(0.5 * dof, 0.5 * x)
}

/// Quantile of the χ² law with `dof` degrees of freedom, by bisection on the
/// CDF. The bracket is shrunk until its relative width is below 1e-13.
pub fn chi2_quantile(p: f64, dof: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("probability {p} not in (0, 1)")));
    }
    if !(dof > 0.0) {
        return Err(Error::InvalidParameter(format!("degrees of freedom {dof}")));
    }
    let mut lo = 0.0;
    let mut hi = dof.max(1.0);
    while chi2_cdf(hi, dof)? < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, dof)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Survival function of the Kolmogorov distribution, `P(K > λ)`.
///
/// Uses the alternating series `2 Σ (−1)^{k−1} exp(−2k²λ²)` for λ ≥ 1 and the
/// theta-function form of the CDF below, where the alternating series
/// converges slowly.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut sum = 0.0;
        for k in 1..=64 {
            let m = (2 * k - 1) as f64;
            let term = (-m * m * pi2 / (8.0 * lambda * lambda)).exp();
            sum += term;
            if k >= 10 && term < 1e-18 {
                break;
            }
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * sum;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for k in 1..=64 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sum += sign * term;
            sign = -sign;
            if k >= 10 && term < 1e-18 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}
