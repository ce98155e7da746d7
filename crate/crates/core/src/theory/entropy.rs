//! Entropies of the feature models, in nats.
//!
//! A pre-activation `N(0, sigma^2)` passed through ReLU is a mixture of an
//! atom at 0 (mass `q`, 1/2 by default) and a half-normal on `(0, inf)`.
//! Clipping at `c` adds a second atom at `c` carrying the upper tail. Mixed
//! entropies combine the Shannon entropy of the atoms with the differential
//! entropy of the continuous part.

use std::f64::consts::{E, FRAC_1_SQRT_2, LN_2, PI};

use super::special::{erf, erfc, half_centered_cdf, normal_sf, phi, xlogx};
use crate::error::{Error, Result};

/// Interval masses at or below this are treated as empty.
pub const MASS_EPS: f64 = 1e-15;

/// Default mass of the ReLU atom at zero.
pub const RELU_ZERO_MASS: f64 = 0.5;

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sigma must be positive and finite, got {sigma}")))
    }
}

/// `Phi(beta) - Phi(alpha)`, picking the erf/erfc form that does not cancel.
pub fn normal_interval_mass(alpha: f64, beta: f64) -> f64 {
    let (x, y) = (alpha * FRAC_1_SQRT_2, beta * FRAC_1_SQRT_2);
    if alpha >= 0.0 {
        0.5 * (erfc(x) - erfc(y))
    } else if beta <= 0.0 {
        0.5 * (erfc(-y) - erfc(-x))
    } else {
        0.5 * (erf(y) - erf(x))
    }
}

/// `x phi(x)`, zero at +-inf.
fn x_phi(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x * phi(x)
    }
}

/// Differential entropy of `N(0, sigma^2)` truncated to `[a, b]`:
/// `ln(sigma sqrt(2 pi e) Z) + (alpha phi(alpha) - beta phi(beta)) / (2 Z)`.
/// `a` may be `-inf` and `b` may be `+inf`.
pub fn trunc_normal_entropy(sigma: f64, a: f64, b: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if a.is_nan() || b.is_nan() || a >= b {
        return Err(Error::InvalidParameter(format!("truncation needs a < b, got [{a}, {b}]")));
    }
    let (alpha, beta) = (a / sigma, b / sigma);
    let z = normal_interval_mass(alpha, beta);
    if z <= MASS_EPS {
        return Err(Error::Degenerate(format!(
            "truncation interval [{a}, {b}] holds mass {z:e} at sigma = {sigma}"
        )));
    }
    Ok((sigma * (2.0 * PI * E).sqrt() * z).ln() + (x_phi(alpha) - x_phi(beta)) / (2.0 * z))
}

/// Entropy of the ReLU output with zero-mass `q`:
/// `-q ln q - (1-q) ln(1-q) + (1-q) H(half-normal)`.
pub fn rectified_entropy_q(sigma: f64, q: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidParameter(format!("zero mass q must lie in [0, 1), got {q}")));
    }
    let h = trunc_normal_entropy(sigma, 0.0, f64::INFINITY)?;
    Ok(-xlogx(q) - xlogx(1.0 - q) + (1.0 - q) * h)
}

/// `ln 2 + H(half-normal) / 2`.
pub fn rectified_entropy(sigma: f64) -> Result<f64> {
    rectified_entropy_q(sigma, RELU_ZERO_MASS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClippedEntropy {
    pub value: f64,
    /// Set when the continuous part `(0, c)` has vanishing mass and only the
    /// two atoms remain.
    pub degenerate: bool,
}

/// Entropy of `min(ReLU(x), c)`: atoms at 0 (mass 1/2) and `c` (mass
/// `1 - Phi(c / sigma)`) plus the normal truncated to `(0, c)`.
pub fn clipped_entropy(sigma: f64, c: f64) -> Result<ClippedEntropy> {
    check_sigma(sigma)?;
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("clip threshold must be positive, got {c}")));
    }
    let beta = c / sigma;
    let p0 = RELU_ZERO_MASS;
    let pc = normal_sf(beta);
    let mass = half_centered_cdf(beta);
    let atoms = -xlogx(p0) - xlogx(pc);
    if mass <= MASS_EPS {
        return Ok(ClippedEntropy { value: atoms - xlogx(mass), degenerate: true });
    }
    let h = trunc_normal_entropy(sigma, 0.0, c)?;
    Ok(ClippedEntropy { value: atoms - xlogx(mass) + mass * h, degenerate: false })
}

/// The grouped form: `q~ = p0 + pc` for "on an atom", then the atom split,
/// then the continuous part. Equal to [`clipped_entropy`] up to rounding.
pub fn clipped_entropy_grouped(sigma: f64, c: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let beta = c / sigma;
    let p0 = RELU_ZERO_MASS;
    let pc = normal_sf(beta);
    let qt = p0 + pc;
    let cont = half_centered_cdf(beta);
    let h = trunc_normal_entropy(sigma, 0.0, c)?;
    Ok(-xlogx(qt) - xlogx(cont) + qt * (-xlogx(p0 / qt) - xlogx(pc / qt)) + cont * h)
}

/// Entropy of the full normal, `ln(sigma sqrt(2 pi e))`.
pub fn normal_entropy(sigma: f64) -> f64 {
    (sigma * (2.0 * PI * E).sqrt()).ln()
}

/// `ln 2`, the two-atom limit of [`clipped_entropy`] as `c -> 0`.
pub const TWO_ATOM_LIMIT: f64 = LN_2;
