//! Entropy change caused by clipping, and its derivative in `sigma`.
//!
//! Two feature models:
//!
//! * `RectifiedMixture`: ReLU of `N(0, sigma^2)`, i.e. an atom at 0 plus a
//!   half-normal. `delta_h = clipped_entropy - rectified_entropy`.
//! * `HalfNormal`: a pure half-normal density `psi`, where clipping turns the
//!   tail `P = erfc(a)`, `a = c / (sigma sqrt 2)`, into an atom at `c`:
//!   `delta_h = -P ln P + int_c^inf psi ln psi`.
//!
//! The `*_printed` functions reproduce the published closed forms, including
//! their algebra slips, for side-by-side comparison with the values here.

use std::f64::consts::{E, PI};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::entropy::{self, check_sigma};
use super::special::{big_phi, erf, erfc, half_centered_cdf, normal_sf, phi, xlogx};
use crate::error::{Error, Result};

/// Smallest `sigma` accepted by the derivative routines.
pub const MIN_SIGMA: f64 = 1e-6;

/// Relative step of the central differences.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    HalfNormal,
    RectifiedMixture,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::HalfNormal => "half_normal",
            Model::RectifiedMixture => "rectified_mixture",
        }
    }
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half_normal" | "halfnormal" => Ok(Model::HalfNormal),
            "rectified_mixture" | "rectified" => Ok(Model::RectifiedMixture),
            other => Err(Error::InvalidParameter(format!(
                "unknown model {other:?} (expected half_normal or rectified_mixture)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMethod {
    ClosedForm,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub sigma: f64,
    pub c: f64,
    pub model: Model,
}

impl TheoryParams {
    pub fn new(sigma: f64, c: f64, model: Model) -> Result<Self> {
        let p = Self { sigma, c, model };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        if self.c > 0.0 && self.c.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("c must be positive and finite, got {}", self.c)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryPoint {
    pub params: TheoryParams,
    pub h_original: f64,
    pub h_clipped: f64,
    pub delta_h: f64,
    pub d_delta_h_d_sigma: f64,
}

/// `ln(sigma sqrt(2 pi))`
fn log_norm_scale(sigma: f64) -> f64 {
    (sigma * (2.0 * PI).sqrt()).ln()
}

/// Rectified-mixture `delta_h` with the `O(1)` entropy terms cancelled
/// analytically: `-p ln p - p ln(sigma sqrt(2 pi)) - beta phi(beta)/2 - p/2`
/// where `p = 1 - Phi(beta)`, `beta = c / sigma`. Stays accurate when the
/// clipped tail is tiny.
fn rectified_delta_h(sigma: f64, c: f64) -> f64 {
    let beta = c / sigma;
    let p = normal_sf(beta);
    -xlogx(p) - p * log_norm_scale(sigma) - 0.5 * beta * phi(beta) - 0.5 * p
}

/// `clipped_entropy - rectified_entropy` evaluated term by term.
pub fn rectified_delta_h_direct(sigma: f64, c: f64) -> Result<f64> {
    Ok(entropy::clipped_entropy(sigma, c)?.value - entropy::rectified_entropy(sigma)?)
}

/// Half-normal `delta_h`: `-P ln P + P ln(2a / (c sqrt pi)) - a e^{-a^2} / sqrt(pi) - P/2`.
fn half_normal_delta_h(sigma: f64, c: f64) -> f64 {
    let a = c / (sigma * 2f64.sqrt());
    let p = erfc(a);
    -xlogx(p) + p * (2.0 * a / (c * PI.sqrt())).ln() - a * (-a * a).exp() / PI.sqrt() - 0.5 * p
}

pub fn delta_h(params: &TheoryParams) -> Result<f64> {
    params.validate()?;
    Ok(match params.model {
        Model::RectifiedMixture => rectified_delta_h(params.sigma, params.c),
        Model::HalfNormal => half_normal_delta_h(params.sigma, params.c),
    })
}

/// The half-normal closed form as printed in the draft derivation, whose
/// last two terms are `-(1/2) a e^{-a^2} - (sqrt(pi)/4) P`.
pub fn half_normal_delta_h_printed(sigma: f64, c: f64) -> f64 {
    let a = c / (sigma * 2f64.sqrt());
    let p = 1.0 - erf(a);
    -xlogx(p) + p * (2.0 * a / (c * PI.sqrt())).ln() - 0.5 * a * (-a * a).exp() - PI.sqrt() / 4.0 * p
}

/// The rectified-mixture closed form as printed, whose original-feature
/// entropy enters as `-(1/2) ln sqrt(pi e sigma)`.
pub fn rectified_delta_h_printed(sigma: f64, c: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let beta = c / sigma;
    let m = half_centered_cdf(beta);
    let hc = if m > entropy::MASS_EPS { m * entropy::trunc_normal_entropy(sigma, 0.0, c)? } else { 0.0 };
    Ok(-xlogx(m) + 0.5 * 0.5f64.ln() - xlogx(normal_sf(beta)) + hc + 0.5 * (PI * E * sigma).sqrt().ln())
}

/// Half-normal `d delta_h / d sigma`, differentiated from [`delta_h`]:
/// `-(a/sigma) [g (ln P + 1 - ln(2a/(c sqrt pi))) + P/a + a^2 g]`,
/// `g = 2 e^{-a^2} / sqrt(pi)`.
fn half_normal_derivative(sigma: f64, c: f64) -> f64 {
    let a = c / (sigma * 2f64.sqrt());
    let p = erfc(a);
    if p == 0.0 {
        return 0.0;
    }
    let g = 2.0 / PI.sqrt() * (-a * a).exp();
    let dda = g * (p.ln() + 1.0 - (2.0 * a / (c * PI.sqrt())).ln()) + p / a + a * a * g;
    -a / sigma * dda
}

/// The draft's printed half-normal derivative. It differentiates
/// [`half_normal_delta_h_printed`], so its last term is `a^3 e^{-a^2} / sigma`.
pub fn half_normal_derivative_printed(sigma: f64, c: f64) -> f64 {
    let a = c / (sigma * 2f64.sqrt());
    let p = 1.0 - erf(a);
    if p == 0.0 {
        return 0.0;
    }
    let e = (-a * a).exp();
    -2.0 * a / (PI.sqrt() * sigma) * e * (p.ln() + 1.0 - (2.0 * a / (c * PI.sqrt())).ln())
        - p / sigma
        - a.powi(3) / sigma * e
}

/// The appendix's final rectified-mixture derivative, transcribed as printed:
///
/// `ln((P - 1/2) / (1 - P)) phi c/sigma^2 + 5/(4 sigma) - c phi / (2 sigma^2 P)
///  - phi / (2 P^2) (c (c^2 - sigma^2) / sigma^4 P + c^2 / sigma^3 phi)`
///
/// with `P = Phi(c/sigma)` and `phi = phi(c/sigma)`.
pub fn rectified_derivative_printed(sigma: f64, c: f64) -> f64 {
    let beta = c / sigma;
    let f = phi(beta);
    let big_p = big_phi(beta);
    let mut d = 5.0 / (4.0 * sigma);
    if f == 0.0 {
        return d;
    }
    let s2 = sigma * sigma;
    d += (half_centered_cdf(beta) / normal_sf(beta)).ln() * f * c / s2;
    d -= c * f / (2.0 * s2 * big_p);
    d -= f / (2.0 * big_p * big_p) * (c * (c * c - s2) / (s2 * s2) * big_p + c * c / (s2 * sigma) * f);
    d
}

/// Exact derivative of the rectified-mixture [`delta_h`]:
/// `(beta phi / sigma) (-ln(p sigma sqrt(2 pi)) - 1 - beta^2 / 2) - p / sigma`.
pub fn rectified_derivative_exact(sigma: f64, c: f64) -> f64 {
    let beta = c / sigma;
    let p = normal_sf(beta);
    let f = phi(beta);
    if p == 0.0 {
        return 0.0;
    }
    beta * f / sigma * (-(p.ln() + log_norm_scale(sigma)) - 1.0 - 0.5 * beta * beta) - p / sigma
}

/// Richardson-extrapolated central difference of `f` at `x` with step `h`.
pub fn richardson_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let central = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let (d1, d2) = (central(h), central(0.5 * h));
    (4.0 * d2 - d1) / 3.0
}

/// `d delta_h / d sigma`. `ClosedForm` uses the published expression for the
/// rectified mixture and the corrected expression for the half-normal model;
/// `FiniteDifference` differentiates [`delta_h`] numerically.
pub fn d_delta_h_d_sigma(params: &TheoryParams, method: DerivativeMethod) -> Result<f64> {
    params.validate()?;
    let TheoryParams { sigma, c, model } = *params;
    if sigma < MIN_SIGMA {
        return Err(Error::InvalidParameter(format!(
            "sigma = {sigma} is below {MIN_SIGMA}; derivative not evaluated"
        )));
    }
    Ok(match (method, model) {
        (DerivativeMethod::ClosedForm, Model::RectifiedMixture) => rectified_derivative_printed(sigma, c),
        (DerivativeMethod::ClosedForm, Model::HalfNormal) => half_normal_derivative(sigma, c),
        (DerivativeMethod::FiniteDifference, Model::RectifiedMixture) => {
            richardson_derivative(|s| rectified_delta_h(s, c), sigma, FD_STEP * sigma)
        }
        (DerivativeMethod::FiniteDifference, Model::HalfNormal) => {
            richardson_derivative(|s| half_normal_delta_h(s, c), sigma, FD_STEP * sigma)
        }
    })
}

/// Entropies, `delta_h` and its finite-difference derivative at `params`.
pub fn theory_point(params: &TheoryParams) -> Result<TheoryPoint> {
    let dh = delta_h(params)?;
    let TheoryParams { sigma, c, model } = *params;
    let (h_original, h_clipped) = match model {
        Model::RectifiedMixture => {
            (entropy::rectified_entropy(sigma)?, entropy::clipped_entropy(sigma, c)?.value)
        }
        Model::HalfNormal => {
            let a = c / (sigma * 2f64.sqrt());
            let log_norm = (2.0 * a / (c * PI.sqrt())).ln();
            let p = erfc(a);
            let h = 0.5 - log_norm;
            // -P ln P - int_0^c psi ln psi
            let clipped = -xlogx(p) - log_norm * (1.0 - p) + 0.5 * erf(a) - a * (-a * a).exp() / PI.sqrt();
            (h, clipped)
        }
    };
    let gap = (h_clipped - h_original - dh).abs();
    if gap > 1e-12 {
        return Err(Error::Degenerate(format!(
            "{model} at sigma = {sigma}, c = {c}: delta_h differs from the entropy difference by {gap:e}"
        )));
    }
    Ok(TheoryPoint {
        params: *params,
        h_original,
        h_clipped,
        delta_h: dh,
        d_delta_h_d_sigma: d_delta_h_d_sigma(params, DerivativeMethod::FiniteDifference)?,
    })
}

/// First `sigma` in `(lo, hi]` where the finite-difference derivative turns
/// from positive to negative, located on an `n`-point grid and refined by
/// bisection. Exact zeros (where `delta_h` underflows) are skipped.
pub fn derivative_sign_change(model: Model, c: f64, lo: f64, hi: f64, n: usize) -> Result<Option<f64>> {
    let deriv = |s: f64| -> Result<f64> {
        d_delta_h_d_sigma(&TheoryParams::new(s, c, model)?, DerivativeMethod::FiniteDifference)
    };
    let mut last_positive = None;
    for i in 1..=n {
        let s = lo + (hi - lo) * i as f64 / n as f64;
        let d = deriv(s)?;
        if d > 0.0 {
            last_positive = Some(s);
        } else if d < 0.0 {
            if let Some(mut a) = last_positive {
                let mut b = s;
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if deriv(m)? > 0.0 {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                return Ok(Some(0.5 * (a + b)));
            }
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(sigma: f64, c: f64, model: Model) -> TheoryParams {
        TheoryParams::new(sigma, c, model).unwrap()
    }

    #[test]
    fn rejects_bad_params() {
        assert!(TheoryParams::new(0.0, 1.0, Model::HalfNormal).is_err());
        assert!(TheoryParams::new(1.0, -1.0, Model::HalfNormal).is_err());
        let tiny = TheoryParams { sigma: 1e-7, c: 1.0, model: Model::HalfNormal };
        assert!(d_delta_h_d_sigma(&tiny, DerivativeMethod::FiniteDifference).is_err());
    }

    #[test]
    fn vanishes_without_clipping() {
        for model in [Model::HalfNormal, Model::RectifiedMixture] {
            for sigma in [0.1, 1.0, 2.5] {
                assert!(delta_h(&p(sigma, 12.0 * sigma, model)).unwrap().abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn stable_form_matches_direct_difference() {
        for &(s, c) in &[(0.05, 0.1), (1.0, 1.0), (3.0, 0.23), (0.3, 5.0), (2.0, 1e-4)] {
            let stable = rectified_delta_h(s, c);
            let direct = rectified_delta_h_direct(s, c).unwrap();
            assert!((stable - direct).abs() < 1e-12, "{s} {c}: {stable} vs {direct}");
        }
    }

    #[test]
    fn theory_point_invariant() {
        for model in [Model::HalfNormal, Model::RectifiedMixture] {
            let pt = theory_point(&p(0.7, 0.23, model)).unwrap();
            assert!((pt.h_clipped - pt.h_original - pt.delta_h).abs() <= 1e-12);
        }
    }

    #[test]
    fn exact_derivatives_match_finite_differences() {
        for &s in &[0.1, 0.5, 1.0, 3.0] {
            for &c in &[0.1, 0.23, 1.0] {
                let fd = d_delta_h_d_sigma(&p(s, c, Model::RectifiedMixture), DerivativeMethod::FiniteDifference)
                    .unwrap();
                let exact = rectified_derivative_exact(s, c);
                assert!((fd - exact).abs() <= 1e-7 * exact.abs().max(1e-5), "{s} {c}: {fd} vs {exact}");
            }
        }
    }

    #[test]
    fn printed_half_normal_derivative_matches_printed_value() {
        for &s in &[0.2, 1.0, 2.0] {
            for &c in &[0.1, 0.5, 1.0] {
                let fd = richardson_derivative(|x| half_normal_delta_h_printed(x, c), s, FD_STEP * s);
                let printed = half_normal_derivative_printed(s, c);
                assert!((fd - printed).abs() <= 1e-6 * printed.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn printed_rectified_derivative_is_positive() {
        for i in 1..=100 {
            let s = 3.0 * i as f64 / 100.0;
            for c in [0.1, 0.23, 0.5, 1.0] {
                assert!(rectified_derivative_printed(s, c) > 0.0);
            }
        }
    }

    #[test]
    fn half_normal_methods_agree_in_sign() {
        for &s in &[0.1, 0.4, 1.0, 3.0] {
            for &c in &[0.1, 0.5, 1.0] {
                let params = p(s, c, Model::HalfNormal);
                let cf = d_delta_h_d_sigma(&params, DerivativeMethod::ClosedForm).unwrap();
                let fd = d_delta_h_d_sigma(&params, DerivativeMethod::FiniteDifference).unwrap();
                assert_eq!(cf > 0.0, fd > 0.0);
            }
        }
    }

    #[test]
    fn rectified_sign_change_is_located() {
        let star = derivative_sign_change(Model::RectifiedMixture, 0.23, 0.0, 3.0, 300).unwrap().unwrap();
        assert!(rectified_derivative_exact(star, 0.23).abs() < 1e-8);
        assert_eq!(derivative_sign_change(Model::HalfNormal, 0.5, 0.0, 0.2, 20).unwrap(), None);
    }

    #[test]
    fn model_names_round_trip() {
        for m in [Model::HalfNormal, Model::RectifiedMixture] {
            assert_eq!(m.name().parse::<Model>().unwrap(), m);
        }
    }
}
