//! Adaptive Simpson quadrature, used as the independent oracle for the
//! closed-form entropies.

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_SUBDIVISIONS: usize = 1_000_000;

/// Panels the interval is cut into before adapting, so narrow features
/// cannot hide between the first three sample points.
const INITIAL_PANELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error_estimate: f64,
    pub subdivisions: usize,
}

struct Panel {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Integrates `f` over finite `[a, b]` to absolute tolerance `tol`.
///
/// Each panel receives a share of `tol` proportional to its width and is
/// accepted once the two-half estimate agrees with the whole-panel one to
/// `15 * share`; the accepted value carries the Richardson correction.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> Result<Quadrature>
where
    F: Fn(f64) -> f64,
{
    if !(a.is_finite() && b.is_finite()) || b < a {
        return Err(Error::InvalidParameter(format!("bad quadrature interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(Quadrature { value: 0.0, error_estimate: 0.0, subdivisions: 0 });
    }
    let width = b - a;
    let mut stack = Vec::with_capacity(64);
    for i in 0..INITIAL_PANELS {
        let lo = a + width * i as f64 / INITIAL_PANELS as f64;
        let hi = if i + 1 == INITIAL_PANELS { b } else { a + width * (i + 1) as f64 / INITIAL_PANELS as f64 };
        let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
        stack.push(Panel { a: lo, b: hi, fa, fm, fb, whole: simpson(lo, hi, fa, fm, fb) });
    }

    let mut value = 0.0;
    let mut error_estimate = 0.0;
    let mut subdivisions = 0;
    while let Some(p) = stack.pop() {
        let m = 0.5 * (p.a + p.b);
        let flm = f(0.5 * (p.a + m));
        let frm = f(0.5 * (m + p.b));
        let left = simpson(p.a, m, p.fa, flm, p.fm);
        let right = simpson(m, p.b, p.fm, frm, p.fb);
        let diff = left + right - p.whole;
        let share = tol * (p.b - p.a) / width;
        if !diff.is_finite() {
            return Err(Error::Degenerate(format!("non-finite integrand near x = {m}")));
        }
        if diff.abs() <= 15.0 * share || (p.b - p.a) <= 1e-13 * width {
            value += left + right + diff / 15.0;
            error_estimate += diff.abs() / 15.0;
            continue;
        }
        subdivisions += 1;
        if subdivisions > MAX_SUBDIVISIONS {
            return Err(Error::Degenerate(format!(
                "quadrature exceeded {MAX_SUBDIVISIONS} subdivisions on [{a}, {b}]"
            )));
        }
        stack.push(Panel { a: p.a, b: m, fa: p.fa, fm: flm, fb: p.fm, whole: left });
        stack.push(Panel { a: m, b: p.b, fa: p.fm, fm: frm, fb: p.fb, whole: right });
    }
    Ok(Quadrature { value, error_estimate, subdivisions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let q = adaptive_simpson(|x| x * x * x - 2.0 * x, 0.0, 2.0, 1e-12).unwrap();
        assert!((q.value - 0.0).abs() < 1e-13);
    }

    #[test]
    fn gaussian_mass() {
        let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let q = adaptive_simpson(f, -12.0, 12.0, 1e-12).unwrap();
        assert!((q.value - 1.0).abs() < 1e-11);
    }

    #[test]
    fn peaked_integrand() {
        // int_0^1 1/sqrt(x + 1e-6) dx
        let q = adaptive_simpson(|x| 1.0 / (x + 1e-6).sqrt(), 0.0, 1.0, 1e-10).unwrap();
        let exact = 2.0 * ((1.0 + 1e-6f64).sqrt() - 1e-3);
        assert!((q.value - exact).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_interval() {
        assert!(adaptive_simpson(|x| x, 1.0, 0.0, 1e-10).is_err());
        assert!(adaptive_simpson(|x| x, 0.0, f64::INFINITY, 1e-10).is_err());
    }
}
