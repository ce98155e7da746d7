//! One-dimensional minimisation: coarse scans and golden-section search.

/// `1 / phi`, the golden-section contraction factor.
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// `n` points spaced evenly in log-space over `[lo, hi]`, endpoints included.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let step = (b - a) / (n - 1) as f64;
            (0..n)
                .map(|i| match i {
                    0 => lo,
                    _ if i == n - 1 => hi,
                    _ => (a + step * i as f64).exp(),
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
}

/// Golden-section search for a minimum of `f` on `[lo, hi]`, stopping when
/// the bracket is narrower than `tol`. Returns the best point evaluated.
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Minimum
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut evaluations = 2;
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
        evaluations += 1;
    }
    if f1 <= f2 {
        Minimum { x: x1, fx: f1, evaluations }
    } else {
        Minimum { x: x2, fx: f2, evaluations }
    }
}

/// Scan `grid` (ascending), then golden-section refine between the
/// neighbours of the best grid point. Grid ties keep the earliest point.
/// Returns the refined point only if it beats the best grid value.
pub fn scan_then_golden<F>(mut f: F, grid: &[f64], tol: f64) -> (Minimum, Vec<(f64, f64)>)
where
    F: FnMut(f64) -> f64,
{
    assert!(!grid.is_empty(), "empty search grid");
    let trace: Vec<(f64, f64)> = grid.iter().map(|&x| (x, f(x))).collect();
    let best = trace
        .iter()
        .enumerate()
        .fold(0, |b, (i, t)| if t.1 < trace[b].1 { i } else { b });
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let mut min = Minimum {
        x: trace[best].0,
        fx: trace[best].1,
        evaluations: grid.len(),
    };
    if hi > lo {
        let refined = golden_section(&mut f, lo, hi, tol);
        min.evaluations += refined.evaluations;
        if refined.fx < min.fx {
            min.x = refined.x;
            min.fx = refined.fx;
        }
    }
    (min, trace)
}
