//! Loop-based reference implementations shared by the integration tests.
//! They are written independently of the library code paths they check.

#![allow(dead_code, clippy::needless_range_loop)]

use std::f64::consts::PI;

use featclip::matrix::Matrix;
use featclip::metrics::ProbMatrix;
use featclip::rng::SplitMix64;
use featclip::theory::quadrature::adaptive_simpson;

pub fn unit(rng: &mut SplitMix64) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Random probability rows. Some rows are snapped to a coarse grid so
/// confidences land on bin edges and ties appear.
pub fn random_probs(rng: &mut SplitMix64, n: usize, k: usize) -> (ProbMatrix, Vec<u32>) {
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mode = rng.below(4);
        let mut w: Vec<f64> = (0..k)
            .map(|_| match mode {
                0 => rng.below(6) as f64,
                1 => (-unit(rng).max(1e-300).ln()).powi(3),
                _ => -unit(rng).max(1e-300).ln(),
            })
            .collect();
        let s: f64 = w.iter().sum();
        if s == 0.0 {
            w = vec![1.0 / k as f64; k];
        } else {
            for v in &mut w {
                *v /= s;
            }
        }
        rows.push(w);
    }
    let labels = (0..n).map(|_| rng.below(k as u64) as u32).collect();
    (ProbMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap(), labels)
}

fn top(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    (best, row[best])
}

fn bin_of(p: f64, m: usize) -> usize {
    let j = (p * m as f64).floor() as usize;
    if j >= m {
        m - 1
    } else {
        j
    }
}

/// Per bin, scan every sample; accumulate in index order.
pub fn oracle_ece(probs: &ProbMatrix, labels: &[u32], m: usize) -> f64 {
    let n = labels.len();
    let mut ece = 0.0;
    for j in 0..m {
        let (mut count, mut conf_sum, mut hits) = (0usize, 0.0, 0.0);
        for i in 0..n {
            let (pred, conf) = top(probs.row(i));
            if bin_of(conf, m) == j {
                count += 1;
                conf_sum += conf;
                if pred == labels[i] as usize {
                    hits += 1.0;
                }
            }
        }
        if count > 0 {
            let acc = hits / count as f64;
            let conf = conf_sum / count as f64;
            ece += (count as f64 / n as f64) * (acc - conf).abs();
        }
    }
    ece
}

/// Sorted by (confidence, index); the first `n mod m` bins get one extra.
pub fn oracle_adaptive_ece(probs: &ProbMatrix, labels: &[u32], m: usize) -> f64 {
    let n = labels.len();
    let mut items: Vec<(f64, usize)> = (0..n).map(|i| (top(probs.row(i)).1, i)).collect();
    items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut ece = 0.0;
    let mut start = 0;
    for j in 0..m {
        let size = n / m + if j < n % m { 1 } else { 0 };
        let chunk = &items[start..start + size];
        start += size;
        let conf = chunk.iter().map(|c| c.0).sum::<f64>() / size as f64;
        let acc = chunk
            .iter()
            .filter(|c| top(probs.row(c.1)).0 == labels[c.1] as usize)
            .count() as f64
            / size as f64;
        ece += size as f64 / n as f64 * (acc - conf).abs();
    }
    ece
}

/// Mean over classes of the per-class binned |frequency - probability| gap.
pub fn oracle_classwise_ece(probs: &ProbMatrix, labels: &[u32], m: usize) -> f64 {
    let (n, k) = (labels.len(), probs.cols());
    let mut total = 0.0;
    for class in 0..k {
        let mut per_class = 0.0;
        for j in 0..m {
            let (mut count, mut p_sum, mut hits) = (0usize, 0.0, 0.0);
            for i in 0..n {
                let p = probs.row(i)[class];
                if bin_of(p, m) == j {
                    count += 1;
                    p_sum += p;
                    if labels[i] as usize == class {
                        hits += 1.0;
                    }
                }
            }
            if count > 0 {
                let acc = hits / count as f64;
                let conf = p_sum / count as f64;
                per_class += (count as f64 / n as f64) * (acc - conf).abs();
            }
        }
        total += per_class;
    }
    total / k as f64
}

pub const QUAD_TOL: f64 = 1e-10;

fn gauss(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// `-int f ln f` for `N(0, sigma^2)` restricted to `[a, b]` and renormalised,
/// with the normaliser also obtained by quadrature. `b = inf` is cut at
/// `a + 40 sigma`.
pub fn oracle_trunc_entropy(sigma: f64, a: f64, b: f64) -> f64 {
    let hi = if b.is_finite() { b } else { a.max(0.0) + 40.0 * sigma };
    let z = adaptive_simpson(|x| gauss(x, sigma), a, hi, 1e-13).unwrap().value;
    adaptive_simpson(
        |x| {
            let f = gauss(x, sigma) / z;
            if f > 0.0 {
                -f * f.ln()
            } else {
                0.0
            }
        },
        a,
        hi,
        QUAD_TOL,
    )
    .unwrap()
    .value
}

/// `-P ln P + int_c^inf psi ln psi` for the half-normal density `psi`.
pub fn oracle_half_normal_delta(sigma: f64, c: f64) -> f64 {
    let psi = |x: f64| 2.0 * gauss(x, sigma);
    let hi = c + 40.0 * sigma;
    let p = adaptive_simpson(psi, c, hi, 1e-13).unwrap().value;
    let tail = adaptive_simpson(
        |x| {
            let f = psi(x);
            if f > 0.0 {
                f * f.ln()
            } else {
                0.0
            }
        },
        c,
        hi,
        QUAD_TOL,
    )
    .unwrap()
    .value;
    let plogp = if p > 0.0 { p * p.ln() } else { 0.0 };
    -plogp + tail
}

/// Brute-force argmin of `f` over `n` evenly spaced points on `[lo, hi]`.
pub fn grid_argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let mut best = (lo, f(lo));
    for i in 1..n {
        let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let v = f(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}

/// NLL of softmax(z / t), computed row by row from probabilities.
pub fn oracle_nll_at(z: &Matrix, labels: &[u32], t: f64) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| ((v - mx) / t).exp()).sum();
        total -= (((row[y as usize] - mx) / t).exp() / denom).ln();
    }
    total / labels.len() as f64
}
