//! Calibration and accuracy metrics over probability matrices.
//!
//! Every ECE variant is computed as `sum_m (|B_m| / N) * |A_m - C_m|` where
//! `A_m = correct_m / |B_m|` and `C_m = conf_sum_m / |B_m|`, with sums taken
//! in sample order and empty bins skipped. Values are fractions in `[0, 1]`;
//! percentages are a presentation concern.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_BINS: usize = 15;

/// Probability floor applied to the true-class probability in NLL.
pub const NLL_FLOOR: f64 = 1e-300;

const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic `N x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    /// Validates entries in `[0, 1]` and row sums within `1e-9` of one.
    pub fn new(m: Matrix) -> Result<Self> {
        m.check_finite()?;
        for (i, row) in m.row_iter().enumerate() {
            if let Some(j) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidParameter(format!(
                    "probability [{i},{j}] = {} is outside [0, 1]",
                    row[j]
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "row {i} sums to {s}, not 1"
                )));
            }
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: Matrix) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// `(argmax, max)` of row `i`; ties go to the lowest class index.
    pub fn prediction(&self, i: usize) -> (usize, f64) {
        argmax(self.0.row(i))
    }

    pub fn confidences(&self) -> Vec<f64> {
        (0..self.rows()).map(|i| self.prediction(i).1).collect()
    }
}

/// First index of the maximum, with its value.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut val = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > val {
            best = j;
            val = v;
        }
    }
    (best, val)
}

/// Max-shifted softmax of each row.
pub fn softmax(logits: &Matrix) -> Result<ProbMatrix> {
    logits.check_finite()?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(ProbMatrix(out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningMode {
    EqualWidth,
    EqualMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub avg_confidence: f64,
    pub accuracy: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub mode: BinningMode,
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `bin_lo,bin_hi,count,avg_conf,accuracy,gap`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count,avg_conf,accuracy,gap\n");
        for b in &self.bins {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                b.lo, b.hi, b.count, b.avg_confidence, b.accuracy, b.gap
            );
        }
        s
    }
}

fn check_inputs(probs: &ProbMatrix, labels: &[u32]) -> Result<()> {
    if probs.rows() == 0 {
        return Err(Error::Empty("no samples"));
    }
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let k = probs.cols();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= k) {
        return Err(Error::LabelOutOfRange { index, label, k });
    }
    Ok(())
}

fn check_bins(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidParameter("bin count must be at least 1".into()));
    }
    Ok(())
}

/// Equal-width bin of a value in `[0, 1]`; the last bin is closed at 1.
#[inline]
pub fn equal_width_bin(p: f64, m: usize) -> usize {
    ((p * m as f64).floor() as usize).min(m - 1)
}

#[derive(Default, Clone, Copy)]
struct Acc {
    count: usize,
    conf_sum: f64,
    hits: f64,
}

fn finish(accs: &[Acc], n: usize, edges: impl Fn(usize) -> (f64, f64)) -> (f64, Vec<Bin>) {
    let mut ece = 0.0;
    let mut bins = Vec::with_capacity(accs.len());
    for (m, a) in accs.iter().enumerate() {
        let (lo, hi) = edges(m);
        if a.count == 0 {
            bins.push(Bin { lo, hi, count: 0, avg_confidence: 0.0, accuracy: 0.0, gap: 0.0 });
            continue;
        }
        let acc = a.hits / a.count as f64;
        let conf = a.conf_sum / a.count as f64;
        ece += (a.count as f64 / n as f64) * (acc - conf).abs();
        bins.push(Bin { lo, hi, count: a.count, avg_confidence: conf, accuracy: acc, gap: acc - conf });
    }
    (ece, bins)
}

/// Top-label ECE with `m` equal-width bins `[(j-1)/m, j/m)`.
pub fn ece_equal_width(probs: &ProbMatrix, labels: &[u32], m: usize) -> Result<(f64, ReliabilityBins)> {
    check_inputs(probs, labels)?;
    check_bins(m)?;
    let mut accs = vec![Acc::default(); m];
    for (i, &y) in labels.iter().enumerate() {
        let (pred, conf) = probs.prediction(i);
        let a = &mut accs[equal_width_bin(conf, m)];
        a.count += 1;
        a.conf_sum += conf;
        if pred == y as usize {
            a.hits += 1.0;
        }
    }
    let (ece, bins) = finish(&accs, labels.len(), |j| (j as f64 / m as f64, (j + 1) as f64 / m as f64));
    Ok((ece, ReliabilityBins { mode: BinningMode::EqualWidth, bins }))
}

/// Top-label ECE with `m` equal-mass bins.
///
/// Samples are stably sorted by confidence (ties keep index order); the
/// first `N mod m` bins take `ceil(N/m)` samples and the rest `floor(N/m)`.
pub fn ece_adaptive(probs: &ProbMatrix, labels: &[u32], m: usize) -> Result<(f64, ReliabilityBins)> {
    check_inputs(probs, labels)?;
    check_bins(m)?;
    let n = labels.len();
    if m > n {
        return Err(Error::InvalidParameter(format!(
            "{m} equal-mass bins need at least {m} samples, have {n}"
        )));
    }
    let preds: Vec<(usize, f64)> = (0..n).map(|i| probs.prediction(i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds[a].1.total_cmp(&preds[b].1));

    let (base, extra) = (n / m, n % m);
    let mut accs = Vec::with_capacity(m);
    let mut edges = Vec::with_capacity(m);
    let mut start = 0;
    for j in 0..m {
        let size = base + usize::from(j < extra);
        let mut a = Acc::default();
        for &i in &order[start..start + size] {
            let (pred, conf) = preds[i];
            a.count += 1;
            a.conf_sum += conf;
            if pred == labels[i] as usize {
                a.hits += 1.0;
            }
        }
        edges.push((preds[order[start]].1, preds[order[start + size - 1]].1));
        accs.push(a);
        start += size;
    }
    let (ece, bins) = finish(&accs, n, |j| edges[j]);
    Ok((ece, ReliabilityBins { mode: BinningMode::EqualMass, bins }))
}

/// Classwise ECE: per-class equal-width ECE of `p_ik` against `1{y_i = k}`,
/// divided by the global `N`, averaged over the `K` classes.
pub fn ece_classwise(probs: &ProbMatrix, labels: &[u32], m: usize) -> Result<f64> {
    check_inputs(probs, labels)?;
    check_bins(m)?;
    let k = probs.cols();
    if k < 2 {
        return Err(Error::InvalidParameter("classwise ECE needs K >= 2".into()));
    }
    let n = labels.len();
    let mut total = 0.0;
    for class in 0..k {
        let mut accs = vec![Acc::default(); m];
        for (i, &y) in labels.iter().enumerate() {
            let p = probs.row(i)[class];
            let a = &mut accs[equal_width_bin(p, m)];
            a.count += 1;
            a.conf_sum += p;
            if y as usize == class {
                a.hits += 1.0;
            }
        }
        total += finish(&accs, n, |_| (0.0, 0.0)).0;
    }
    Ok(total / k as f64)
}

/// Mean negative log-likelihood (natural log) and the number of samples
/// whose true-class probability was raised to [`NLL_FLOOR`].
pub fn nll_detailed(probs: &ProbMatrix, labels: &[u32]) -> Result<(f64, usize)> {
    check_inputs(probs, labels)?;
    let mut sum = 0.0;
    let mut floored = 0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.row(i)[y as usize];
        let p = if p < NLL_FLOOR {
            floored += 1;
            NLL_FLOOR
        } else {
            p
        };
        sum -= p.ln();
    }
    Ok((sum / labels.len() as f64, floored))
}

pub fn nll(probs: &ProbMatrix, labels: &[u32]) -> Result<f64> {
    nll_detailed(probs, labels).map(|r| r.0)
}

/// NLL of `softmax(logits)` computed via log-sum-exp, without forming the
/// probability matrix. Used as the fit objective.
pub fn nll_from_logits(logits: &Matrix, labels: &[u32]) -> f64 {
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        sum += lse - row[y as usize];
    }
    sum / labels.len() as f64
}

pub fn accuracy(probs: &ProbMatrix, labels: &[u32]) -> Result<f64> {
    check_inputs(probs, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| probs.prediction(*i).0 == y as usize)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn brier(probs: &ProbMatrix, labels: &[u32]) -> Result<f64> {
    check_inputs(probs, labels)?;
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for (j, &p) in probs.row(i).iter().enumerate() {
            let t = if j == y as usize { 1.0 } else { 0.0 };
            sum += (p - t) * (p - t);
        }
    }
    Ok(sum / labels.len() as f64)
}

/// Shannon entropy (nats) of one distribution, `0 ln 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub fn mean_entropy(probs: &ProbMatrix) -> Result<f64> {
    if probs.rows() == 0 {
        return Err(Error::Empty("no samples"));
    }
    let total: f64 = (0..probs.rows()).map(|i| entropy(probs.row(i))).sum();
    Ok(total / probs.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Always `"fraction"`: every rate below is in `[0, 1]`.
    pub scale: String,
    pub n: usize,
    pub n_bins: usize,
    pub ece: f64,
    pub adaptive_ece: f64,
    pub classwise_ece: f64,
    pub nll: f64,
    pub nll_floored: usize,
    pub brier: f64,
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub bins: ReliabilityBins,
    pub adaptive_bins: ReliabilityBins,
}

impl MetricReport {
    /// All metrics for one probability matrix. Adaptive ECE uses
    /// `min(m, N)` bins so tiny evaluation sets still report.
    pub fn evaluate(probs: &ProbMatrix, labels: &[u32], m: usize) -> Result<Self> {
        let (ece, bins) = ece_equal_width(probs, labels, m)?;
        let (adaptive_ece, adaptive_bins) = ece_adaptive(probs, labels, m.min(labels.len()))?;
        let classwise_ece = if probs.cols() >= 2 {
            ece_classwise(probs, labels, m)?
        } else {
            0.0
        };
        let (nll, nll_floored) = nll_detailed(probs, labels)?;
        Ok(Self {
            scale: "fraction".into(),
            n: labels.len(),
            n_bins: m,
            ece,
            adaptive_ece,
            classwise_ece,
            nll,
            nll_floored,
            brier: brier(probs, labels)?,
            accuracy: accuracy(probs, labels)?,
            mean_entropy: mean_entropy(probs)?,
            bins,
            adaptive_bins,
        })
    }
}
