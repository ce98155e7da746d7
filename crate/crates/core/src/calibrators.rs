//! Post-hoc calibrators: feature and logit clipping, temperature scaling and
//! its ensemble / classwise variants, ordered pipelines, and clip sweeps.
//!
//! Every fitter minimises validation NLL. Clipping is a symmetric clamp
//! `clamp(x, -c, c)`, which for post-ReLU (non-negative) features is simply
//! `min(x, c)`.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{compute_logits, Dataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{self, softmax_in_place, ProbMatrix, NLL_FLOOR};
use crate::optimize::{golden_section, log_space, scan_then_golden};

/// Temperature search range and coarse grid size.
pub const T_RANGE: (f64, f64) = (0.05, 20.0);
pub const T_GRID_POINTS: usize = 50;
pub const T_TOL: f64 = 1e-4;

/// Quantile levels (spanning 0.5 ..= 1.0) used as clip-threshold candidates.
pub const CLIP_QUANTILE_LEVELS: usize = 256;

/// Minimum NLL gain needed to move away from a tie-break default.
const TIE_EPS: f64 = 1e-12;

const ETS_COARSE: u32 = 10; // 0.02 in lattice units of 0.002
const ETS_LATTICE: u32 = 500;

/// One pipeline stage. Serialised as `{"kind": "...", ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    FeatureClip {
        c: f64,
    },
    LogitClip {
        c: f64,
    },
    Temperature {
        #[serde(rename = "T")]
        t: f64,
    },
    /// `w1 softmax(z/T) + w2 softmax(z) + w3 / K`
    Ets {
        #[serde(rename = "T")]
        t: f64,
        w: [f64; 3],
    },
    /// Column `k` of the logits is divided by `T[k]`.
    ClasswiseTemperature {
        #[serde(rename = "T")]
        t: Vec<f64>,
    },
    Identity,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibratorSpec {
    pub stages: Vec<Stage>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && !v.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidCalibrator(format!("{name} must be positive, got {v}")))
    }
}

impl CalibratorSpec {
    pub fn new(stages: Vec<Stage>) -> Self {
        Self { stages }
    }

    pub fn identity() -> Self {
        Self::new(vec![Stage::Identity])
    }

    pub fn feature_clip(&self) -> Option<f64> {
        self.stages.iter().find_map(|s| match s {
            Stage::FeatureClip { c } => Some(*c),
            _ => None,
        })
    }

    /// Checks parameter ranges and stage order: at most one feature clip,
    /// ahead of every logit/probability stage; nothing after ETS.
    pub fn validate(&self) -> Result<()> {
        let mut seen_logit_stage = false;
        let mut seen_clip = false;
        let mut seen_ets = false;
        for stage in &self.stages {
            if seen_ets && !matches!(stage, Stage::Identity) {
                return Err(Error::InvalidCalibrator(
                    "ETS produces probabilities and must be the last stage".into(),
                ));
            }
            match stage {
                Stage::FeatureClip { c } => {
                    positive("feature clip c", *c)?;
                    if seen_clip {
                        return Err(Error::InvalidCalibrator("more than one feature_clip stage".into()));
                    }
                    if seen_logit_stage {
                        return Err(Error::InvalidCalibrator(
                            "feature_clip must precede logit and probability stages".into(),
                        ));
                    }
                    seen_clip = true;
                }
                Stage::LogitClip { c } => {
                    positive("logit clip c", *c)?;
                    seen_logit_stage = true;
                }
                Stage::Temperature { t } => {
                    positive("T", *t)?;
                    seen_logit_stage = true;
                }
                Stage::ClasswiseTemperature { t } => {
                    if t.is_empty() {
                        return Err(Error::InvalidCalibrator("empty classwise temperature vector".into()));
                    }
                    for &v in t {
                        positive("classwise T", v)?;
                    }
                    seen_logit_stage = true;
                }
                Stage::Ets { t, w } => {
                    positive("ETS T", *t)?;
                    if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidCalibrator(format!(
                            "ETS weights {w:?} are not on the simplex"
                        )));
                    }
                    seen_logit_stage = true;
                    seen_ets = true;
                }
                Stage::Identity => {}
            }
        }
        Ok(())
    }
}

fn clamp_matrix(x: &Matrix, c: f64) -> Result<Matrix> {
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("clip threshold must be positive, got {c}")));
    }
    Ok(x.map(|v| v.clamp(-c, c)))
}

/// `clamp(x, -c, c)` elementwise. Entries already inside are untouched.
pub fn clip_features(x: &Matrix, c: f64) -> Result<Matrix> {
    clamp_matrix(x, c)
}

/// Same clamp applied to logits.
pub fn clip_logits(z: &Matrix, c: f64) -> Result<Matrix> {
    clamp_matrix(z, c)
}

fn scale_columns(z: &mut Matrix, t: &[f64]) -> Result<()> {
    if t.len() != z.cols() {
        return Err(Error::InvalidCalibrator(format!(
            "{} classwise temperatures for {} classes",
            t.len(),
            z.cols()
        )));
    }
    for i in 0..z.rows() {
        for (v, tk) in z.row_mut(i).iter_mut().zip(t) {
            *v /= tk;
        }
    }
    Ok(())
}

fn ets_probs(z: &Matrix, t: f64, w: [f64; 3]) -> Matrix {
    let k = z.cols();
    let uniform = 1.0 / k as f64;
    let mut out = Matrix::zeros(z.rows(), k);
    let mut tempered = vec![0.0; k];
    let mut plain = vec![0.0; k];
    for i in 0..z.rows() {
        for (j, &v) in z.row(i).iter().enumerate() {
            tempered[j] = v / t;
            plain[j] = v;
        }
        softmax_in_place(&mut tempered);
        softmax_in_place(&mut plain);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = w[0] * tempered[j] + w[1] * plain[j] + w[2] * uniform;
        }
    }
    out
}

/// Runs `spec` on rows `idx` of `ds`.
///
/// A feature clip recomputes logits from clipped features; logit stages
/// transform in order; ETS yields probabilities directly, otherwise softmax
/// is applied last.
pub fn apply(spec: &CalibratorSpec, ds: &Dataset, idx: &[usize]) -> Result<ProbMatrix> {
    spec.validate()?;
    let mut z = match spec.feature_clip() {
        Some(c) => {
            let (head, x) = ds.head_and_features("feature_clip stages need the classifier head")?;
            compute_logits(head, &clip_features(&x.select_rows(idx), c)?)?
        }
        None => ds.logits_at(idx)?,
    };
    for stage in &spec.stages {
        match stage {
            Stage::FeatureClip { .. } | Stage::Identity => {}
            Stage::LogitClip { c } => z = clip_logits(&z, *c)?,
            Stage::Temperature { t } => z = z.map(|v| v / t),
            Stage::ClasswiseTemperature { t } => scale_columns(&mut z, t)?,
            Stage::Ets { t, w } => {
                z.check_finite()?;
                return Ok(ProbMatrix::new_unchecked(ets_probs(&z, *t, *w)));
            }
        }
    }
    metrics::softmax(&z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub candidate: Vec<f64>,
    pub nll: f64,
}

impl TracePoint {
    fn scalar(x: f64, nll: f64) -> Self {
        Self { candidate: vec![x], nll }
    }
}

/// Outcome of fitting one stage on a validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: String,
    pub stage: Stage,
    pub n_val: usize,
    pub val_nll_before: f64,
    pub val_nll_after: f64,
    pub trace: Vec<TracePoint>,
    pub wall_time_s: f64,
    /// Set for ETS and CTS, whose exact procedures are reconstructions of
    /// the cited methods rather than published recipes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

const RECONSTRUCTED: &str = "reconstructed baseline";

fn check_val(logits: &Matrix, labels: &[u32]) -> Result<()> {
    if labels.is_empty() || logits.rows() == 0 {
        return Err(Error::Empty("validation split"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    logits.check_finite()
}

/// NLL of `softmax(z / t)`.
fn nll_at_temperature(z: &Matrix, labels: &[u32], t: f64) -> f64 {
    let inv = 1.0 / t;
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) * inv;
        let s: f64 = row.iter().map(|&v| (v * inv - max).exp()).sum();
        sum += s.ln() + max - row[y as usize] * inv;
    }
    sum / labels.len() as f64
}

/// Coarse log-spaced scan over [`T_RANGE`] then golden-section refinement.
fn temperature_line_search(f: impl FnMut(f64) -> f64) -> (f64, f64, Vec<TracePoint>) {
    let grid = log_space(T_RANGE.0, T_RANGE.1, T_GRID_POINTS);
    let (min, trace) = scan_then_golden(f, &grid, T_TOL);
    let trace = trace.into_iter().map(|(x, v)| TracePoint::scalar(x, v)).collect();
    (min.x, min.fx, trace)
}

/// Temperature scaling: `T = argmin NLL(softmax(z / T))`, or exactly 1 when
/// nothing beats `T = 1` by more than `1e-12`.
pub fn fit_temperature(logits: &Matrix, labels: &[u32]) -> Result<(f64, FitReport)> {
    check_val(logits, labels)?;
    let started = Instant::now();
    let before = nll_at_temperature(logits, labels, 1.0);
    let (t, fx, trace) = temperature_line_search(|t| nll_at_temperature(logits, labels, t));
    let (t, after) = if fx < before - TIE_EPS { (t, fx) } else { (1.0, before) };
    Ok((
        t,
        FitReport {
            method: "ts".into(),
            stage: Stage::Temperature { t },
            n_val: labels.len(),
            val_nll_before: before,
            val_nll_after: after,
            trace,
            wall_time_s: started.elapsed().as_secs_f64(),
            note: None,
        },
    ))
}

/// Candidate thresholds: quantiles of `|values|` at levels 0.50 ..= 1.00
/// (nearest rank), plus `ceiling`, deduplicated, positive, ascending.
pub fn clip_candidates(values: &[f64], ceiling: f64) -> Vec<f64> {
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(CLIP_QUANTILE_LEVELS + 1);
    if let Some(last) = abs.len().checked_sub(1) {
        for j in 0..CLIP_QUANTILE_LEVELS {
            let level = 0.5 + 0.5 * j as f64 / (CLIP_QUANTILE_LEVELS - 1) as f64;
            out.push(abs[(level * last as f64).round() as usize]);
        }
    }
    out.push(ceiling);
    out.retain(|&c| c > 0.0 && c.is_finite());
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Picks the candidate with the lowest NLL (ties toward larger `c`), then
/// golden-section refines between its neighbours.
fn fit_clip_threshold(
    candidates: &[f64],
    nll_of: impl Fn(f64) -> f64 + Sync,
) -> Result<(f64, f64, Vec<TracePoint>)> {
    if candidates.is_empty() {
        return Err(Error::Degenerate("no positive clip candidates (all values zero?)".into()));
    }
    let nlls: Vec<f64> = candidates.par_iter().map(|&c| nll_of(c)).collect();
    let mut best = candidates.len() - 1;
    for i in (0..candidates.len()).rev() {
        if nlls[i] < nlls[best] - TIE_EPS {
            best = i;
        }
    }
    let (mut c, mut fx) = (candidates[best], nlls[best]);
    let lo = candidates[best.saturating_sub(1)];
    let hi = candidates[(best + 1).min(candidates.len() - 1)];
    if hi > lo {
        let tol = (hi - lo) * 1e-3;
        let refined = golden_section(&nll_of, lo, hi, tol);
        if refined.fx < fx - TIE_EPS {
            c = refined.x;
            fx = refined.fx;
        }
    }
    let trace = candidates
        .iter()
        .zip(&nlls)
        .map(|(&c, &v)| TracePoint::scalar(c, v))
        .collect();
    Ok((c, fx, trace))
}

/// Feature clipping threshold fitted on `val` by NLL of the recomputed logits.
pub fn fit_feature_clip(ds: &Dataset, val: &[usize]) -> Result<(f64, FitReport)> {
    let (head, x) = ds.head_and_features(
        "feature clipping is impossible on a logits-only dataset; use logit clipping instead",
    )?;
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let started = Instant::now();
    let labels = ds.labels_at(val);
    let xv = x.select_rows(val);
    let nll_of = |c: f64| -> f64 {
        let clipped = xv.map(|v| v.clamp(-c, c));
        match compute_logits(head, &clipped) {
            Ok(z) => metrics::nll_from_logits(&z, &labels),
            Err(_) => f64::INFINITY,
        }
    };
    let before = metrics::nll_from_logits(&compute_logits(head, &xv)?, &labels);
    let candidates = clip_candidates(xv.as_slice(), x.max_abs());
    let (c, after, trace) = fit_clip_threshold(&candidates, nll_of)?;
    Ok((
        c,
        FitReport {
            method: "fc".into(),
            stage: Stage::FeatureClip { c },
            n_val: val.len(),
            val_nll_before: before,
            val_nll_after: after,
            trace,
            wall_time_s: started.elapsed().as_secs_f64(),
            note: None,
        },
    ))
}

/// Logit clipping threshold, chosen the same way as the feature threshold.
pub fn fit_logit_clip(logits: &Matrix, labels: &[u32]) -> Result<(f64, FitReport)> {
    check_val(logits, labels)?;
    let started = Instant::now();
    let nll_of = |c: f64| metrics::nll_from_logits(&logits.map(|v| v.clamp(-c, c)), labels);
    let before = metrics::nll_from_logits(logits, labels);
    let candidates = clip_candidates(logits.as_slice(), logits.max_abs());
    let (c, after, trace) = fit_clip_threshold(&candidates, nll_of)?;
    Ok((
        c,
        FitReport {
            method: "logit_clip".into(),
            stage: Stage::LogitClip { c },
            n_val: labels.len(),
            val_nll_before: before,
            val_nll_after: after,
            trace,
            wall_time_s: started.elapsed().as_secs_f64(),
            note: None,
        },
    ))
}

fn true_class_prob(row: &[f64], y: usize, scale: f64) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) * scale;
    let s: f64 = row.iter().map(|&v| (v * scale - max).exp()).sum();
    (row[y] * scale - max).exp() / s
}

/// ETS mixture weights for a fixed temperature `t`.
///
/// Coarse simplex grid at step 0.02 then pattern search at step 0.002. The
/// scan starts at `(1, 0, 0)` and only strictly better points replace the
/// incumbent, so ties resolve toward the tempered component.
pub fn fit_ets(logits: &Matrix, labels: &[u32], t: f64) -> Result<([f64; 3], FitReport)> {
    check_val(logits, labels)?;
    positive("ETS T", t).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let started = Instant::now();
    let k = logits.cols() as f64;
    let (tempered, plain): (Vec<f64>, Vec<f64>) = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            (true_class_prob(row, y as usize, 1.0 / t), true_class_prob(row, y as usize, 1.0))
        })
        .unzip();
    let n = labels.len() as f64;
    let nll_of = |w: [u32; 3]| -> f64 {
        let w = w.map(|v| v as f64 / ETS_LATTICE as f64);
        let mut sum = 0.0;
        for (a, b) in tempered.iter().zip(&plain) {
            let p = w[0] * a + w[1] * b + w[2] / k;
            sum -= p.max(NLL_FLOOR).ln();
        }
        sum / n
    };
    let to_weights = |w: [u32; 3]| w.map(|v| v as f64 / ETS_LATTICE as f64);

    let mut trace = Vec::new();
    let mut best = [ETS_LATTICE, 0, 0];
    let mut best_nll = nll_of(best);
    for a in (0..=ETS_LATTICE / ETS_COARSE).rev().map(|v| v * ETS_COARSE) {
        for b in (0..=(ETS_LATTICE - a) / ETS_COARSE).map(|v| v * ETS_COARSE) {
            let w = [a, b, ETS_LATTICE - a - b];
            let v = nll_of(w);
            trace.push(TracePoint { candidate: to_weights(w).to_vec(), nll: v });
            if v < best_nll - TIE_EPS {
                best = w;
                best_nll = v;
            }
        }
    }

    // moves that keep the weights on the lattice simplex
    const MOVES: [(usize, usize); 6] = [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)];
    loop {
        let mut improved = false;
        for (from, to) in MOVES {
            if best[from] == 0 {
                continue;
            }
            let mut w = best;
            w[from] -= 1;
            w[to] += 1;
            let v = nll_of(w);
            if v < best_nll - TIE_EPS {
                best = w;
                best_nll = v;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }

    let before = nll_of([0, ETS_LATTICE, 0]);
    let w = to_weights(best);
    Ok((
        w,
        FitReport {
            method: "ets".into(),
            stage: Stage::Ets { t, w },
            n_val: labels.len(),
            val_nll_before: before,
            val_nll_after: best_nll,
            trace,
            wall_time_s: started.elapsed().as_secs_f64(),
            note: Some(RECONSTRUCTED.into()),
        },
    ))
}

/// NLL with every column scaled by `1 / temps[j]`.
fn nll_classwise(z: &Matrix, labels: &[u32], temps: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let max = row.iter().zip(temps).fold(f64::NEG_INFINITY, |m, (&v, t)| m.max(v / t));
        let s: f64 = row.iter().zip(temps).map(|(&v, t)| (v / t - max).exp()).sum();
        sum += s.ln() + max - row[y as usize] / temps[y as usize];
    }
    sum / labels.len() as f64
}

/// Per-row constants for a single-coordinate CTS line search.
struct CoordinateCache {
    max_other: Vec<f64>,
    sum_other: Vec<f64>,
}

impl CoordinateCache {
    fn new(z: &Matrix, temps: &[f64], k: usize) -> Self {
        let mut max_other = Vec::with_capacity(z.rows());
        let mut sum_other = Vec::with_capacity(z.rows());
        for row in z.row_iter() {
            let m = row
                .iter()
                .zip(temps)
                .enumerate()
                .filter(|(j, _)| *j != k)
                .fold(f64::NEG_INFINITY, |m, (_, (&v, t))| m.max(v / t));
            let s: f64 = row
                .iter()
                .zip(temps)
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, (&v, t))| (v / t - m).exp())
                .sum();
            max_other.push(m);
            sum_other.push(s);
        }
        Self { max_other, sum_other }
    }

    fn nll(&self, z: &Matrix, labels: &[u32], temps: &[f64], k: usize, tk: f64) -> f64 {
        let mut sum = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let u = z.get(i, k) / tk;
            let m = self.max_other[i].max(u);
            let lse = m + (self.sum_other[i] * (self.max_other[i] - m).exp() + (u - m).exp()).ln();
            let y = y as usize;
            let zy = if y == k { u } else { z.get(i, y) / temps[y] };
            sum += lse - zy;
        }
        sum / labels.len() as f64
    }
}

/// Classwise temperatures by coordinate descent from the shared TS value.
///
/// Each coordinate uses the TS line search; at most three sweeps, stopping
/// early when a sweep improves validation NLL by less than `1e-8`.
pub fn fit_cts(logits: &Matrix, labels: &[u32]) -> Result<(Vec<f64>, FitReport)> {
    check_val(logits, labels)?;
    let k = logits.cols();
    if k < 2 {
        return Err(Error::InvalidParameter("CTS needs K >= 2".into()));
    }
    let started = Instant::now();
    let before = nll_at_temperature(logits, labels, 1.0);
    let (t0, _) = fit_temperature(logits, labels)?;
    let mut temps = vec![t0; k];
    let mut current = nll_classwise(logits, labels, &temps);
    let mut trace = Vec::new();
    for _sweep in 0..3 {
        let start_nll = current;
        for class in 0..k {
            let cache = CoordinateCache::new(logits, &temps, class);
            let (t, fx, _) =
                temperature_line_search(|t| cache.nll(logits, labels, &temps, class, t));
            if fx < current - TIE_EPS {
                temps[class] = t;
                current = fx;
            }
            trace.push(TracePoint { candidate: vec![class as f64, temps[class]], nll: current });
        }
        if start_nll - current < 1e-8 {
            break;
        }
    }
    // recompute from scratch so the report carries the plain objective value
    let after = nll_classwise(logits, labels, &temps);
    Ok((
        temps.clone(),
        FitReport {
            method: "cts".into(),
            stage: Stage::ClasswiseTemperature { t: temps },
            n_val: labels.len(),
            val_nll_before: before,
            val_nll_after: after,
            trace,
            wall_time_s: started.elapsed().as_secs_f64(),
            note: Some(RECONSTRUCTED.into()),
        },
    ))
}

/// Fitting recipes exposed to the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Fc,
    Ts,
    Ets,
    Cts,
    LogitClip,
    FcTs,
    FcEts,
    FcCts,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fc" => Method::Fc,
            "ts" => Method::Ts,
            "ets" => Method::Ets,
            "cts" => Method::Cts,
            "logit_clip" => Method::LogitClip,
            "fc+ts" => Method::FcTs,
            "fc+ets" => Method::FcEts,
            "fc+cts" => Method::FcCts,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown method {other:?} (expected fc, ts, ets, cts, logit_clip, fc+ts, fc+ets, fc+cts)"
                )))
            }
        })
    }
}

/// Fits `method` on the validation rows. Composite methods fit the feature
/// clip first and the downstream stage on the clipped logits.
pub fn fit_method(ds: &Dataset, val: &[usize], method: Method) -> Result<(CalibratorSpec, Vec<FitReport>)> {
    let labels = ds.labels_at(val);
    let mut stages = Vec::new();
    let mut reports = Vec::new();

    let clipped = matches!(method, Method::Fc | Method::FcTs | Method::FcEts | Method::FcCts);
    let logits = if clipped {
        let (c, report) = fit_feature_clip(ds, val)?;
        stages.push(report.stage.clone());
        reports.push(report);
        let (head, x) = ds.head_and_features("feature clipping")?;
        compute_logits(head, &clip_features(&x.select_rows(val), c)?)?
    } else {
        ds.logits_at(val)?
    };

    match method {
        Method::Fc => {}
        Method::LogitClip => {
            let (_, report) = fit_logit_clip(&logits, &labels)?;
            stages.push(report.stage.clone());
            reports.push(report);
        }
        Method::Ts | Method::FcTs => {
            let (_, report) = fit_temperature(&logits, &labels)?;
            stages.push(report.stage.clone());
            reports.push(report);
        }
        Method::Ets | Method::FcEts => {
            let (t, ts_report) = fit_temperature(&logits, &labels)?;
            let (_, report) = fit_ets(&logits, &labels, t)?;
            reports.push(ts_report);
            stages.push(report.stage.clone());
            reports.push(report);
        }
        Method::Cts | Method::FcCts => {
            let (_, report) = fit_cts(&logits, &labels)?;
            stages.push(report.stage.clone());
            reports.push(report);
        }
    }
    Ok((CalibratorSpec::new(stages), reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f64,
    pub ece: f64,
    pub adaptive_ece: f64,
    pub accuracy: f64,
    pub nll: f64,
}

/// Metrics of feature clipping at each threshold in `grid`, ascending in `c`.
pub fn sweep_clip(ds: &Dataset, idx: &[usize], grid: &[f64], bins: usize) -> Result<Vec<SweepRow>> {
    ds.head_and_features("the clip sweep needs the classifier head")?;
    if grid.is_empty() {
        return Err(Error::Empty("clip grid"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let labels = ds.labels_at(idx);
    grid.par_iter()
        .map(|&c| {
            let probs = apply(&CalibratorSpec::new(vec![Stage::FeatureClip { c }]), ds, idx)?;
            let (ece, _) = metrics::ece_equal_width(&probs, &labels, bins)?;
            let (adaptive_ece, _) = metrics::ece_adaptive(&probs, &labels, bins.min(labels.len()))?;
            Ok(SweepRow {
                c,
                ece,
                adaptive_ece,
                accuracy: metrics::accuracy(&probs, &labels)?,
                nll: metrics::nll(&probs, &labels)?,
            })
        })
        .collect()
}

/// `c,ece,adaptive_ece,accuracy,nll`
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("c,ece,adaptive_ece,accuracy,nll\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.c, r.ece, r.adaptive_ece, r.accuracy, r.nll);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{DatasetParts, Head};

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn clip_examples() {
        let x = m(&[vec![0.1, 0.5]]);
        assert_eq!(clip_features(&x, 0.23).unwrap().row(0), &[0.1, 0.23]);
        let x = m(&[vec![-0.4, 0.0, 0.9]]);
        assert_eq!(clip_features(&x, 0.3).unwrap().row(0), &[-0.3, 0.0, 0.3]);
        let z = m(&[vec![-10.0, 10.0]]);
        assert_eq!(clip_logits(&z, 4.98).unwrap().row(0), &[-4.98, 4.98]);
        assert_eq!(clip_features(&z, 10.0).unwrap(), z);
        assert!(clip_features(&x, 0.0).is_err());
        assert!(clip_features(&x, -1.0).is_err());
        assert!(clip_features(&x, f64::NAN).is_err());
    }

    #[test]
    fn spec_validation() {
        let ok = CalibratorSpec::new(vec![
            Stage::FeatureClip { c: 1.0 },
            Stage::Temperature { t: 1.5 },
        ]);
        assert!(ok.validate().is_ok());
        let late_clip = CalibratorSpec::new(vec![
            Stage::Temperature { t: 1.5 },
            Stage::FeatureClip { c: 1.0 },
        ]);
        assert!(late_clip.validate().is_err());
        let two = CalibratorSpec::new(vec![Stage::FeatureClip { c: 1.0 }, Stage::FeatureClip { c: 2.0 }]);
        assert!(two.validate().is_err());
        let bad_w = CalibratorSpec::new(vec![Stage::Ets { t: 1.0, w: [0.5, 0.6, -0.1] }]);
        assert!(bad_w.validate().is_err());
        let after_ets = CalibratorSpec::new(vec![
            Stage::Ets { t: 1.0, w: [1.0, 0.0, 0.0] },
            Stage::Temperature { t: 2.0 },
        ]);
        assert!(after_ets.validate().is_err());
        assert!(CalibratorSpec::new(vec![Stage::Temperature { t: 0.0 }]).validate().is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec = CalibratorSpec::new(vec![
            Stage::FeatureClip { c: 0.23 },
            Stage::Temperature { t: 1.5 },
        ]);
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"stages": [{"kind": "feature_clip", "c": 0.23}, {"kind": "temperature", "T": 1.5}]})
        );
        let back: CalibratorSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn uniform_logits_keep_unit_temperature() {
        let z = Matrix::from_fn(20, 4, |i, _| i as f64 * 0.1);
        let labels: Vec<u32> = (0..20).map(|i| (i % 4) as u32).collect();
        let (t, report) = fit_temperature(&z, &labels).unwrap();
        assert_eq!(t, 1.0);
        assert_eq!(report.val_nll_after, report.val_nll_before);
    }

    #[test]
    fn ets_tie_break_at_unit_temperature() {
        // underconfident logits: the uniform component cannot help
        let z = Matrix::from_fn(40, 3, |i, j| if j == i % 3 { 0.3 } else { 0.0 });
        let labels: Vec<u32> = (0..40).map(|i| (i % 3) as u32).collect();
        let (w, _) = fit_ets(&z, &labels, 1.0).unwrap();
        assert_eq!(w, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn fc_on_logits_only_dataset_is_missing_head() {
        let ds = Dataset::new(DatasetParts {
            k: 2,
            labels: vec![0, 1],
            logits: Some(Matrix::zeros(2, 2)),
            ..Default::default()
        })
        .unwrap();
        match fit_feature_clip(&ds, &[0, 1]) {
            Err(Error::MissingHead(msg)) => assert!(msg.contains("logit clipping")),
            other => panic!("{other:?}"),
        }
        assert!(sweep_clip(&ds, &[0, 1], &[1.0], 15).is_err());
    }

    #[test]
    fn clip_candidates_shape() {
        let values: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let c = clip_candidates(&values, 5.0);
        assert_eq!(*c.last().unwrap(), 5.0);
        assert!(c[0] >= 0.49 && c[0] <= 0.51);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
        assert!(clip_candidates(&[0.0, 0.0], 0.0).is_empty());
    }

    #[test]
    fn apply_rejects_feature_clip_without_head() {
        let ds = Dataset::new(DatasetParts {
            k: 2,
            labels: vec![0],
            logits: Some(Matrix::zeros(1, 2)),
            ..Default::default()
        })
        .unwrap();
        let spec = CalibratorSpec::new(vec![Stage::FeatureClip { c: 1.0 }]);
        assert!(matches!(apply(&spec, &ds, &[0]), Err(Error::MissingHead(_))));
        // classwise vector must match K
        let spec = CalibratorSpec::new(vec![Stage::ClasswiseTemperature { t: vec![1.0; 3] }]);
        assert!(apply(&spec, &ds, &[0]).is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("fc+ts".parse::<Method>().unwrap(), Method::FcTs);
        assert!("platt".parse::<Method>().is_err());
    }

    #[test]
    fn composite_fit_orders_stages() {
        let head = Head {
            weights: m(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            bias: vec![0.0, 0.0],
        };
        let x = Matrix::from_fn(30, 2, |i, j| if j == i % 2 { 2.0 + (i as f64) * 0.1 } else { 0.5 });
        let labels: Vec<u32> = (0..30).map(|i| if i % 5 == 0 { 1 - (i % 2) as u32 } else { (i % 2) as u32 }).collect();
        let ds = Dataset::new(DatasetParts {
            k: 2,
            features: Some(x),
            labels,
            head: Some(head),
            logits: None,
            source: None,
        })
        .unwrap();
        let val: Vec<usize> = (0..30).collect();
        let (spec, reports) = fit_method(&ds, &val, Method::FcTs).unwrap();
        assert!(matches!(spec.stages[0], Stage::FeatureClip { .. }));
        assert!(matches!(spec.stages[1], Stage::Temperature { .. }));
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].method, "fc");
        for r in &reports {
            assert!(r.val_nll_after <= r.val_nll_before + 1e-9);
        }
    }
}
