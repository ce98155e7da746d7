//! Diagnostics contrasting high-calibration-error (HCE: wrong but confident)
//! and low-calibration-error (LCE: right and confident) samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibrators::{apply, CalibratorSpec, Stage};
use crate::datastore::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{self, ProbMatrix};
use crate::rng::SplitMix64;

pub const DEFAULT_TAU: f64 = 0.95;
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.80, 0.90, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSelection {
    pub tau: f64,
    /// Wrong predictions with confidence `> tau`.
    pub hce_idx: Vec<usize>,
    /// Correct predictions with confidence `> tau`.
    pub lce_idx: Vec<usize>,
}

impl GroupSelection {
    pub fn hce_empty(&self) -> bool {
        self.hce_idx.is_empty()
    }

    pub fn lce_empty(&self) -> bool {
        self.lce_idx.is_empty()
    }

    /// Maps row positions to dataset indices, `idx[pos]`.
    pub fn remap(&self, idx: &[usize]) -> Self {
        Self {
            tau: self.tau,
            hce_idx: self.hce_idx.iter().map(|&i| idx[i]).collect(),
            lce_idx: self.lce_idx.iter().map(|&i| idx[i]).collect(),
        }
    }

    fn groups(&self) -> [(&'static str, &[usize]); 2] {
        [("hce", &self.hce_idx), ("lce", &self.lce_idx)]
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("confidence threshold must lie in (0, 1), got {tau}")))
    }
}

/// Splits confident rows of `probs` by correctness. Indices are row
/// positions; empty groups are allowed.
pub fn select_groups(probs: &ProbMatrix, labels: &[u32], tau: f64) -> Result<GroupSelection> {
    check_tau(tau)?;
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", probs.rows(), labels.len())));
    }
    let mut sel = GroupSelection { tau, hce_idx: Vec::new(), lce_idx: Vec::new() };
    for (i, &y) in labels.iter().enumerate() {
        let (pred, conf) = probs.prediction(i);
        if conf > tau {
            if pred == y as usize {
                sel.lce_idx.push(i);
            } else {
                sel.hce_idx.push(i);
            }
        }
    }
    Ok(sel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnitSubset {
    All,
    Random { size: usize, seed: u64 },
}

impl UnitSubset {
    /// Selected unit indices, ascending.
    pub fn resolve(self, d: usize) -> Result<Vec<usize>> {
        match self {
            UnitSubset::All => Ok((0..d).collect()),
            UnitSubset::Random { size, seed } => {
                if size == 0 || size > d {
                    return Err(Error::InvalidParameter(format!(
                        "unit subset of size {size} from {d} units"
                    )));
                }
                let mut units = SplitMix64::new(seed).permutation(d);
                units.truncate(size);
                units.sort_unstable();
                Ok(units)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitProfile {
    pub units: Vec<usize>,
    pub mean_hce: Vec<f64>,
    pub mean_lce: Vec<f64>,
}

fn column_means(x: &Matrix, rows: &[usize], units: &[usize], absolute: bool, group: &'static str) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::EmptyGroup(group));
    }
    let mut sums = vec![0.0; units.len()];
    for &i in rows {
        let row = x.row(i);
        for (s, &u) in sums.iter_mut().zip(units) {
            *s += if absolute { row[u].abs() } else { row[u] };
        }
    }
    Ok(sums.into_iter().map(|s| s / rows.len() as f64).collect())
}

/// Per-unit mean feature value in each group. `absolute` averages `|x|`,
/// for backbones whose features can be negative.
pub fn unit_mean_profile(
    features: &Matrix,
    selection: &GroupSelection,
    subset: UnitSubset,
    absolute: bool,
) -> Result<UnitProfile> {
    let units = subset.resolve(features.cols())?;
    Ok(UnitProfile {
        mean_hce: column_means(features, &selection.hce_idx, &units, absolute, "hce")?,
        mean_lce: column_means(features, &selection.lce_idx, &units, absolute, "lce")?,
        units,
    })
}

impl UnitProfile {
    /// `unit,mean_hce,mean_lce`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("unit,mean_hce,mean_lce\n");
        for ((u, h), l) in self.units.iter().zip(&self.mean_hce).zip(&self.mean_lce) {
            let _ = writeln!(s, "{u},{h},{l}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHistogram {
    /// `bins + 1` shared edges over `[0, max]`.
    pub edges: Vec<f64>,
    pub counts_hce: Vec<usize>,
    pub counts_lce: Vec<usize>,
    /// `count / (included * width)`, so each integrates to 1.
    pub density_hce: Vec<f64>,
    pub density_lce: Vec<f64>,
    /// Negative entries, which fall outside `[0, max]` (only when not absolute).
    pub excluded_hce: usize,
    pub excluded_lce: usize,
}

impl FeatureHistogram {
    /// `bin_lo,bin_hi,density_hce,density_lce`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,density_hce,density_lce\n");
        for (j, w) in self.edges.windows(2).enumerate() {
            let _ = writeln!(s, "{},{},{},{}", w[0], w[1], self.density_hce[j], self.density_lce[j]);
        }
        s
    }
}

fn group_entries<'a>(x: &'a Matrix, rows: &'a [usize], absolute: bool) -> impl Iterator<Item = f64> + 'a {
    rows.iter()
        .flat_map(move |&i| x.row(i).iter().map(move |&v| if absolute { v.abs() } else { v }))
}

/// Histogram of pooled feature entries per group on shared equal-width
/// bins spanning `[0, max over both groups]`; the last bin is closed.
pub fn feature_histogram(
    features: &Matrix,
    selection: &GroupSelection,
    bins: usize,
    absolute: bool,
) -> Result<FeatureHistogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    for (name, rows) in selection.groups() {
        if rows.is_empty() {
            return Err(Error::EmptyGroup(name));
        }
    }
    let max = selection
        .groups()
        .iter()
        .flat_map(|(_, rows)| group_entries(features, rows, absolute))
        .fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return Err(Error::Degenerate("all selected feature entries are zero".into()));
    }
    let width = max / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|j| if j == bins { max } else { j as f64 * width }).collect();

    let count = |rows: &[usize]| -> (Vec<usize>, usize) {
        let mut counts = vec![0; bins];
        let mut excluded = 0;
        for v in group_entries(features, rows, absolute) {
            if v < 0.0 {
                excluded += 1;
            } else {
                counts[((v / max * bins as f64) as usize).min(bins - 1)] += 1;
            }
        }
        (counts, excluded)
    };
    let density = |counts: &[usize]| -> Vec<f64> {
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .enumerate()
            .map(|(j, &c)| if total == 0 { 0.0 } else { c as f64 / (total as f64 * (edges[j + 1] - edges[j])) })
            .collect()
    };
    let (counts_hce, excluded_hce) = count(&selection.hce_idx);
    let (counts_lce, excluded_lce) = count(&selection.lce_idx);
    Ok(FeatureHistogram {
        density_hce: density(&counts_hce),
        density_lce: density(&counts_lce),
        edges,
        counts_hce,
        counts_lce,
        excluded_hce,
        excluded_lce,
    })
}

/// Half-normal scale estimate `sqrt(mean x^2)` over the strictly positive
/// entries of rows `idx`. With `include_zeros`, exact zeros are pooled too.
pub fn estimate_sigma(features: &Matrix, idx: &[usize], include_zeros: bool) -> Result<f64> {
    let (mut sum_sq, mut n, mut positive) = (0.0, 0usize, false);
    for &i in idx {
        for &v in features.row(i) {
            if v > 0.0 {
                positive = true;
                sum_sq += v * v;
                n += 1;
            } else if include_zeros && v == 0.0 {
                n += 1;
            }
        }
    }
    if !positive {
        return Err(Error::Degenerate("no strictly positive feature entries in the group".into()));
    }
    Ok((sum_sq / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub h_before: f64,
    pub h_after: f64,
    pub delta: f64,
}

/// Mean softmax entropy (nats) per group before and after clipping
/// features at `c`. Keys are `"hce"` and `"lce"`; indices are dataset rows.
pub fn entropy_table(ds: &Dataset, selection: &GroupSelection, c: f64) -> Result<BTreeMap<String, EntropyRow>> {
    ds.head_and_features("the entropy table clips features and needs the classifier head")?;
    let clip = CalibratorSpec::new(vec![Stage::FeatureClip { c }]);
    let vanilla = CalibratorSpec::identity();
    let mut table = BTreeMap::new();
    for (name, rows) in selection.groups() {
        if rows.is_empty() {
            return Err(Error::EmptyGroup(name));
        }
        let h_before = metrics::mean_entropy(&apply(&vanilla, ds, rows)?)?;
        let h_after = metrics::mean_entropy(&apply(&clip, ds, rows)?)?;
        table.insert(name.to_string(), EntropyRow { h_before, h_after, delta: h_after - h_before });
    }
    Ok(table)
}

/// Plain-text rendering of an entropy table.
pub fn format_entropy_table(table: &BTreeMap<String, EntropyRow>) -> String {
    let mut s = String::from("group    H_sm(X)   H_sm(X~)  delta     (nats)\n");
    for (g, r) in table {
        let _ = writeln!(s, "{:<8} {:<9.4} {:<9.4} {:.4}", g.to_uppercase(), r.h_before, r.h_after, r.delta);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverconfidenceRow {
    pub threshold: f64,
    pub correct: usize,
    pub wrong: usize,
}

/// Counts of correct and wrong predictions with confidence strictly above
/// each threshold.
pub fn overconfidence_counts(probs: &ProbMatrix, labels: &[u32], thresholds: &[f64]) -> Result<Vec<OverconfidenceRow>> {
    for &t in thresholds {
        check_tau(t)?;
    }
    if probs.rows() != labels.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", probs.rows(), labels.len())));
    }
    let preds: Vec<(bool, f64)> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let (pred, conf) = probs.prediction(i);
            (pred == y as usize, conf)
        })
        .collect();
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let (mut correct, mut wrong) = (0, 0);
            for &(hit, conf) in &preds {
                if conf > threshold {
                    if hit {
                        correct += 1;
                    } else {
                        wrong += 1;
                    }
                }
            }
            OverconfidenceRow { threshold, correct, wrong }
        })
        .collect())
}

/// `threshold,correct,wrong`
pub fn overconfidence_to_csv(rows: &[OverconfidenceRow]) -> String {
    let mut s = String::from("threshold,correct,wrong\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.threshold, r.correct, r.wrong);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaHat {
    pub hce: f64,
    pub lce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub selection: GroupSelection,
    pub unit_means: UnitProfile,
    pub histogram: FeatureHistogram,
    pub sigma_hat: SigmaHat,
    pub entropy_table: BTreeMap<String, EntropyRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub tau: f64,
    pub c: f64,
    pub bins: usize,
    pub subset: UnitSubset,
    pub absolute: bool,
    pub include_zeros: bool,
}

/// All group diagnostics over rows `idx` of `ds`.
pub fn group_stats(ds: &Dataset, idx: &[usize], opts: &AnalysisOptions) -> Result<GroupStats> {
    let (_, x) = ds.head_and_features("group analysis needs features and the classifier head")?;
    let probs = apply(&CalibratorSpec::identity(), ds, idx)?;
    let selection = select_groups(&probs, &ds.labels_at(idx), opts.tau)?.remap(idx);
    Ok(GroupStats {
        unit_means: unit_mean_profile(x, &selection, opts.subset, opts.absolute)?,
        histogram: feature_histogram(x, &selection, opts.bins, opts.absolute)?,
        sigma_hat: SigmaHat {
            hce: estimate_sigma(x, &selection.hce_idx, opts.include_zeros)?,
            lce: estimate_sigma(x, &selection.lce_idx, opts.include_zeros)?,
        },
        entropy_table: entropy_table(ds, &selection, opts.c)?,
        selection,
    })
}
