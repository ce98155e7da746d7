//! Curve tables over `(c, sigma)` grids and closed-form vs numeric reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::delta::{
    d_delta_h_d_sigma, delta_h, half_normal_delta_h_printed, rectified_delta_h_printed,
    rectified_derivative_exact, DerivativeMethod, Model, TheoryParams,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model: Model,
    pub c: f64,
    pub sigma: f64,
    pub delta_h: f64,
    pub d_delta_h_d_sigma: f64,
}

fn grid_points(c_set: &[f64], sigma_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if c_set.is_empty() || sigma_grid.is_empty() {
        return Err(Error::Empty("theory grid"));
    }
    Ok(c_set
        .iter()
        .flat_map(|&c| sigma_grid.iter().map(move |&s| (c, s)))
        .collect())
}

/// `delta_h` and its finite-difference derivative for every `(c, sigma)`,
/// ordered c-major then sigma in the order given.
pub fn emit_theory_curves(model: Model, c_set: &[f64], sigma_grid: &[f64]) -> Result<Vec<CurveRow>> {
    grid_points(c_set, sigma_grid)?
        .into_par_iter()
        .map(|(c, sigma)| {
            let params = TheoryParams::new(sigma, c, model)?;
            Ok(CurveRow {
                model,
                c,
                sigma,
                delta_h: delta_h(&params)?,
                d_delta_h_d_sigma: d_delta_h_d_sigma(&params, DerivativeMethod::FiniteDifference)?,
            })
        })
        .collect()
}

/// `model,c,sigma,delta_h,d_delta_h_d_sigma`
pub fn curves_to_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("model,c,sigma,delta_h,d_delta_h_d_sigma\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.model, r.c, r.sigma, r.delta_h, r.d_delta_h_d_sigma);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonPoint {
    pub c: f64,
    pub sigma: f64,
    pub delta_h: f64,
    /// The published closed form of `delta_h` evaluated as printed.
    pub delta_h_printed: f64,
    pub closed_form: f64,
    pub finite_difference: f64,
    /// Analytic derivative of `delta_h` (rectified model only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<f64>,
    pub abs_diff: f64,
    pub rel_diff: f64,
    pub sign_agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignChange {
    pub c: f64,
    /// First grid sigma where the finite-difference derivative is not positive.
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model: Model,
    pub points: Vec<ComparisonPoint>,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub sign_disagreements: usize,
    pub first_nonpositive_fd: Vec<SignChange>,
}

/// Closed-form vs finite-difference derivatives on the grid, plus the
/// published `delta_h` next to this crate's value.
pub fn comparison_report(model: Model, c_set: &[f64], sigma_grid: &[f64]) -> Result<ComparisonReport> {
    let points: Vec<ComparisonPoint> = grid_points(c_set, sigma_grid)?
        .into_par_iter()
        .map(|(c, sigma)| {
            let params = TheoryParams::new(sigma, c, model)?;
            let closed_form = d_delta_h_d_sigma(&params, DerivativeMethod::ClosedForm)?;
            let finite_difference = d_delta_h_d_sigma(&params, DerivativeMethod::FiniteDifference)?;
            let abs_diff = (closed_form - finite_difference).abs();
            let (delta_h_printed, exact) = match model {
                Model::HalfNormal => (half_normal_delta_h_printed(sigma, c), None),
                Model::RectifiedMixture => {
                    (rectified_delta_h_printed(sigma, c)?, Some(rectified_derivative_exact(sigma, c)))
                }
            };
            Ok(ComparisonPoint {
                c,
                sigma,
                delta_h: delta_h(&params)?,
                delta_h_printed,
                closed_form,
                finite_difference,
                exact,
                abs_diff,
                rel_diff: abs_diff / finite_difference.abs().max(1e-12),
                sign_agrees: !closed_form.is_finite() || (closed_form > 0.0) == (finite_difference > 0.0),
            })
        })
        .collect::<Result<_>>()?;
    let first_nonpositive_fd = c_set
        .iter()
        .map(|&c| SignChange {
            c,
            sigma: points
                .iter()
                .find(|p| p.c == c && p.finite_difference <= 0.0)
                .map(|p| p.sigma),
        })
        .collect();
    Ok(ComparisonReport {
        model,
        max_abs_diff: points.iter().map(|p| p.abs_diff).fold(0.0, f64::max),
        max_rel_diff: points.iter().map(|p| p.rel_diff).fold(0.0, f64::max),
        sign_disagreements: points.iter().filter(|p| !p.sign_agrees).count(),
        first_nonpositive_fd,
        points,
    })
}
