//! Feature clipping for post-hoc calibration: dataset store, calibration
//! metrics, calibrators, the entropy model behind clipping, and feature
//! analyses.

// `!(x > 0.0)` guards are written that way to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod calibrators;
pub mod datastore;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod optimize;
pub mod rng;
pub mod synthetic;
pub mod theory;

pub use calibrators::{apply, CalibratorSpec, FitReport, Method, Stage};
pub use datastore::{load_dataset, save_dataset, split, Dataset, Head, Manifest, Split, SplitSpec};
pub use error::{Error, ErrorClass, Result};
pub use matrix::Matrix;
pub use metrics::{MetricReport, ProbMatrix};
