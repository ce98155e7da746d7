//! Entropy model of feature clipping: special functions, closed-form
//! entropies, the entropy change `delta_h` and its `sigma` derivative,
//! quadrature oracles and curve emission.

pub mod curves;
pub mod delta;
pub mod entropy;
pub mod quadrature;
pub mod special;

pub use curves::{comparison_report, curves_to_csv, emit_theory_curves, ComparisonReport, CurveRow};
pub use delta::{
    d_delta_h_d_sigma, delta_h, derivative_sign_change, theory_point, DerivativeMethod, Model, TheoryParams,
    TheoryPoint,
};
pub use entropy::{clipped_entropy, rectified_entropy, rectified_entropy_q, trunc_normal_entropy, ClippedEntropy};
pub use special::{big_phi, erf, erfc, phi};
