//! Maximum likelihood estimation for linear latent variable models with
//! small-sample corrected Wald inference.
//!
//! The pipeline is `model_spec` (DSL → parameter table) → `moments`
//! (conditional mean/variance and their derivatives) → `estimation` (Fisher
//! scoring) → `correction` (bias-corrected variance parameters and effective
//! sample sizes) → `inference` (Wald and F tests, Satterthwaite df, sandwich
//! variance). `simulation` runs type-1-error calibration studies on top.

// `!(x > 0.0)` rejects NaN along with non-positive values; that is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correction;
pub mod data;
pub mod dist;
pub mod estimation;
pub mod inference;
pub mod linalg;
pub mod model_spec;
pub mod moments;
pub mod simulation;

pub use correction::{algorithm1, algorithm2, Algorithm, CorrectedFit, CorrectionError, CorrectionOptions};
pub use data::{DataError, Dataset, Frame};
pub use estimation::{fit, FitError, FitOptions, FitResult, FitStatus};
pub use inference::{ClusterIndex, Correction, FTestResult, InferenceError, WaldResult};
pub use model_spec::{index_parameters, parse_model, validate, ModelSpec, ParameterTable, SpecError};
pub use moments::{conditional_moments, MomentBundle, MomentError, Order};
