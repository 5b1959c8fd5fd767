//! Gaussian-process classification (Laplace) and regression.

pub mod cg;
pub mod kernel;
pub mod laplace;
pub mod multiclass;
pub mod regression;

pub use cg::{CgOptions, CgResult};
pub use kernel::{cholesky_with_jitter, gram, kernel_matrix, KernelKind, KernelSpec};
pub use laplace::{expected_sigmoid, gauss_hermite, optimize_hyperparams, BinaryPrediction, GpBinaryClassifier};
pub use multiclass::{GpMulticlass, GpTraining, GP_SCHEMA};
pub use regression::{optimize_regression, regression_evidence, ConflictRegressors, GpRegressor, RegressorTraining, GPR_SCHEMA};

/// Laplace evidence and its gradient over `[ln σ, ln l…]`.
pub fn classification_evidence(
    kernel: &KernelSpec,
    x: &[Vec<f64>],
    y: &[f64],
) -> crate::Result<(f64, Vec<f64>)> {
    laplace::evidence_and_gradient(kernel, x, y, None).map(|(v, g, _)| (v, g))
}
