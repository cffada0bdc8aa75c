//! Differentiation, optimization and detection-threshold analysis.

pub mod adam;
pub mod check;
pub mod conv;
pub mod graph;
pub mod roc;
pub mod train;

pub use adam::Adam;
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use roc::{roc_and_cutoff, RocCurve, RocPoint};
pub use train::{train_fusion, FusionExample, TrainConfig, TrainOutcome};

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(target)?;
    Ok(graph::bce_value(pred.data(), target.data()))
}
