//! The loss interface shared by curve finding, scans, and gate training.

use crate::data::Sample;
use crate::error::Result;
use crate::params::ParamVector;

/// Mean loss and accuracy of one parameter vector on a set of samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMetrics {
    pub loss: f64,
    /// NaN for objectives without a notion of accuracy.
    pub accuracy: f64,
}

/// A differentiable loss over parameter vectors.
///
/// Implementations must return gradients that are exactly zero on frozen
/// (non-tunable) entries and must be deterministic.
pub trait Objective: Sync {
    fn loss_and_grad(&self, params: &ParamVector, batch: &[&Sample]) -> Result<(f64, Vec<f64>)>;

    fn evaluate(&self, params: &ParamVector, samples: &[Sample]) -> Result<PointMetrics>;
}
