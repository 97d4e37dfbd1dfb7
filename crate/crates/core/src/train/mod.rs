//! Losses, metrics and training loops.

pub mod contrastive;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod plan;
pub mod stages;

pub use plan::{DialectPair, TrainPlan};
pub use stages::{evaluate_split, run_experiment, train_stage2, warmup_stage};

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

/// Mean negative log-likelihood of class indices under `[B×M]`
/// probabilities, with each log clamped at `ln 1e-12`.
pub fn ce_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    g.nll_clamped(probs, labels)
}

/// Mean elementwise binary cross-entropy of `[B×M]` probabilities against a
/// 0/1 matrix, clamped the same way.
pub fn bce_loss(g: &mut Graph, probs: Var, targets: &Tensor) -> Result<Var> {
    g.bce_clamped(probs, targets)
}
