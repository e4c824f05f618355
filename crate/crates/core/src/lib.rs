//! Group-fairness regularization for probabilistic classifiers.
//!
//! The losses in [`fairloss`] (demographic parity, equalized odds and
//! group IoU, each in a squared-difference and where applicable a mutual
//! information form) are computed from a batch estimate of the joint
//! distribution of prediction, true target and sensitive group, and return
//! exact gradients w.r.t. the per-sample predicted probabilities so they can
//! be added to any cross-entropy objective.

pub mod audit;
pub mod batch;
pub mod data;
pub mod error;
pub mod fairloss;
pub mod model;
pub mod stats;
pub mod sweep;

pub use batch::ProbBatch;
pub use error::{Error, Result};
pub use fairloss::{LossKind, LossResult, LossWarning};
pub use stats::{estimate_joint, JointDistribution};
