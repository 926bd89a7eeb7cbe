//! Time-dependent classifiers, their (importance-sampled) cross-entropy
//! objectives, and classifier-guided scores.

pub mod classifier;
pub mod guided;
pub mod labeled;
pub mod loss;
pub mod train;

use ndarray::{Array2, ArrayView2};

use crate::error::Result;

pub use classifier::{TimeClassifier, CLASSIFIER_KIND};
pub use guided::{guided_score_with, GuidedModel, GuidedScore, GUIDED_KIND};
pub use labeled::{generate_labeled, GenerateConfig, LabeledMeta, LabeledSet};
pub use loss::{
    balanced_subsample, bayes_optimal_prob, bce_from_logit, binary_ce, binary_entropy, binary_kl, ce_loss, ce_loss_at,
    estimate_alpha, is_loss, is_loss_at, is_loss_grad, pointwise_bce, softplus, BalancedBatch, ImbalanceMode,
};
pub use train::{train_classifier, train_classifier_on, ClassifierConfig, ClassifierOutcome};

/// A term `grad_x log C(x; sigma)` added to a score.
pub trait Guidance: Sync {
    fn dim(&self) -> usize;
    fn grad_log(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>>;
}
