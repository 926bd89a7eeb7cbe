use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::classifier::TimeClassifier;
use super::labeled::{generate_labeled, holdout, GenerateConfig, LabeledSet};
use super::loss::{is_loss_at, is_loss_grad, BalancedBatch, ImbalanceMode};
use crate::diffusion::train::minibatch;
use crate::diffusion::{NoiseSchedule, NoisedBatch, ScoreFn, TrainConfig, TrainLogEntry};
use crate::error::{Error, Result};
use crate::numkit::{AdamConfig, AdamState};
use crate::oracle::OracleSpec;
use crate::seed::{derive_seed, derived_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub train: TrainConfig,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Share of each class held out for checkpoint selection.
    pub holdout_fraction: f64,
    pub mode: ImbalanceMode,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::classifier(),
            hidden: 256,
            embed_dim: 128,
            holdout_fraction: 0.1,
            mode: ImbalanceMode::ImportanceSampling,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub classifier: TimeClassifier,
    /// Prior used in the loss (0.5 in the uncorrected ablation).
    pub alpha_used: f64,
    pub log: Vec<TrainLogEntry>,
    pub selected_iteration: usize,
}

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_VALIDATION: u64 = 3;

fn draw_balanced(
    pos: ArrayView2<f64>,
    neg: ArrayView2<f64>,
    half: usize,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut crate::seed::Rng,
) -> BalancedBatch {
    let p = minibatch(pos, half, rng);
    let n = minibatch(neg, half, rng);
    BalancedBatch {
        positives: NoisedBatch::draw(p, &cfg.time_sampling, schedule, rng),
        negatives: NoisedBatch::draw(n, &cfg.time_sampling, schedule, rng),
    }
}

/// Minimizes the importance-sampled loss on `set`, keeping the parameters
/// with the lowest held-out loss.
pub fn train_classifier_on(set: &LabeledSet, schedule: &NoiseSchedule, cfg: &ClassifierConfig) -> Result<ClassifierOutcome> {
    let tc = &cfg.train;
    tc.validate()?;
    if set.per_class() == 0 || set.negatives.nrows() != set.per_class() {
        return Err(Error::Contract(format!(
            "classifier training needs balanced nonempty classes, got {} and {}",
            set.positives.nrows(),
            set.negatives.nrows()
        )));
    }
    let alpha = cfg.mode.effective_alpha(set.alpha);
    let dim = set.positives.ncols();
    let mut c = TimeClassifier::init(dim, cfg.hidden, cfg.embed_dim, *schedule, derive_seed(tc.seed, &[STREAM_INIT]))?;
    let (train, val) = holdout(set, cfg.holdout_fraction);

    // fixed noise on the held-out points keeps evaluations comparable
    let val_batch = val.map(|v| {
        let mut rng = derived_rng(tc.seed, &[STREAM_VALIDATION]);
        draw_balanced(v.positives.view(), v.negatives.view(), v.per_class(), tc, schedule, &mut rng)
    });
    let mut best = match &val_batch {
        Some(b) => Some((is_loss_at(&c, alpha, b)?, 0, c.net.clone())),
        None => None,
    };

    let half = (tc.batch_size / 2).max(1);
    let mut opt = AdamState::new(&c.net, AdamConfig::with_lr(tc.learning_rate));
    let mut rng = derived_rng(tc.seed, &[STREAM_BATCH]);
    let mut log = Vec::new();
    for it in 1..=tc.iterations {
        let batch = draw_balanced(train.positives.view(), train.negatives.view(), half, tc, schedule, &mut rng);
        let (loss, grads) = is_loss_grad(&c, alpha, &batch)
            .map_err(|e| Error::numerical(format!("classifier iteration {it}"), e.to_string()))?;
        opt.step(&mut c.net, &grads)?;
        if it % tc.validate_every == 0 || it == tc.iterations {
            let v = match &val_batch {
                Some(b) => {
                    let v = is_loss_at(&c, alpha, b)?;
                    if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                        best = Some((v, it, c.net.clone()));
                    }
                    Some(v)
                }
                None => None,
            };
            log::info!("classifier iter {it}: loss {loss:.5} held-out {v:?}");
            log.push(TrainLogEntry {
                iteration: it,
                train_loss: loss,
                validation: v,
            });
        }
    }
    let mut selected = tc.iterations;
    if let Some((_, it, net)) = best {
        c.net = net;
        selected = it;
    }
    Ok(ClassifierOutcome {
        classifier: c,
        alpha_used: alpha,
        log,
        selected_iteration: selected,
    })
}

/// Generates a labeled set from `generator`, then trains a classifier on it.
pub fn train_classifier<S: ScoreFn + ?Sized>(
    generator: &S,
    schedule: &NoiseSchedule,
    oracle: &OracleSpec,
    generate: &GenerateConfig,
    cfg: &ClassifierConfig,
) -> Result<(ClassifierOutcome, LabeledSet)> {
    let set = generate_labeled(generator, schedule, oracle, generate)?;
    let out = train_classifier_on(&set, schedule, cfg)?;
    Ok((out, set))
}
