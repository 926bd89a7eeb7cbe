//! Cross-entropy objectives for time-dependent classifiers.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::classifier::TimeClassifier;
use crate::diffusion::{NoisedBatch, TimeSampling};
use crate::error::{Error, Result};
use crate::numkit::{sigmoid, NetParams};

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-ln C` for a positive and `-ln(1 - C)` for a negative, from the logit.
pub fn bce_from_logit(z: f64, positive: bool) -> f64 {
    if positive {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// Pointwise binary cross-entropy `-(q ln p + (1 - q) ln(1 - p))`.
pub fn binary_ce(q: f64, p: f64) -> f64 {
    -(xlogy(q, p) + xlogy(1.0 - q, 1.0 - p))
}

pub fn binary_entropy(q: f64) -> f64 {
    binary_ce(q, q)
}

pub fn binary_kl(q: f64, p: f64) -> f64 {
    xlogy(q, q / p) + xlogy(1.0 - q, (1.0 - q) / (1.0 - p))
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// How the classes are weighted in the classifier objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceMode {
    /// Weight the balanced classes by the estimated prior `alpha`.
    #[default]
    ImportanceSampling,
    /// Ablation: treat the balanced set as if `alpha = 0.5`.
    Uncorrected,
}

impl ImbalanceMode {
    pub fn effective_alpha(self, alpha: f64) -> f64 {
        match self {
            ImbalanceMode::ImportanceSampling => alpha,
            ImbalanceMode::Uncorrected => 0.5,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::DegeneratePrior(alpha));
    }
    Ok(())
}

/// Per-row weighted cross-entropy and its logit gradient.
fn weighted_bce(z: &Array1<f64>, labels: &[bool], weights: &[f64]) -> (f64, Array1<f64>) {
    let mut loss = 0.0;
    let mut grad = Array1::zeros(z.len());
    for i in 0..z.len() {
        loss += weights[i] * bce_from_logit(z[i], labels[i]);
        grad[i] = weights[i] * (sigmoid(z[i]) - if labels[i] { 1.0 } else { 0.0 });
    }
    (loss, grad)
}

/// Cross-entropy on fixed noise draws, averaged over rows.
pub fn ce_loss_at(c: &TimeClassifier, batch: &NoisedBatch, labels: &[bool]) -> Result<f64> {
    if batch.is_empty() || labels.len() != batch.len() {
        return Err(Error::Contract(format!(
            "cross-entropy needs one label per point, got {} labels for {} points",
            labels.len(),
            batch.len()
        )));
    }
    let z = c.logits(batch.noised().view(), &batch.sigmas)?;
    let w = vec![1.0 / batch.len() as f64; batch.len()];
    Ok(weighted_bce(&z, labels, &w).0)
}

/// Monte Carlo cross-entropy with fresh noise levels and noise.
pub fn ce_loss<R: Rng + ?Sized>(
    c: &TimeClassifier,
    x0: ArrayView2<f64>,
    labels: &[bool],
    sampling: &TimeSampling,
    rng: &mut R,
) -> Result<f64> {
    let batch = NoisedBatch::draw(x0.to_owned(), sampling, &c.schedule, rng);
    ce_loss_at(c, &batch, labels)
}

/// Per-point losses `-ln C` (positives) or `-ln(1 - C)` (negatives).
pub fn pointwise_bce(c: &TimeClassifier, batch: &NoisedBatch, positive: bool) -> Result<Array1<f64>> {
    let z = c.logits(batch.noised().view(), &batch.sigmas)?;
    Ok(z.mapv(|v| bce_from_logit(v, positive)))
}

/// Balanced positive and negative draws with the prior they were weighted by.
#[derive(Clone, Debug)]
pub struct BalancedBatch {
    pub positives: NoisedBatch,
    pub negatives: NoisedBatch,
}

impl BalancedBatch {
    fn check(&self) -> Result<()> {
        if self.positives.len() != self.negatives.len() || self.positives.is_empty() {
            return Err(Error::Contract(format!(
                "importance-sampled loss needs equally many positives and negatives (>= 1), got {} and {}",
                self.positives.len(),
                self.negatives.len()
            )));
        }
        Ok(())
    }

    fn stacked(&self) -> (Array2<f64>, Vec<f64>, Vec<bool>) {
        let x = ndarray::concatenate(Axis(0), &[self.positives.noised().view(), self.negatives.noised().view()])
            .expect("equal widths");
        let sigmas = [self.positives.sigmas.as_slice(), self.negatives.sigmas.as_slice()].concat();
        let labels: Vec<bool> = (0..x.nrows()).map(|i| i < self.positives.len()).collect();
        (x, sigmas, labels)
    }

    fn weights(&self, alpha: f64) -> Vec<f64> {
        let n = self.positives.len() as f64;
        (0..2 * self.positives.len())
            .map(|i| if i < self.positives.len() { alpha / n } else { (1.0 - alpha) / n })
            .collect()
    }
}

/// `(1/N) sum_+ alpha (-ln C) + (1/N) sum_- (1 - alpha) (-ln(1 - C))` on fixed draws.
pub fn is_loss_at(c: &TimeClassifier, alpha: f64, batch: &BalancedBatch) -> Result<f64> {
    check_alpha(alpha)?;
    batch.check()?;
    let (x, sigmas, labels) = batch.stacked();
    let z = c.logits(x.view(), &sigmas)?;
    Ok(weighted_bce(&z, &labels, &batch.weights(alpha)).0)
}

/// Importance-sampled loss with fresh noise for balanced sets `pos`, `neg`.
pub fn is_loss<R: Rng + ?Sized>(
    c: &TimeClassifier,
    alpha: f64,
    pos: ArrayView2<f64>,
    neg: ArrayView2<f64>,
    sampling: &TimeSampling,
    rng: &mut R,
) -> Result<f64> {
    if pos.nrows() != neg.nrows() || pos.nrows() == 0 {
        return Err(Error::Contract(format!(
            "importance-sampled loss needs balanced nonempty sets, got {} and {}",
            pos.nrows(),
            neg.nrows()
        )));
    }
    let batch = BalancedBatch {
        positives: NoisedBatch::draw(pos.to_owned(), sampling, &c.schedule, rng),
        negatives: NoisedBatch::draw(neg.to_owned(), sampling, &c.schedule, rng),
    };
    is_loss_at(c, alpha, &batch)
}

/// Loss and parameter gradient of [`is_loss_at`].
pub fn is_loss_grad(c: &TimeClassifier, alpha: f64, batch: &BalancedBatch) -> Result<(f64, NetParams)> {
    check_alpha(alpha)?;
    batch.check()?;
    let (x, sigmas, labels) = batch.stacked();
    let (z, cache, _) = c.logits_cached(x.view(), &sigmas)?;
    let (loss, dz) = weighted_bce(&z, &labels, &batch.weights(alpha));
    let back = c.net.backward(&cache, dz.insert_axis(Axis(1)).view(), true)?;
    Ok((loss, back.grads.expect("requested")))
}

/// `alpha = n+ / (n+ + n-)` from raw counts.
pub fn estimate_alpha(positives: usize, negatives: usize) -> Result<f64> {
    let total = positives + negatives;
    if total == 0 {
        return Err(Error::Contract("cannot estimate a class prior from zero samples".into()));
    }
    let alpha = positives as f64 / total as f64;
    check_alpha(alpha)?;
    Ok(alpha)
}

/// Uniform subsample of `n` rows without replacement, kept in original order.
pub fn balanced_subsample<R: Rng + ?Sized>(n: usize, data: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
    if data.nrows() < n {
        return Err(Error::Contract(format!(
            "cannot draw {n} points from a set of {}",
            data.nrows()
        )));
    }
    let mut idx = rand::seq::index::sample(rng, data.nrows(), n).into_vec();
    idx.sort_unstable();
    Ok(data.select(Axis(0), &idx))
}

/// Posterior of the positive class: `alpha p1 / (alpha p1 + (1 - alpha) p0)`.
pub fn bayes_optimal_prob(alpha: f64, p1: f64, p0: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(p1 >= 0.0 && p0 >= 0.0) {
        return Err(Error::Config(format!("densities must be nonnegative, got {p1} and {p0}")));
    }
    let num = alpha * p1;
    let den = num + (1.0 - alpha) * p0;
    if den == 0.0 {
        return Err(Error::Undefined("both class densities vanish".into()));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;
    use crate::numkit::Linear;
    use crate::seed::rng_from;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn constant_classifier(logit: f64) -> TimeClassifier {
        let mut c = TimeClassifier::init(1, 4, 2, NoiseSchedule::default(), 0).unwrap();
        c.net.output.bias[0] = logit;
        c
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn one_point(x: f64) -> NoisedBatch {
        NoisedBatch { x0: array![[x]], sigmas: vec![0.5], eps: array![[0.1]] }
    }

    #[test]
    fn half_classifier_costs_ln2() {
        let c = constant_classifier(0.0);
        let mut rng = rng_from(1);
        let x0 = array![[0.1], [2.0], [-1.0]];
        let l = ce_loss(&c, x0.view(), &[true, false, true], &TimeSampling::default(), &mut rng).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_positive_term() {
        let c = constant_classifier(logit(0.9));
        let l = ce_loss_at(&c, &one_point(0.0), &[true]).unwrap();
        assert!((l + 0.9f64.ln()).abs() < 1e-12);
        assert!((l - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn near_perfect_classifier_loss_vanishes() {
        let c = constant_classifier(40.0);
        assert!(ce_loss_at(&c, &one_point(0.0), &[true]).unwrap() < 1e-15);
    }

    #[test]
    fn is_loss_hand_arithmetic() {
        // one hidden unit: z = w silu(c_in x) + b; solve (w, b) so that
        // C(+1) = 0.9 and C(-1) = 0.2 at sigma = 0.5 with no noise
        let cfg = crate::numkit::NetConfig::new(1, 1).with_hidden(1).with_embed(2);
        let mut net = NetParams::zeros(cfg).unwrap();
        net.input.weight[[0, 0]] = 1.0;
        let c_in = 1.0 / (0.25f64 + 0.25).sqrt();
        let (hp, hn) = (crate::numkit::silu(c_in), crate::numkit::silu(-c_in));
        let w = (logit(0.9) - logit(0.2)) / (hp - hn);
        net.output.weight[[0, 0]] = w;
        net.output.bias[0] = logit(0.9) - w * hp;
        let c = TimeClassifier::new(net, NoiseSchedule::default()).unwrap();
        let b = BalancedBatch {
            positives: NoisedBatch { x0: array![[1.0]], sigmas: vec![0.5], eps: array![[0.0]] },
            negatives: NoisedBatch { x0: array![[-1.0]], sigmas: vec![0.5], eps: array![[0.0]] },
        };
        let l = is_loss_at(&c, 0.5, &b).unwrap();
        let want = 0.5 * -(0.9f64.ln()) + 0.5 * -(0.8f64.ln());
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        assert!((l - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn half_prior_halves_balanced_ce() {
        let mut rng = rng_from(2);
        let mut c = TimeClassifier::init(1, 8, 4, NoiseSchedule::default(), 1).unwrap();
        c.net.output = Linear::uniform(8, 1, &mut rng);
        let pos = NoisedBatch::draw(array![[0.2], [1.0]], &TimeSampling::default(), &c.schedule, &mut rng);
        let neg = NoisedBatch::draw(array![[-0.2], [-1.5]], &TimeSampling::default(), &c.schedule, &mut rng);
        let b = BalancedBatch { positives: pos.clone(), negatives: neg.clone() };
        let is = is_loss_at(&c, 0.5, &b).unwrap();
        // unweighted balanced objective: per-class means summed
        let unweighted = pointwise_bce(&c, &pos, true).unwrap().mean().unwrap()
            + pointwise_bce(&c, &neg, false).unwrap().mean().unwrap();
        assert!((is - 0.5 * unweighted).abs() < 1e-14);

        // alpha -> 1 removes the negative term
        let neg_only = is_loss_at(&c, 1.0 - 1e-12, &b).unwrap();
        let pos_term: f64 = pointwise_bce(&c, &pos, true).unwrap().sum() / 2.0;
        assert!((neg_only - pos_term).abs() < 1e-9);
    }

    #[test]
    fn unbalanced_is_contract_error() {
        let c = constant_classifier(0.0);
        let mut rng = rng_from(0);
        let r = is_loss(&c, 0.5, array![[0.0], [1.0]].view(), array![[2.0]].view(), &TimeSampling::default(), &mut rng);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn is_gradient_matches_finite_differences() {
        let mut rng = rng_from(5);
        let mut c = TimeClassifier::init(2, 12, 6, NoiseSchedule::default(), 5).unwrap();
        c.net.output = Linear::uniform(12, 1, &mut rng);
        let b = BalancedBatch {
            positives: NoisedBatch::draw(array![[0.5, 0.5], [1.5, -0.5]], &TimeSampling::default(), &c.schedule, &mut rng),
            negatives: NoisedBatch::draw(array![[-0.5, 0.5], [0.2, 1.4]], &TimeSampling::default(), &c.schedule, &mut rng),
        };
        let (_, g) = is_loss_grad(&c, 0.7, &b).unwrap();
        let flat = g.to_flat();
        let h = 1e-4;
        for _ in 0..40 {
            let i = rng.random_range(0..flat.len());
            let mut p = c.clone();
            *p.net.flat_mut(i).unwrap() += h;
            let mut q = c.clone();
            *q.net.flat_mut(i).unwrap() -= h;
            let fd = (is_loss_at(&p, 0.7, &b).unwrap() - is_loss_at(&q, 0.7, &b).unwrap()) / (2.0 * h);
            let rel = (fd - flat[i]).abs() / fd.abs().max(flat[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: {fd} vs {}", flat[i]);
        }
    }

    #[test]
    fn alpha_from_counts() {
        assert_eq!(estimate_alpha(300, 100).unwrap(), 0.75);
        assert_eq!(estimate_alpha(42, 42).unwrap(), 0.5);
        assert!(matches!(estimate_alpha(10, 0), Err(Error::DegeneratePrior(_))));
        assert!(matches!(estimate_alpha(0, 10), Err(Error::DegeneratePrior(_))));
        assert!(estimate_alpha(0, 0).is_err());
    }

    #[test]
    fn subsample_edge_cases() {
        let mut rng = rng_from(1);
        let d = array![[3.0], [1.0], [2.0]];
        assert_eq!(balanced_subsample(3, d.view(), &mut rng).unwrap(), d);
        assert_eq!(balanced_subsample(0, d.view(), &mut rng).unwrap().nrows(), 0);
        assert!(matches!(balanced_subsample(4, d.view(), &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn subsample_inclusion_is_uniform() {
        let mut rng = rng_from(9);
        let d = Array2::from_shape_fn((20, 1), |(i, _)| i as f64);
        let (n, reps) = (5, 20_000);
        let mut hits = [0usize; 20];
        for _ in 0..reps {
            for v in balanced_subsample(n, d.view(), &mut rng).unwrap().column(0) {
                hits[*v as usize] += 1;
            }
        }
        let p = n as f64 / 20.0;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        for h in hits {
            assert!((h as f64 / reps as f64 - p).abs() < 4.0 * se);
        }
    }

    #[test]
    fn bayes_posterior_examples() {
        assert_eq!(bayes_optimal_prob(0.5, 1.3, 1.3).unwrap(), 0.5);
        assert!((bayes_optimal_prob(0.8, 0.7, 0.7).unwrap() - 0.8).abs() < 1e-15);
        assert!((bayes_optimal_prob(0.5, 2.0, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(bayes_optimal_prob(0.5, 0.0, 0.0), Err(Error::Undefined(_))));
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-16);
    }

    proptest! {
        #[test]
        fn ce_is_entropy_plus_kl(q in 0.0f64..=1.0, p in 1e-6f64..(1.0 - 1e-6)) {
            let lhs = binary_ce(q, p) - binary_entropy(q);
            let kl = binary_kl(q, p);
            prop_assert!((lhs - kl).abs() < 1e-12);
            prop_assert!(kl >= -1e-15);
        }

        #[test]
        fn kl_vanishes_only_at_target(q in 0.01f64..0.99, d in 0.001f64..0.5) {
            prop_assert!(binary_kl(q, q).abs() < 1e-15);
            let p = (q + d).min(0.999);
            prop_assert!(binary_kl(q, p) > 0.0);
        }
    }
}
