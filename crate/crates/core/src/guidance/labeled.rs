use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::loss::{balanced_subsample, estimate_alpha};
use crate::data::{read_points_csv, write_points_csv};
use crate::diffusion::{sample_reverse, NoiseSchedule, SamplerConfig, ScoreFn};
use crate::error::{Error, Result};
use crate::oracle::OracleSpec;
use crate::seed::{derive_seed, derived_rng};

/// Balanced positive/negative clean points plus the prior measured before
/// balancing.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub positives: Array2<f64>,
    pub negatives: Array2<f64>,
    pub raw_positives: usize,
    pub raw_negatives: usize,
    pub alpha: f64,
    /// Generator draws spent to fill both classes.
    pub samples_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledMeta {
    pub per_class: usize,
    pub raw_positives: usize,
    pub raw_negatives: usize,
    pub alpha: f64,
    pub samples_used: usize,
}

impl LabeledSet {
    pub fn per_class(&self) -> usize {
        self.positives.nrows()
    }

    pub fn meta(&self) -> LabeledMeta {
        LabeledMeta {
            per_class: self.per_class(),
            raw_positives: self.raw_positives,
            raw_negatives: self.raw_negatives,
            alpha: self.alpha,
            samples_used: self.samples_used,
        }
    }

    /// Writes `positives.csv`, `negatives.csv` and `labeled.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_points_csv(&dir.join("positives.csv"), self.positives.view())?;
        write_points_csv(&dir.join("negatives.csv"), self.negatives.view())?;
        crate::io::write_json(&dir.join("labeled.json"), &self.meta())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("labeled.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(meta_path));
        }
        let meta: LabeledMeta = crate::io::read_json(&meta_path)?;
        let positives = read_points_csv(&dir.join("positives.csv"))?;
        let negatives = read_points_csv(&dir.join("negatives.csv"))?;
        if positives.nrows() != meta.per_class || negatives.nrows() != meta.per_class {
            return Err(Error::Schema(format!(
                "labeled set in {} holds {} / {} points, sidecar says {}",
                dir.display(),
                positives.nrows(),
                negatives.nrows(),
                meta.per_class
            )));
        }
        Ok(Self {
            positives,
            negatives,
            raw_positives: meta.raw_positives,
            raw_negatives: meta.raw_negatives,
            alpha: meta.alpha,
            samples_used: meta.samples_used,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    /// Points per class after balancing.
    pub per_class: usize,
    /// Maximum generator draws.
    pub budget: usize,
    /// Draws per sampling round.
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            per_class: 50_000,
            budget: 1_000_000,
            batch: 16_384,
            steps: crate::diffusion::DEFAULT_STEPS,
            seed: 0,
        }
    }
}

const STREAM_SAMPLES: u64 = 1;
const STREAM_BALANCE: u64 = 2;

/// Samples from `generator` in rounds, labels with `oracle`, and stops once
/// both classes hold `per_class` raw members. The prior comes from the raw
/// counts; each class is then subsampled to `per_class`.
pub fn generate_labeled<S: ScoreFn + ?Sized>(
    generator: &S,
    schedule: &NoiseSchedule,
    oracle: &OracleSpec,
    cfg: &GenerateConfig,
) -> Result<LabeledSet> {
    if cfg.per_class == 0 {
        return Err(Error::Config("per-class target must be at least 1".into()));
    }
    if cfg.budget < 2 * cfg.per_class {
        return Err(Error::Config(format!(
            "budget {} cannot fill two classes of {}",
            cfg.budget, cfg.per_class
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("sampling round size must be positive".into()));
    }
    let d = generator.dim();
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    let (mut n_pos, mut n_neg, mut used) = (0usize, 0usize, 0usize);
    let mut round = 0u64;
    while n_pos.min(n_neg) < cfg.per_class {
        if used >= cfg.budget {
            return Err(Error::Budget {
                used,
                positives: n_pos,
                negatives: n_neg,
                target: cfg.per_class,
            });
        }
        let take = cfg.batch.min(cfg.budget - used);
        let sampler = SamplerConfig {
            steps: cfg.steps,
            seed: derive_seed(cfg.seed, &[STREAM_SAMPLES, round]),
        };
        let x = sample_reverse(generator, schedule, take, sampler)?;
        let labels = oracle.evaluate_batch(x.view())?;
        for (row, ok) in x.rows().into_iter().zip(labels) {
            if ok {
                pos.extend(row.iter());
                n_pos += 1;
            } else {
                neg.extend(row.iter());
                n_neg += 1;
            }
        }
        used += take;
        round += 1;
        log::debug!("labeled round {round}: {n_pos} positive, {n_neg} negative after {used} draws");
    }
    let alpha = estimate_alpha(n_pos, n_neg)?;
    let shape = |v: Vec<f64>, n: usize| Array2::from_shape_vec((n, d), v).map_err(|e| Error::Config(e.to_string()));
    let pos = shape(pos, n_pos)?;
    let neg = shape(neg, n_neg)?;
    let mut rng = derived_rng(cfg.seed, &[STREAM_BALANCE]);
    Ok(LabeledSet {
        positives: balanced_subsample(cfg.per_class, pos.view(), &mut rng)?,
        negatives: balanced_subsample(cfg.per_class, neg.view(), &mut rng)?,
        raw_positives: n_pos,
        raw_negatives: n_neg,
        alpha,
        samples_used: used,
    })
}

/// Splits off the last `fraction` of each class as a held-out set.
pub(crate) fn holdout(set: &LabeledSet, fraction: f64) -> (LabeledSet, Option<LabeledSet>) {
    let n = set.per_class();
    let k = ((n as f64) * fraction).floor() as usize;
    if k == 0 || k >= n {
        return (set.clone(), None);
    }
    let cut = |a: &Array2<f64>| (a.slice_axis(Axis(0), (..n - k).into()).to_owned(), a.slice_axis(Axis(0), (n - k..).into()).to_owned());
    let (tp, vp) = cut(&set.positives);
    let (tn, vn) = cut(&set.negatives);
    let train = LabeledSet { positives: tp, negatives: tn, ..set.clone() };
    let val = LabeledSet { positives: vp, negatives: vn, ..set.clone() };
    (train, Some(val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_score;

    #[test]
    fn all_positive_oracle_exhausts_budget() {
        let everything = OracleSpec::HalfSpace { normal: vec![0.0], offset: 1.0 };
        let cfg = GenerateConfig { per_class: 10, budget: 50, batch: 20, steps: 5, seed: 1 };
        match generate_labeled(&gaussian_score(0.0, 0.25, 1), &NoiseSchedule::default(), &everything, &cfg) {
            Err(Error::Budget { negatives, used, .. }) => {
                assert_eq!(negatives, 0);
                assert_eq!(used, 50);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn balanced_output_keeps_raw_prior() {
        let half = OracleSpec::HalfSpace { normal: vec![-1.0], offset: 0.0 };
        let cfg = GenerateConfig { per_class: 100, budget: 10_000, batch: 64, steps: 20, seed: 3 };
        let set = generate_labeled(&gaussian_score(0.0, 0.25, 1), &NoiseSchedule::default(), &half, &cfg).unwrap();
        assert_eq!(set.positives.nrows(), 100);
        assert_eq!(set.negatives.nrows(), 100);
        assert_eq!(set.raw_positives + set.raw_negatives, set.samples_used);
        assert_eq!(set.alpha, set.raw_positives as f64 / set.samples_used as f64);
        assert!(set.positives.iter().all(|v| *v >= 0.0));
        assert!(set.negatives.iter().all(|v| *v < 0.0));
    }

    #[test]
    fn budget_must_cover_two_classes() {
        let cfg = GenerateConfig { per_class: 10, budget: 19, ..Default::default() };
        let r = generate_labeled(&gaussian_score(0.0, 1.0, 2), &NoiseSchedule::default(), &OracleSpec::checkerboard(), &cfg);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = LabeledSet {
            positives: ndarray::array![[0.1, 0.2], [0.3, 0.4]],
            negatives: ndarray::array![[-0.1, 1.0 / 3.0], [5.0, 6.0]],
            raw_positives: 30,
            raw_negatives: 2,
            alpha: 30.0 / 32.0,
            samples_used: 32,
        };
        set.save(dir.path()).unwrap();
        assert_eq!(LabeledSet::load(dir.path()).unwrap(), set);
        assert!(matches!(LabeledSet::load(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }
}
