//! The iterative loop: sample from the current model, label with the oracle,
//! balance, train a classifier with the importance-sampled loss, then stack
//! it onto the model (or distill the stack into a single network).

pub mod distill;
pub mod run;

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diffusion::{
    elbo, sample_reverse, ElboConfig, ElboEstimate, ElboWeighting, NoiseSchedule, OutputScaling, SamplerConfig, ScoreFn, ScoreModel,
    TrainConfig, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::guidance::{
    train_classifier_on, ClassifierConfig, GenerateConfig, GuidedModel, ImbalanceMode, LabeledSet,
    TimeClassifier, CLASSIFIER_KIND,
};
use crate::numkit::NetConfig;
use crate::oracle::{infraction_rate, InfractionRate, OracleSpec};
use crate::seed::derive_seed;

pub use crate::guidance::generate_labeled;
pub use distill::{distill, distill_loss, distill_loss_at, distill_loss_grad};
pub use run::{run, RunOutcome, Termination, METRICS_SCHEMA_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples: usize,
    pub elbo_draws: usize,
    pub steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            elbo_draws: 10_000,
            steps: DEFAULT_STEPS,
        }
    }
}

/// Infraction and both bound variants, each with a standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub infraction: InfractionRate,
    pub r_elbo: ElboEstimate,
    pub likelihood_elbo: ElboEstimate,
}

const STREAM_EVAL_SAMPLES: u64 = 1;
const STREAM_EVAL_ELBO: u64 = 2;

/// Draws `cfg.samples` points from `model` and scores it against `oracle` and
/// the held-out split. Returns the samples too.
pub fn evaluate<S: ScoreFn + ?Sized>(
    model: &S,
    schedule: &NoiseSchedule,
    oracle: &OracleSpec,
    validation: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(Metrics, Array2<f64>)> {
    if cfg.samples == 0 {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    if validation.is_empty() {
        return Err(Error::Contract("evaluation needs a nonempty validation split".into()));
    }
    let x = sample_reverse(
        model,
        schedule,
        cfg.samples,
        SamplerConfig {
            steps: cfg.steps,
            seed: derive_seed(seed, &[STREAM_EVAL_SAMPLES]),
        },
    )?;
    let infraction = infraction_rate(x.view(), oracle)?;
    let bound = |weighting| {
        elbo(
            model,
            validation.view(),
            schedule,
            &ElboConfig {
                weighting,
                draws: cfg.elbo_draws,
                grid_steps: cfg.steps,
                seed: derive_seed(seed, &[STREAM_EVAL_ELBO]),
            },
        )
    };
    let metrics = Metrics {
        infraction,
        r_elbo: bound(ElboWeighting::Uniform)?,
        likelihood_elbo: bound(ElboWeighting::Likelihood)?,
    };
    Ok((metrics, x))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Balanced points per class in each labeled set.
    pub per_class: usize,
    pub max_iterations: usize,
    /// Generator draws allowed per iteration; `None` means 20 x `per_class`.
    pub budget: Option<usize>,
    /// Draws per sampling round while filling the labeled set.
    pub sample_batch: usize,
    pub sampler_steps: usize,
    /// Replace the stack by a distilled student after each iteration.
    pub distill: bool,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Output scale of the baseline denoiser.
    pub output_scaling: OutputScaling,
    pub baseline: TrainConfig,
    pub classifier: ClassifierConfig,
    pub distillation: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            per_class: 50_000,
            max_iterations: 5,
            budget: None,
            sample_batch: 16_384,
            sampler_steps: DEFAULT_STEPS,
            distill: false,
            hidden: crate::numkit::DEFAULT_HIDDEN,
            embed_dim: crate::numkit::DEFAULT_EMBED,
            output_scaling: OutputScaling::Sigma,
            baseline: TrainConfig::baseline(),
            classifier: ClassifierConfig::default(),
            distillation: TrainConfig::distillation(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn budget(&self) -> usize {
        self.budget.unwrap_or(20 * self.per_class)
    }

    pub fn mode_label(&self) -> &'static str {
        match (self.classifier.mode, self.distill) {
            (ImbalanceMode::ImportanceSampling, false) => "is",
            (ImbalanceMode::ImportanceSampling, true) => "is_distill",
            (ImbalanceMode::Uncorrected, false) => "no_is",
            (ImbalanceMode::Uncorrected, true) => "no_is_distill",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::Config("per-class target must be positive".into()));
        }
        if self.budget() < 2 * self.per_class {
            return Err(Error::Config(format!(
                "per-iteration budget {} cannot fill two classes of {}",
                self.budget(),
                self.per_class
            )));
        }
        if self.sample_batch == 0 || self.sampler_steps == 0 {
            return Err(Error::Config("sampling round size and step count must be positive".into()));
        }
        if self.eval.samples == 0 || self.eval.elbo_draws < 2 {
            return Err(Error::Config("evaluation needs samples and at least two bound draws".into()));
        }
        self.baseline.validate()?;
        self.classifier.train.validate()?;
        self.distillation.validate()?;
        NetConfig::new(2, 2).with_hidden(self.hidden).with_embed(self.embed_dim).validate()
    }

    /// Zero-output-layer baseline network for `dim`-dimensional data.
    pub fn initial_model(&self, dim: usize, schedule: NoiseSchedule) -> Result<ScoreModel> {
        let net = NetConfig::new(dim, dim).with_hidden(self.hidden).with_embed(self.embed_dim);
        let mut m = ScoreModel::init(net, schedule, derive_seed(self.seed, &[STREAM_BASELINE, 0]))?;
        m.output_scaling = self.output_scaling;
        Ok(m)
    }

    pub fn baseline_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &[STREAM_BASELINE, 1]),
            ..self.baseline.clone()
        }
    }
}

pub(crate) const STREAM_BASELINE: u64 = 1;
const STREAM_ITERATION: u64 = 2;
const PHASE_GENERATE: u64 = 1;
const PHASE_CLASSIFIER: u64 = 2;
const PHASE_DISTILL: u64 = 3;
const PHASE_EVAL: u64 = 4;
pub(crate) const PHASE_BASELINE_EVAL: u64 = 5;

pub(crate) fn phase_seed(seed: u64, iteration: usize, phase: u64) -> u64 {
    derive_seed(seed, &[STREAM_ITERATION, iteration as u64, phase])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mode: String,
    pub raw_positives: usize,
    pub raw_negatives: usize,
    pub alpha: f64,
    /// Prior the loss actually used (0.5 without importance sampling).
    pub alpha_used: f64,
    /// SHA-256 of the classifier checkpoint trained this iteration.
    pub classifier_sha256: String,
    pub classifier_selected_iteration: usize,
    pub depth: usize,
    pub metrics: Metrics,
    /// Teacher metrics when the stack was distilled this iteration.
    pub teacher_metrics: Option<Metrics>,
    pub samples_used: usize,
    pub budget: usize,
    pub wall_seconds: f64,
}

impl IterationRecord {
    /// Copy with timing cleared, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Everything one iteration produced.
#[derive(Clone, Debug)]
pub struct IterationOutput {
    pub model: GuidedModel,
    pub record: IterationRecord,
    pub labeled: LabeledSet,
    pub classifier: TimeClassifier,
    pub student: Option<ScoreModel>,
    /// Samples drawn for evaluation of the new model.
    pub samples: Array2<f64>,
}

/// One pass of the loop on `state`. `train` is only touched by
/// distillation; classifiers see synthetic samples alone.
pub fn genneg_iterate(
    state: GuidedModel,
    train: &Dataset,
    validation: &Dataset,
    oracle: &OracleSpec,
    cfg: &RunConfig,
    iteration: usize,
) -> Result<IterationOutput> {
    let started = Instant::now();
    let schedule = state.baseline.schedule;
    let generate = GenerateConfig {
        per_class: cfg.per_class,
        budget: cfg.budget(),
        batch: cfg.sample_batch,
        steps: cfg.sampler_steps,
        seed: phase_seed(cfg.seed, iteration, PHASE_GENERATE),
    };
    let labeled = generate_labeled(&state, &schedule, oracle, &generate)?;
    log::info!(
        "iteration {iteration}: {} positive / {} negative raw, alpha {:.5}",
        labeled.raw_positives,
        labeled.raw_negatives,
        labeled.alpha
    );
    let ccfg = ClassifierConfig {
        train: TrainConfig {
            seed: phase_seed(cfg.seed, iteration, PHASE_CLASSIFIER),
            ..cfg.classifier.train.clone()
        },
        ..cfg.classifier.clone()
    };
    let trained = train_classifier_on(&labeled, &schedule, &ccfg)?;
    let classifier = trained.classifier;
    let classifier_sha256 = crate::io::checkpoint_hash(CLASSIFIER_KIND, &classifier)?;

    let mut teacher = state;
    teacher.push(classifier.clone())?;
    let eval_seed = phase_seed(cfg.seed, iteration, PHASE_EVAL);

    let (model, student, metrics, teacher_metrics, samples) = if cfg.distill {
        let (tm, _) = evaluate(&teacher, &schedule, oracle, validation, &cfg.eval, eval_seed)?;
        let dcfg = TrainConfig {
            seed: phase_seed(cfg.seed, iteration, PHASE_DISTILL),
            ..cfg.distillation.clone()
        };
        let out = distill(&teacher, teacher.baseline.clone(), train, validation, &dcfg)?;
        let next = GuidedModel::new(out.model.clone());
        let (sm, samples) = evaluate(&next, &schedule, oracle, validation, &cfg.eval, eval_seed)?;
        (next, Some(out.model), sm, Some(tm), samples)
    } else {
        let (m, samples) = evaluate(&teacher, &schedule, oracle, validation, &cfg.eval, eval_seed)?;
        (teacher, None, m, None, samples)
    };
    log::info!(
        "iteration {iteration}: infraction {:.4} +- {:.4}, r-ELBO {:.4}",
        metrics.infraction.rate,
        metrics.infraction.stderr,
        metrics.r_elbo.estimate
    );
    let record = IterationRecord {
        iteration,
        mode: cfg.mode_label().into(),
        raw_positives: labeled.raw_positives,
        raw_negatives: labeled.raw_negatives,
        alpha: labeled.alpha,
        alpha_used: trained.alpha_used,
        classifier_sha256,
        classifier_selected_iteration: trained.selected_iteration,
        depth: model.depth(),
        metrics,
        teacher_metrics,
        samples_used: labeled.samples_used,
        budget: cfg.budget(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(IterationOutput {
        model,
        record,
        labeled,
        classifier,
        student,
        samples,
    })
}
