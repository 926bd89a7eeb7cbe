//! Denoising score matching and baseline training.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::elbo::{elbo, ElboConfig, ElboWeighting};
use super::model::ScoreModel;
use super::schedule::NoiseSchedule;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numkit::{AdamConfig, AdamState, NetParams};
use crate::seed::{derived_rng, Rng as SeededRng};

/// Distribution of training noise levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampling {
    /// `ln sigma ~ N(mean, std^2)`, clamped to the schedule.
    LogNormal { mean: f64, std: f64 },
    /// `ln sigma` uniform over the schedule.
    LogUniform,
}

impl Default for TimeSampling {
    fn default() -> Self {
        TimeSampling::LogNormal { mean: -1.2, std: 1.2 }
    }
}

impl TimeSampling {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, schedule: &NoiseSchedule) -> f64 {
        let s = match *self {
            TimeSampling::LogNormal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                (mean + std * z).exp()
            }
            TimeSampling::LogUniform => {
                let u: f64 = rng.random();
                (schedule.sigma_min.ln() + u * schedule.log_span()).exp()
            }
        };
        s.clamp(schedule.sigma_min, schedule.sigma_max)
    }
}

/// Weight `gamma_t` multiplying the squared score error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossWeighting {
    /// EDM weighting `(sigma^2 + sd^2) / (sigma sd)^2` on the denoiser error,
    /// i.e. `sigma^2 (sigma^2 + sd^2) / sd^2` on the score error.
    #[default]
    Edm,
    /// `g(t)^2 / 2 = sigma`.
    Likelihood,
    /// A fixed weight on the score error.
    Constant { value: f64 },
}

impl LossWeighting {
    pub fn gamma(&self, sigma: f64, sigma_data: f64) -> f64 {
        match *self {
            LossWeighting::Edm => sigma * sigma * (sigma * sigma + sigma_data * sigma_data) / (sigma_data * sigma_data),
            LossWeighting::Likelihood => sigma,
            LossWeighting::Constant { value } => value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub time_sampling: TimeSampling,
    pub weighting: LossWeighting,
    /// Evaluate the validation metric every this many iterations.
    pub validate_every: usize,
    /// Monte Carlo draws used by each validation evaluation.
    pub validation_draws: usize,
    /// Return the best-validation parameters instead of the last ones.
    pub keep_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl TrainConfig {
    /// 30k full-batch iterations at lr 3e-4, validated every 1000.
    pub fn baseline() -> Self {
        Self {
            iterations: 30_000,
            batch_size: 1000,
            learning_rate: 3e-4,
            time_sampling: TimeSampling::default(),
            weighting: LossWeighting::Edm,
            validate_every: 1000,
            validation_draws: 10_000,
            keep_best: true,
            seed: 0,
        }
    }

    /// 20k iterations, batch 8192, lr 3e-3.
    pub fn classifier() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 8192,
            learning_rate: 3e-3,
            validate_every: 1000,
            validation_draws: 0,
            ..Self::baseline()
        }
    }

    /// 250k iterations, batch 1000, lr 3e-4.
    pub fn distillation() -> Self {
        Self {
            iterations: 250_000,
            batch_size: 1000,
            learning_rate: 3e-4,
            validate_every: 10_000,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validation cadence must be positive".into()));
        }
        if let LossWeighting::Constant { value } = self.weighting {
            if !(value > 0.0) {
                return Err(Error::Config("loss weight must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Clean points with the noise draws that perturb them:
/// `x_t = x0 + sigma * eps` row by row.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub x0: Array2<f64>,
    pub sigmas: Vec<f64>,
    pub eps: Array2<f64>,
}

impl NoisedBatch {
    pub fn draw<R: Rng + ?Sized>(x0: Array2<f64>, sampling: &TimeSampling, schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let n = x0.nrows();
        let sigmas = (0..n).map(|_| sampling.sample(rng, schedule)).collect();
        let eps = Array2::from_shape_simple_fn(x0.raw_dim(), || StandardNormal.sample(rng));
        Self { x0, sigmas, eps }
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.nrows() == 0
    }

    pub fn noised(&self) -> Array2<f64> {
        let mut x = self.eps.clone();
        for ((mut row, x0), &s) in x.rows_mut().into_iter().zip(self.x0.rows()).zip(&self.sigmas) {
            row.zip_mut_with(&x0, |e, &c| *e = c + s * *e);
        }
        x
    }

    /// Subset by row indices.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x0: self.x0.select(Axis(0), idx),
            sigmas: idx.iter().map(|&i| self.sigmas[i]).collect(),
            eps: self.eps.select(Axis(0), idx),
        }
    }
}

/// Weighted squared score error averaged over a fixed batch of draws.
pub fn dsm_loss_at(model: &ScoreModel, batch: &NoisedBatch, weighting: &LossWeighting) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("score matching loss needs a nonempty batch".into()));
    }
    let xt = batch.noised();
    let d = model.denoise(xt.view(), &batch.sigmas)?;
    let mut total = 0.0;
    for ((drow, x0), &s) in d.rows().into_iter().zip(batch.x0.rows()).zip(&batch.sigmas) {
        // s_theta - grad log q(x_t | x0) = (D - x0) / sigma^2
        let err: f64 = drow.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
        total += weighting.gamma(s, model.sigma_data) * err / s.powi(4);
    }
    Ok(total / batch.len() as f64)
}

/// Monte Carlo score matching loss with fresh noise levels and noise.
pub fn dsm_loss<R: Rng + ?Sized>(
    model: &ScoreModel,
    x0: ArrayView2<f64>,
    sampling: &TimeSampling,
    weighting: &LossWeighting,
    rng: &mut R,
) -> Result<f64> {
    let batch = NoisedBatch::draw(x0.to_owned(), sampling, &model.schedule, rng);
    dsm_loss_at(model, &batch, weighting)
}

/// Loss and parameter gradient of [`dsm_loss_at`].
pub fn dsm_loss_grad(model: &ScoreModel, batch: &NoisedBatch, weighting: &LossWeighting) -> Result<(f64, NetParams)> {
    if batch.is_empty() {
        return Err(Error::Contract("score matching loss needs a nonempty batch".into()));
    }
    let xt = batch.noised();
    let (d, cache, precond) = model.denoise_cached(xt.view(), &batch.sigmas)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Array2::zeros(d.raw_dim());
    for (i, ((drow, x0), &s)) in d.rows().into_iter().zip(batch.x0.rows()).zip(&batch.sigmas).enumerate() {
        let w = weighting.gamma(s, model.sigma_data) / s.powi(4);
        let mut up = upstream.row_mut(i);
        for j in 0..drow.len() {
            let r = drow[j] - x0[j];
            loss += w * r * r;
            up[j] = 2.0 * w * r * precond[i].c_out / n;
        }
    }
    let back = model.net.backward(&cache, upstream.view(), true)?;
    Ok((loss / n, back.grads.expect("requested")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub train_loss: f64,
    /// Validation r-ELBO when evaluated at this iteration.
    pub validation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<TrainLogEntry>,
    /// Iteration whose parameters were returned.
    pub selected_iteration: usize,
}

pub(crate) fn minibatch(data: ArrayView2<f64>, batch: usize, rng: &mut SeededRng) -> Array2<f64> {
    if batch >= data.nrows() {
        data.to_owned()
    } else {
        let idx = sample_indices(rng, data.nrows(), batch).into_vec();
        data.select(Axis(0), &idx)
    }
}

const STREAM_BATCH: u64 = 1;
const STREAM_VALIDATION: u64 = 2;

/// Validation metric used for early stopping: r-ELBO on the held-out split
/// with common random numbers across evaluations.
pub(crate) fn validation_score(model: &ScoreModel, validation: &Dataset, cfg: &TrainConfig, steps: usize) -> Result<f64> {
    let draws = cfg.validation_draws.max(2);
    let ec = ElboConfig {
        weighting: ElboWeighting::Uniform,
        draws,
        grid_steps: steps,
        seed: crate::seed::derive_seed(cfg.seed, &[STREAM_VALIDATION]),
    };
    Ok(elbo(model, validation.view(), &model.schedule, &ec)?.estimate)
}

/// Trains `initial` on `train` by score matching, keeping the parameters with
/// the best validation r-ELBO when `cfg.keep_best` is set.
pub fn train_baseline(
    initial: ScoreModel,
    train: &Dataset,
    validation: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<ScoreModel>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if train.dim() != initial.dim() {
        return Err(Error::Config(format!(
            "data dimension {} does not match model dimension {}",
            train.dim(),
            initial.dim()
        )));
    }
    let mut model = initial;
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            model,
            log: Vec::new(),
            selected_iteration: 0,
        });
    }
    let steps = super::sampler::DEFAULT_STEPS;
    let use_validation = !validation.is_empty() && cfg.validation_draws > 0;
    let mut opt = AdamState::new(&model.net, AdamConfig::with_lr(cfg.learning_rate));
    let mut rng = derived_rng(cfg.seed, &[STREAM_BATCH]);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, NetParams)> = None;

    if use_validation {
        let v = validation_score(&model, validation, cfg, steps)?;
        best = Some((v, 0, model.net.clone()));
    }

    for it in 1..=cfg.iterations {
        let x0 = minibatch(train.view(), cfg.batch_size, &mut rng);
        let batch = NoisedBatch::draw(x0, &cfg.time_sampling, &model.schedule, &mut rng);
        let (loss, grads) = dsm_loss_grad(&model, &batch, &cfg.weighting)
            .map_err(|e| Error::numerical(format!("baseline iteration {it}"), e.to_string()))?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("baseline iteration {it}"), format!("loss diverged to {loss}")));
        }
        opt.step(&mut model.net, &grads)?;

        if it % cfg.validate_every == 0 || it == cfg.iterations {
            let validation_value = if use_validation {
                let v = validation_score(&model, validation, cfg, steps)?;
                if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                    best = Some((v, it, model.net.clone()));
                }
                Some(v)
            } else {
                None
            };
            log::info!("baseline iter {it}: loss {loss:.5} validation {validation_value:?}");
            log.push(TrainLogEntry {
                iteration: it,
                train_loss: loss,
                validation: validation_value,
            });
        }
    }

    let mut selected = cfg.iterations;
    if let (true, Some((_, it, net))) = (cfg.keep_best, best) {
        model.net = net;
        selected = it;
    }
    Ok(TrainOutcome {
        model,
        log,
        selected_iteration: selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::numkit::{Linear, NetConfig};
    use crate::seed::rng_from;
    use ndarray::array;

    fn tiny_model(seed: u64) -> ScoreModel {
        let cfg = NetConfig::new(2, 2).with_hidden(16).with_embed(8);
        ScoreModel::init(cfg, NoiseSchedule::default(), seed).unwrap()
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut rng = rng_from(1);
        let mut m = tiny_model(3);
        m.net.output = Linear::uniform(16, 2, &mut rng);
        let x0 = array![[0.5, 0.5], [-1.0, 1.5]];
        for _ in 0..20 {
            let l = dsm_loss(&m, x0.view(), &TimeSampling::default(), &LossWeighting::Edm, &mut rng).unwrap();
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn single_term_by_hand() {
        let m = tiny_model(4); // zero output layer: D = c_skip x_t
        let batch = NoisedBatch {
            x0: array![[1.0, -1.0]],
            sigmas: vec![0.5],
            eps: array![[0.2, 0.4]],
        };
        let xt: [f64; 2] = [1.0 + 0.5 * 0.2, -1.0 + 0.5 * 0.4];
        let c_skip = 0.25 / 0.5;
        let s = [(c_skip * xt[0] - xt[0]) / 0.25, (c_skip * xt[1] - xt[1]) / 0.25];
        let cond = [-(xt[0] - 1.0) / 0.25, -(xt[1] + 1.0) / 0.25];
        let gamma = 0.25 * (0.25 + 0.25) / 0.25;
        let want = gamma * ((s[0] - cond[0]).powi(2) + (s[1] - cond[1]).powi(2));
        let got = dsm_loss_at(&m, &batch, &LossWeighting::Edm).unwrap();
        assert!((got - want).abs() < 1e-12 * want);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = rng_from(8);
        let mut m = tiny_model(9);
        m.net.output = Linear::uniform(16, 2, &mut rng);
        let batch = NoisedBatch::draw(array![[0.5, -0.5], [1.2, 0.3], [-1.0, -1.0]], &TimeSampling::default(), &m.schedule, &mut rng);
        let (_, g) = dsm_loss_grad(&m, &batch, &LossWeighting::Edm).unwrap();
        let flat = g.to_flat();
        let h = 1e-4;
        for _ in 0..30 {
            let i = rng.random_range(0..flat.len());
            let mut p = m.clone();
            *p.net.flat_mut(i).unwrap() += h;
            let mut q = m.clone();
            *q.net.flat_mut(i).unwrap() -= h;
            let fd = (dsm_loss_at(&p, &batch, &LossWeighting::Edm).unwrap()
                - dsm_loss_at(&q, &batch, &LossWeighting::Edm).unwrap())
                / (2.0 * h);
            let rel = (fd - flat[i]).abs() / fd.abs().max(flat[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: {fd} vs {}", flat[i]);
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let m = tiny_model(2);
        let d = Dataset::new(array![[0.5, 0.5]], Split::Train);
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::baseline()
        };
        let out = train_baseline(m.clone(), &d, &d, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.log.is_empty());
    }

    #[test]
    fn empty_batch_is_contract_error() {
        let m = tiny_model(2);
        let batch = NoisedBatch {
            x0: Array2::zeros((0, 2)),
            sigmas: vec![],
            eps: Array2::zeros((0, 2)),
        };
        assert!(matches!(dsm_loss_at(&m, &batch, &LossWeighting::Edm), Err(Error::Contract(_))));
    }

    #[test]
    fn log_normal_sampling_is_clamped() {
        let s = NoiseSchedule::default();
        let wide = TimeSampling::LogNormal { mean: 0.0, std: 50.0 };
        let mut rng = rng_from(3);
        for _ in 0..1000 {
            let t = wide.sample(&mut rng, &s);
            assert!(s.contains(t));
        }
    }
}
