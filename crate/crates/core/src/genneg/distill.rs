use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::data::Dataset;
use crate::diffusion::train::{minibatch, validation_score};
use crate::diffusion::{
    LossWeighting, NoisedBatch, ScoreFn, ScoreModel, TimeSampling, TrainConfig, TrainLogEntry, TrainOutcome,
    DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::numkit::{AdamConfig, AdamState, NetParams};
use crate::seed::derived_rng;

fn check(teacher: &dyn ScoreFn, student: &ScoreModel, batch: &NoisedBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("distillation loss needs a nonempty batch".into()));
    }
    if teacher.dim() != student.dim() {
        return Err(Error::Config(format!(
            "teacher dimension {} does not match student dimension {}",
            teacher.dim(),
            student.dim()
        )));
    }
    Ok(())
}

/// `mean_i gamma(sigma_i) |s_teacher(x_i) - s_student(x_i)|^2` over the
/// noised points of a fixed batch.
pub fn distill_loss_at(
    teacher: &dyn ScoreFn,
    student: &ScoreModel,
    batch: &NoisedBatch,
    weighting: &LossWeighting,
) -> Result<f64> {
    check(teacher, student, batch)?;
    let xt = batch.noised();
    let st = teacher.score(xt.view(), &batch.sigmas)?;
    let ss = student.score(xt.view(), &batch.sigmas)?;
    let mut total = 0.0;
    for ((a, b), &s) in st.rows().into_iter().zip(ss.rows()).zip(&batch.sigmas) {
        let err: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        total += weighting.gamma(s, student.sigma_data) * err;
    }
    Ok(total / batch.len() as f64)
}

/// Monte Carlo distillation loss on clean points `x0`, drawing fresh noise.
pub fn distill_loss<R: Rng + ?Sized>(
    teacher: &dyn ScoreFn,
    student: &ScoreModel,
    x0: ArrayView2<f64>,
    sampling: &TimeSampling,
    weighting: &LossWeighting,
    rng: &mut R,
) -> Result<f64> {
    let batch = NoisedBatch::draw(x0.to_owned(), sampling, &student.schedule, rng);
    distill_loss_at(teacher, student, &batch, weighting)
}

/// Loss and student parameter gradient of [`distill_loss_at`].
pub fn distill_loss_grad(
    teacher: &dyn ScoreFn,
    student: &ScoreModel,
    batch: &NoisedBatch,
    weighting: &LossWeighting,
) -> Result<(f64, NetParams)> {
    check(teacher, student, batch)?;
    let xt = batch.noised();
    let target = teacher.score(xt.view(), &batch.sigmas)?;
    distill_grad_against(student, &xt, &target, batch, weighting)
}

fn distill_grad_against(
    student: &ScoreModel,
    xt: &Array2<f64>,
    target: &Array2<f64>,
    batch: &NoisedBatch,
    weighting: &LossWeighting,
) -> Result<(f64, NetParams)> {
    let (d, cache, precond) = student.denoise_cached(xt.view(), &batch.sigmas)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Array2::zeros(d.raw_dim());
    for i in 0..d.nrows() {
        let s = batch.sigmas[i];
        let s2 = s * s;
        let w = weighting.gamma(s, student.sigma_data);
        for j in 0..d.ncols() {
            // student score (D - x) / sigma^2; D depends on the net through c_out
            let r = (d[[i, j]] - xt[[i, j]]) / s2 - target[[i, j]];
            loss += w * r * r;
            upstream[[i, j]] = 2.0 * w * r * precond[i].c_out / (s2 * n);
        }
    }
    let back = student.net.backward(&cache, upstream.view(), true)?;
    Ok((loss / n, back.grads.expect("requested")))
}

const STREAM_BATCH: u64 = 1;

/// Regresses `student` (usually a copy of the teacher's baseline) onto the
/// teacher's score at noised training points. Keeps the best validation
/// r-ELBO when `cfg.keep_best` is set; aborts on a non-finite loss.
pub fn distill(
    teacher: &dyn ScoreFn,
    student: ScoreModel,
    train: &Dataset,
    validation: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<ScoreModel>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("distillation needs training points".into()));
    }
    let mut model = student;
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            model,
            log: Vec::new(),
            selected_iteration: 0,
        });
    }
    let use_validation = !validation.is_empty() && cfg.validation_draws > 0;
    let mut best = if use_validation {
        Some((validation_score(&model, validation, cfg, DEFAULT_STEPS)?, 0, model.net.clone()))
    } else {
        None
    };
    let mut opt = AdamState::new(&model.net, AdamConfig::with_lr(cfg.learning_rate));
    let mut rng = derived_rng(cfg.seed, &[STREAM_BATCH]);
    let mut log = Vec::new();
    for it in 1..=cfg.iterations {
        let x0 = minibatch(train.view(), cfg.batch_size, &mut rng);
        let batch = NoisedBatch::draw(x0, &cfg.time_sampling, &model.schedule, &mut rng);
        let (loss, grads) = distill_loss_grad(teacher, &model, &batch, &cfg.weighting)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("distillation iteration {it}"), format!("loss diverged to {loss}")));
        }
        opt.step(&mut model.net, &grads)?;
        if it % cfg.validate_every == 0 || it == cfg.iterations {
            let v = if use_validation {
                let v = validation_score(&model, validation, cfg, DEFAULT_STEPS)?;
                if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                    best = Some((v, it, model.net.clone()));
                }
                Some(v)
            } else {
                None
            };
            log::info!("distill iter {it}: loss {loss:.5} validation {v:?}");
            log.push(TrainLogEntry {
                iteration: it,
                train_loss: loss,
                validation: v,
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
