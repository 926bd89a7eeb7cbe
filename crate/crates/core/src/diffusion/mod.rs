//! Variance-exploding diffusion: schedule, preconditioned score model,
//! score-matching training, reverse sampling and ELBO estimation.

pub mod elbo;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;

use ndarray::{Array2, ArrayView2};

use crate::error::Result;

pub use elbo::{elbo, ElboConfig, ElboEstimate, ElboWeighting};
pub use model::{score_from_denoised, OutputScaling, Preconditioning, ScoreModel, DEFAULT_SIGMA_DATA, SCORE_MODEL_KIND};
pub use sampler::{sample_reverse, SamplerConfig, DEFAULT_STEPS};
pub use schedule::{conditional_score, forward_sample, NoiseSchedule};
pub use train::{dsm_loss, dsm_loss_at, dsm_loss_grad, train_baseline, LossWeighting, NoisedBatch, TimeSampling, TrainConfig, TrainLogEntry, TrainOutcome};

/// A batched score function `s(x, sigma)`, one noise level per row.
pub trait ScoreFn: Sync {
    fn dim(&self) -> usize;
    fn score(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>>;
}

impl<T: ScoreFn + ?Sized> ScoreFn for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        (**self).score(x, sigmas)
    }
}

/// Adapts a closure into a [`ScoreFn`].
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F> FnScore<F>
where
    F: Fn(ArrayView2<f64>, &[f64]) -> Array2<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScoreFn for FnScore<F>
where
    F: Fn(ArrayView2<f64>, &[f64]) -> Array2<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        Ok((self.f)(x, sigmas))
    }
}

/// Exact score of `N(mean, (var + sigma^2) I)`: the diffused law of Gaussian data.
pub fn gaussian_score(mean: f64, var: f64, dim: usize) -> FnScore<impl Fn(ArrayView2<f64>, &[f64]) -> Array2<f64> + Sync> {
    FnScore::new(dim, move |x: ArrayView2<f64>, sigmas: &[f64]| {
        let mut out = x.to_owned();
        for (mut row, &s) in out.rows_mut().into_iter().zip(sigmas) {
            let v = var + s * s;
            row.mapv_inplace(|xv| -(xv - mean) / v);
        }
        out
    })
}

/// The zero score.
pub fn zero_score(dim: usize) -> FnScore<impl Fn(ArrayView2<f64>, &[f64]) -> Array2<f64> + Sync> {
    FnScore::new(dim, |x: ArrayView2<f64>, _: &[f64]| Array2::zeros(x.raw_dim()))
}
