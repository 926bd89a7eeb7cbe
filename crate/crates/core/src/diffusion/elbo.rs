//! Monte Carlo variational bounds on log density.
//!
//! For the VE process the continuous-time bound per data point is
//!
//! ```text
//! log p(x0) >= -|x0|^2 / (2 s_max^2) - d/2 ln(2 pi s_min^2) - d/2
//!              - int_{s_min}^{s_max} s E|s_theta(x_s) + eps / s|^2 ds
//! ```
//!
//! The prior cross-entropy at `s_max` and the irreducible part of the score
//! matching integral are folded into the closed-form terms. Drawing `ln s`
//! uniformly turns the integral into `L E|s s_theta + eps|^2` with
//! `L = ln(s_max / s_min)`.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::ScoreFn;
use crate::error::{Error, Result};
use crate::seed::derived_rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElboWeighting {
    /// Continuous-time bound with `gamma = g^2 / 2`; a true lower bound.
    #[default]
    Likelihood,
    /// Unit weight on the sampling grid ("r-ELBO"); comparative only.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboConfig {
    pub weighting: ElboWeighting,
    pub draws: usize,
    /// Grid used by the uniform weighting.
    pub grid_steps: usize,
    pub seed: u64,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            weighting: ElboWeighting::Likelihood,
            draws: 10_000,
            grid_steps: super::sampler::DEFAULT_STEPS,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    /// Average bound per data point, in nats.
    pub estimate: f64,
    pub stderr: f64,
    pub draws: usize,
}

const CHUNK: usize = 4096;

/// Estimates the average bound over `data` with `cfg.draws` draws. Draw `j`
/// uses data row `j mod n`, so each point is visited evenly.
pub fn elbo<S: ScoreFn + ?Sized>(
    score: &S,
    data: ArrayView2<f64>,
    schedule: &NoiseSchedule,
    cfg: &ElboConfig,
) -> Result<ElboEstimate> {
    if cfg.draws < 2 {
        return Err(Error::Config(format!(
            "standard error needs at least 2 Monte Carlo draws, got {}",
            cfg.draws
        )));
    }
    if data.nrows() == 0 {
        return Err(Error::Contract("ELBO needs a nonempty dataset".into()));
    }
    if data.ncols() != score.dim() {
        return Err(Error::Config(format!(
            "data dimension {} does not match score dimension {}",
            data.ncols(),
            score.dim()
        )));
    }
    schedule.validate()?;
    let grid = match cfg.weighting {
        ElboWeighting::Uniform => schedule.sampling_grid(cfg.grid_steps)?,
        ElboWeighting::Likelihood => Vec::new(),
    };
    let d = data.ncols() as f64;
    let (lo, hi) = (schedule.sigma_min, schedule.sigma_max);
    let span = schedule.log_span();
    let constant = -0.5 * d * (2.0 * PI * lo * lo).ln() - 0.5 * d;

    let n_chunks = cfg.draws.div_ceil(CHUNK);
    let values: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let start = k * CHUNK;
            let rows = CHUNK.min(cfg.draws - start);
            let mut rng = derived_rng(cfg.seed, &[k as u64]);
            let idx: Vec<usize> = (start..start + rows).map(|j| j % data.nrows()).collect();
            let x0 = data.select(Axis(0), &idx);
            let sigmas: Vec<f64> = (0..rows)
                .map(|_| match cfg.weighting {
                    ElboWeighting::Likelihood => (lo.ln() + rng.random::<f64>() * span).exp(),
                    ElboWeighting::Uniform => grid[rng.random_range(0..grid.len())],
                })
                .collect();
            let eps = Array2::from_shape_simple_fn(x0.raw_dim(), || StandardNormal.sample(&mut rng));
            let mut xt = eps.clone();
            for ((mut r, x), &s) in xt.rows_mut().into_iter().zip(x0.rows()).zip(&sigmas) {
                r.zip_mut_with(&x, |e, &c| *e = c + s * *e);
            }
            let sc = score.score(xt.view(), &sigmas)?;
            Ok((0..rows)
                .map(|i| {
                    let s = sigmas[i];
                    let mismatch: f64 = sc.row(i).iter().zip(eps.row(i)).map(|(a, e)| (s * a + e).powi(2)).sum();
                    let prior = x0.row(i).dot(&x0.row(i)) / (2.0 * hi * hi);
                    constant - prior - span * mismatch
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let all: Vec<f64> = values.into_iter().flatten().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !mean.is_finite() {
        return Err(Error::numerical("ELBO estimate", format!("average is {mean}")));
    }
    Ok(ElboEstimate {
        estimate: mean,
        stderr: (var / n).sqrt(),
        draws: all.len(),
    })
}
