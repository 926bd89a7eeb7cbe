use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::ScoreFn;
use crate::error::{Error, Result};
use crate::numkit::net::ForwardCache;
use crate::numkit::{embed_batch, NetConfig, NetParams};
use crate::seed::rng_from;

pub const DEFAULT_SIGMA_DATA: f64 = 0.5;

/// Output scale applied to the raw network in the denoiser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputScaling {
    /// `c_out = sigma`.
    #[default]
    Sigma,
    /// `c_out = sigma * sigma_data / sqrt(sigma^2 + sigma_data^2)`.
    Edm,
}

/// Per-noise-level coefficients of
/// `D(x; sigma) = c_skip x + c_out F(c_in x; c_noise)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Preconditioning {
    pub fn new(sigma: f64, sigma_data: f64, scaling: OutputScaling) -> Self {
        let total = sigma * sigma + sigma_data * sigma_data;
        let c_out = match scaling {
            OutputScaling::Sigma => sigma,
            OutputScaling::Edm => sigma * sigma_data / total.sqrt(),
        };
        Self {
            c_skip: sigma_data * sigma_data / total,
            c_out,
            c_in: 1.0 / total.sqrt(),
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// Network inputs for a batch: scaled points, time embeddings and the
/// coefficients used to build them.
pub(crate) struct NetInputs {
    pub scaled: Array2<f64>,
    pub temb: Array2<f64>,
    pub precond: Vec<Preconditioning>,
}

pub(crate) fn network_inputs(
    x: ArrayView2<f64>,
    sigmas: &[f64],
    sigma_data: f64,
    scaling: OutputScaling,
    embed_dim: usize,
) -> Result<NetInputs> {
    if x.nrows() != sigmas.len() {
        return Err(Error::Config(format!(
            "{} points but {} noise levels",
            x.nrows(),
            sigmas.len()
        )));
    }
    if let Some(&bad) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("noise level must be positive and finite, got {bad}")));
    }
    let precond: Vec<_> = sigmas
        .iter()
        .map(|&s| Preconditioning::new(s, sigma_data, scaling))
        .collect();
    let mut scaled = x.to_owned();
    for (mut row, p) in scaled.rows_mut().into_iter().zip(&precond) {
        row *= p.c_in;
    }
    let noise: Vec<f64> = precond.iter().map(|p| p.c_noise).collect();
    let temb = embed_batch(&noise, embed_dim)?;
    Ok(NetInputs { scaled, temb, precond })
}

/// Preconditioned denoising network and the score it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub net: NetParams,
    pub sigma_data: f64,
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub output_scaling: OutputScaling,
}

pub const SCORE_MODEL_KIND: &str = "score_model";

impl ScoreModel {
    pub fn new(net: NetParams, schedule: NoiseSchedule) -> Result<Self> {
        let m = Self {
            net,
            sigma_data: DEFAULT_SIGMA_DATA,
            schedule,
            output_scaling: OutputScaling::Sigma,
        };
        m.validate()?;
        Ok(m)
    }

    /// Fresh model with seeded initialization.
    pub fn init(config: NetConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let net = NetParams::init(config, &mut rng_from(seed))?;
        Self::new(net, schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::Config(format!("sigma_data must be positive, got {}", self.sigma_data)));
        }
        let c = self.net.config();
        if c.input_dim != c.output_dim {
            return Err(Error::Config(format!(
                "score network must map R^{0} to R^{0}, got {1} -> {2}",
                c.input_dim, c.input_dim, c.output_dim
            )));
        }
        self.schedule.validate()
    }

    pub fn dim(&self) -> usize {
        self.net.config().input_dim
    }

    pub(crate) fn inputs(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<NetInputs> {
        if x.ncols() != self.dim() {
            return Err(Error::Config(format!(
                "points have dimension {}, model expects {}",
                x.ncols(),
                self.dim()
            )));
        }
        network_inputs(
            x,
            sigmas,
            self.sigma_data,
            self.output_scaling,
            self.net.config().embed_dim,
        )
    }

    pub(crate) fn assemble(x: ArrayView2<f64>, f: &Array2<f64>, precond: &[Preconditioning]) -> Array2<f64> {
        let mut d = f.clone();
        for ((mut drow, xrow), p) in d.rows_mut().into_iter().zip(x.rows()).zip(precond) {
            drow.zip_mut_with(&xrow, |dv, &xv| *dv = p.c_skip * xv + p.c_out * *dv);
        }
        d
    }

    /// Denoiser output `D(x; sigma)` for each row.
    pub fn denoise(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        let inp = self.inputs(x, sigmas)?;
        let f = self.net.forward(inp.scaled.view(), inp.temb.view())?;
        Ok(Self::assemble(x, &f, &inp.precond))
    }

    pub(crate) fn denoise_cached(
        &self,
        x: ArrayView2<f64>,
        sigmas: &[f64],
    ) -> Result<(Array2<f64>, ForwardCache, Vec<Preconditioning>)> {
        let inp = self.inputs(x, sigmas)?;
        let (f, cache) = self.net.forward_cached(inp.scaled.view(), inp.temb.view())?;
        Ok((Self::assemble(x, &f, &inp.precond), cache, inp.precond))
    }

    pub fn denoise_one(&self, x: &[f64], t: f64) -> Result<Array1<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Config(e.to_string()))?;
        let sigma = self.schedule.sigma(t);
        Ok(self.denoise(xv, &[sigma])?.row(0).to_owned())
    }

    pub fn score_one(&self, x: &[f64], t: f64) -> Result<Array1<f64>> {
        let d = self.denoise_one(x, t)?;
        Ok(score_from_denoised(ArrayView1::from(x), d.view(), self.schedule.sigma(t)))
    }
}

/// `(D - x) / sigma^2`.
pub fn score_from_denoised(x: ArrayView1<f64>, denoised: ArrayView1<f64>, sigma: f64) -> Array1<f64> {
    (&denoised - &x) / (sigma * sigma)
}

impl ScoreFn for ScoreModel {
    fn dim(&self) -> usize {
        ScoreModel::dim(self)
    }

    fn score(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        let mut d = self.denoise(x, sigmas)?;
        for ((mut drow, xrow), &s) in d.rows_mut().into_iter().zip(x.rows()).zip(sigmas) {
            let inv = 1.0 / (s * s);
            drow.zip_mut_with(&xrow, |dv, &xv| *dv = (*dv - xv) * inv);
        }
        Ok(d)
    }
}
