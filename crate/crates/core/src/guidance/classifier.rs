use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::model::{network_inputs, NetInputs, OutputScaling, DEFAULT_SIGMA_DATA};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numkit::net::ForwardCache;
use crate::numkit::{sigmoid, NetConfig, NetParams};
use crate::seed::rng_from;

use super::Guidance;

pub const CLASSIFIER_KIND: &str = "time_classifier";

/// Time-dependent binary classifier `C(x_t; t) = sigmoid(F(c_in x_t; ln sigma / 4))`,
/// sharing the score network's input preconditioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeClassifier {
    pub net: NetParams,
    pub sigma_data: f64,
    pub schedule: NoiseSchedule,
}

impl TimeClassifier {
    pub fn new(net: NetParams, schedule: NoiseSchedule) -> Result<Self> {
        let c = Self {
            net,
            sigma_data: DEFAULT_SIGMA_DATA,
            schedule,
        };
        c.validate()?;
        Ok(c)
    }

    /// Seeded initialization; the zeroed output layer makes `C = 0.5`.
    pub fn init(dim: usize, hidden: usize, embed_dim: usize, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let cfg = NetConfig::new(dim, 1).with_hidden(hidden).with_embed(embed_dim);
        Self::new(NetParams::init(cfg, &mut rng_from(seed))?, schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.config().output_dim != 1 {
            return Err(Error::Config(format!(
                "classifier network must have one output, got {}",
                self.net.config().output_dim
            )));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        self.schedule.validate()
    }

    pub fn dim(&self) -> usize {
        self.net.config().input_dim
    }

    fn inputs(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<NetInputs> {
        if x.ncols() != self.dim() {
            return Err(Error::Config(format!(
                "points have dimension {}, classifier expects {}",
                x.ncols(),
                self.dim()
            )));
        }
        network_inputs(x, sigmas, self.sigma_data, OutputScaling::Sigma, self.net.config().embed_dim)
    }

    pub fn logits(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array1<f64>> {
        let inp = self.inputs(x, sigmas)?;
        Ok(self.net.forward(inp.scaled.view(), inp.temb.view())?.column(0).to_owned())
    }

    pub(crate) fn logits_cached(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<(Array1<f64>, ForwardCache, NetInputs)> {
        let inp = self.inputs(x, sigmas)?;
        let (out, cache) = self.net.forward_cached(inp.scaled.view(), inp.temb.view())?;
        Ok((out.column(0).to_owned(), cache, inp))
    }

    /// `C(x; sigma)` per row, strictly inside (0, 1) for finite logits.
    pub fn probs(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array1<f64>> {
        Ok(self.logits(x, sigmas)?.mapv(sigmoid))
    }

    pub fn classifier_forward(&self, x: &[f64], t: f64) -> Result<f64> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Config(e.to_string()))?;
        Ok(self.probs(xv, &[self.schedule.sigma(t)])?[0])
    }

    /// `grad_x log C = sigmoid(-z) c_in grad_u z` per row.
    pub fn grad_log_prob(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        let (z, cache, inp) = self.logits_cached(x, sigmas)?;
        let upstream = z.mapv(|v| sigmoid(-v)).insert_axis(ndarray::Axis(1));
        let mut g = self.net.backward(&cache, upstream.view(), false)?.input_grads;
        for (mut row, p) in g.rows_mut().into_iter().zip(&inp.precond) {
            row *= p.c_in;
        }
        Ok(g)
    }

    pub fn grad_log_classifier(&self, x: &[f64], t: f64) -> Result<Array1<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Config(e.to_string()))?;
        Ok(self.grad_log_prob(xv, &[self.schedule.sigma(t)])?.row(0).to_owned())
    }
}

impl Guidance for TimeClassifier {
    fn dim(&self) -> usize {
        TimeClassifier::dim(self)
    }

    fn grad_log(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        self.grad_log_prob(x, sigmas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Linear;
    use ndarray::array;

    fn random_classifier(seed: u64) -> TimeClassifier {
        let mut rng = rng_from(seed);
        let mut c = TimeClassifier::init(2, 16, 8, NoiseSchedule::default(), seed).unwrap();
        c.net.output = Linear::uniform(16, 1, &mut rng);
        c
    }

    #[test]
    fn zero_output_layer_gives_one_half() {
        let c = TimeClassifier::init(2, 16, 8, NoiseSchedule::default(), 1).unwrap();
        assert_eq!(c.classifier_forward(&[0.3, -7.0], 0.4).unwrap(), 0.5);
        assert_eq!(c.grad_log_classifier(&[0.3, -7.0], 0.4).unwrap(), array![0.0, 0.0]);
    }

    #[test]
    fn constant_logit_two() {
        let mut c = TimeClassifier::init(2, 8, 4, NoiseSchedule::default(), 1).unwrap();
        c.net.output.bias[0] = 2.0;
        let p = c.classifier_forward(&[1.0, 1.0], 1.0).unwrap();
        assert!((p - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((p - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn linear_logit_gradient_by_hand() {
        // zero every hidden weight but route x through the input layer:
        // h = W_in x (no bias), blocks add zero, out = w_out . silu(h)
        // with a single hidden unit in its nearly linear regime.
        let cfg = NetConfig::new(2, 1).with_hidden(1).with_embed(2);
        let mut net = NetParams::zeros(cfg).unwrap();
        net.input.weight[[0, 0]] = 0.3;
        net.input.weight[[1, 0]] = -0.2;
        net.output.weight[[0, 0]] = 1.5;
        let c = TimeClassifier::new(net, NoiseSchedule::default()).unwrap();
        let (x, sigma) = ([0.4, 0.1], 0.8);
        let c_in = 1.0 / (sigma * sigma + 0.25f64).sqrt();
        let h = c_in * (0.3 * x[0] - 0.2 * x[1]);
        let sil = crate::numkit::silu(h);
        let z = 1.5 * sil;
        let p = sigmoid(z);
        let dsilu = crate::numkit::net::silu_grad(h);
        let want = [(1.0 - p) * 1.5 * dsilu * c_in * 0.3, (1.0 - p) * 1.5 * dsilu * c_in * -0.2];
        let got = c.grad_log_classifier(&x, sigma).unwrap();
        for j in 0..2 {
            assert!((got[j] - want[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn grad_log_matches_finite_differences() {
        let c = random_classifier(3);
        let h = 1e-4;
        for (x, t) in [([0.3, -0.8], 0.05), ([1.7, 0.2], 0.9), ([-3.0, 2.5], 7.0)] {
            let g = c.grad_log_classifier(&x, t).unwrap();
            for j in 0..2 {
                let mut xp = x;
                xp[j] += h;
                let mut xm = x;
                xm[j] -= h;
                let fd = (c.classifier_forward(&xp, t).unwrap().ln() - c.classifier_forward(&xm, t).unwrap().ln()) / (2.0 * h);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-8);
                assert!(rel < 1e-4, "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn pointwise_over_batches() {
        let c = random_classifier(4);
        let x = array![[0.1, 0.2], [1.0, -1.0], [2.0, 0.5]];
        let perm = array![[2.0, 0.5], [0.1, 0.2], [1.0, -1.0]];
        let a = c.probs(x.view(), &[0.3, 0.4, 0.5]).unwrap();
        let b = c.probs(perm.view(), &[0.5, 0.3, 0.4]).unwrap();
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[2]);
        assert_eq!(a[2], b[0]);
        assert!(a.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn rejects_multi_output_network() {
        let net = NetParams::zeros(NetConfig::new(2, 2).with_hidden(4).with_embed(2)).unwrap();
        assert!(TimeClassifier::new(net, NoiseSchedule::default()).is_err());
    }
}
