//! One-dimensional Gaussian mixtures under interval constraints, diffused by
//! the VE process (`sigma(t) = t`).

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::normal::{log_mass, log_pdf, log_sum_exp};
use super::quad::{integrate, QuadConfig};
use crate::diffusion::ScoreFn;
use crate::error::{Error, Result};
use crate::guidance::Guidance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture1D {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Mixture1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        let m = Self { weights, means, stds };
        m.validate()?;
        Ok(m)
    }

    /// `0.5 N(-2, 0.25) + 0.5 N(2, 0.25)`.
    pub fn lab() -> Self {
        Self {
            weights: vec![0.5, 0.5],
            means: vec![-2.0, 2.0],
            stds: vec![0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(Error::Config("mixture needs equally many weights, means and stds (>= 1)".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.means.iter().any(|m| !m.is_finite())
            || self.stds.iter().any(|s| !(*s > 0.0 && s.is_finite()))
        {
            return Err(Error::Config("mixture weights must be >= 0, means finite, stds > 0".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn components(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&w, &m), &s)| (w, m, s * s))
    }

    /// `ln p_sigma(x)` for the mixture convolved with `N(0, sigma^2)`.
    pub fn log_pdf_at(&self, x: f64, sigma: f64) -> f64 {
        let terms: Vec<f64> = self.components().map(|(w, m, v)| w.ln() + log_pdf(x, m, v + sigma * sigma)).collect();
        log_sum_exp(&terms)
    }

    pub fn pdf_at(&self, x: f64, sigma: f64) -> f64 {
        self.log_pdf_at(x, sigma).exp()
    }

    /// `d/dx ln p_sigma(x)`.
    pub fn score_at(&self, x: f64, sigma: f64) -> f64 {
        let logs: Vec<f64> = self.components().map(|(w, m, v)| w.ln() + log_pdf(x, m, v + sigma * sigma)).collect();
        let lse = log_sum_exp(&logs);
        self.components()
            .zip(&logs)
            .map(|((_, m, v), l)| (l - lse).exp() * -(x - m) / (v + sigma * sigma))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[k] + self.stds[k] * z
    }
}

/// A finite union of closed intervals; endpoints may be infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraint1D {
    intervals: Vec<(f64, f64)>,
}

impl Constraint1D {
    pub fn new(mut intervals: Vec<(f64, f64)>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::Config("constraint needs at least one interval".into()));
        }
        if intervals.iter().any(|(a, b)| a.is_nan() || b.is_nan() || a > b) {
            return Err(Error::Config("intervals need lower <= upper".into()));
        }
        intervals.sort_by(|x, y| x.0.total_cmp(&y.0));
        if intervals.windows(2).any(|w| w[1].0 <= w[0].1) {
            return Err(Error::Config("intervals must be disjoint".into()));
        }
        Ok(Self { intervals })
    }

    pub fn whole_line() -> Self {
        Self {
            intervals: vec![(f64::NEG_INFINITY, f64::INFINITY)],
        }
    }

    /// `[a, inf)`.
    pub fn from(a: f64) -> Self {
        Self {
            intervals: vec![(a, f64::INFINITY)],
        }
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn contains(&self, x: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| x >= a && x <= b)
    }

    pub fn describe(&self) -> String {
        let parts: Vec<String> = self.intervals.iter().map(|(a, b)| format!("[{a}, {b}]")).collect();
        parts.join(" u ")
    }
}

/// Per-component `ln P(x0 in omega | x_sigma = x)` under component `k`'s
/// Gaussian posterior, plus that component's log evidence.
fn component_terms(m: &Mixture1D, c: &Constraint1D, x: f64, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let s2 = sigma * sigma;
    let mut evidence = Vec::with_capacity(m.len());
    let mut inside = Vec::with_capacity(m.len());
    for (w, mu, v) in m.components() {
        let e = w.ln() + log_pdf(x, mu, v + s2);
        let p = if sigma == 0.0 {
            if c.contains(x) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            let mean = (mu * s2 + x * v) / (v + s2);
            let tau = (v * s2 / (v + s2)).sqrt();
            let per: Vec<f64> = c
                .intervals
                .iter()
                .map(|&(a, b)| log_mass((a - mean) / tau, (b - mean) / tau))
                .collect();
            log_sum_exp(&per)
        };
        evidence.push(e);
        inside.push(e + p);
    }
    (evidence, inside)
}

/// `alpha = P(x0 in omega)` in closed form.
pub fn constraint_mass(m: &Mixture1D, c: &Constraint1D) -> f64 {
    let terms: Vec<f64> = m
        .components()
        .flat_map(|(w, mu, v)| {
            let s = v.sqrt();
            c.intervals.iter().map(move |&(a, b)| w.ln() + log_mass((a - mu) / s, (b - mu) / s))
        })
        .collect();
    log_sum_exp(&terms).exp()
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("time must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// Density of `x_t`, optionally conditioned on `x0` lying in `restrict`.
pub fn diffused_pdf(m: &Mixture1D, restrict: Option<&Constraint1D>, x: f64, t: f64) -> Result<f64> {
    check_time(t)?;
    m.validate()?;
    let Some(c) = restrict else {
        return Ok(m.pdf_at(x, t));
    };
    let alpha = constraint_mass(m, c);
    if alpha == 0.0 {
        return Err(Error::DegeneratePrior(0.0));
    }
    let (_, inside) = component_terms(m, c, x, t);
    let v = (log_sum_exp(&inside) - alpha.ln()).exp();
    if v.is_finite() {
        Ok(v)
    } else {
        // closed form failed numerically; integrate directly
        let q = restricted_quadrature(m, c, x, t)?;
        Ok((q.log_integral - alpha.ln()).exp())
    }
}

/// `ln C*(x, t) = ln P(x0 in omega | x_t = x)`.
pub fn log_exact_classifier(m: &Mixture1D, c: &Constraint1D, x: f64, t: f64) -> f64 {
    let (evidence, inside) = component_terms(m, c, x, t);
    (log_sum_exp(&inside) - log_sum_exp(&evidence)).min(0.0)
}

/// The Bayes-optimal time-dependent classifier for `x0 in omega`.
pub fn exact_classifier(m: &Mixture1D, c: &Constraint1D, x: f64, t: f64) -> Result<f64> {
    check_time(t)?;
    let alpha = constraint_mass(m, c);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::DegeneratePrior(alpha));
    }
    Ok(log_exact_classifier(m, c, x, t).exp())
}

/// Central-difference derivative of `ln C*` in `x`.
pub fn grad_log_exact_classifier(m: &Mixture1D, c: &Constraint1D, x: f64, t: f64, h: f64) -> f64 {
    (log_exact_classifier(m, c, x + h, t) - log_exact_classifier(m, c, x - h, t)) / (2.0 * h)
}

/// `ln int_omega m(x0) N(x; x0, sigma^2) dx0` and the posterior mean of `x0`
/// over `omega`, both by adaptive quadrature.
#[derive(Clone, Copy, Debug)]
pub struct RestrictedMoments {
    pub log_integral: f64,
    pub mean: f64,
}

pub fn restricted_quadrature(m: &Mixture1D, c: &Constraint1D, x: f64, sigma: f64) -> Result<RestrictedMoments> {
    if !(sigma > 0.0) {
        return Err(Error::Quadrature("kernel width must be positive".into()));
    }
    let s2 = sigma * sigma;
    let log_g = |x0: f64| -> f64 {
        let terms: Vec<f64> = m.components().map(|(w, mu, v)| w.ln() + log_pdf(x0, mu, v)).collect();
        log_sum_exp(&terms) + log_pdf(x, x0, s2)
    };
    // per-component posterior modes and widths locate the mass
    let modes: Vec<(f64, f64)> = m
        .components()
        .map(|(_, mu, v)| ((mu * s2 + x * v) / (v + s2), (v * s2 / (v + s2)).sqrt()))
        .collect();
    let reach_lo = modes.iter().map(|(c, w)| c - 40.0 * w).fold(f64::INFINITY, f64::min);
    let reach_hi = modes.iter().map(|(c, w)| c + 40.0 * w).fold(f64::NEG_INFINITY, f64::max);

    let mut shift = f64::NEG_INFINITY;
    let mut pieces = Vec::new();
    for &(a, b) in &c.intervals {
        let (lo, hi) = (a.max(reach_lo), b.min(reach_hi));
        if lo >= hi {
            continue;
        }
        for &(mode, _) in &modes {
            shift = shift.max(log_g(mode.clamp(lo, hi)));
        }
        shift = shift.max(log_g(lo)).max(log_g(hi));
        pieces.push((lo, hi));
    }
    if pieces.is_empty() || shift == f64::NEG_INFINITY {
        return Ok(RestrictedMoments {
            log_integral: f64::NEG_INFINITY,
            mean: f64::NAN,
        });
    }
    let breaks: Vec<f64> = modes
        .iter()
        .flat_map(|&(c, w)| [-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0].map(move |k| c + k * w))
        .collect();
    let cfg = QuadConfig::default();
    let (mut i0, mut i1) = (0.0, 0.0);
    for (lo, hi) in pieces {
        i0 += integrate(|x0| (log_g(x0) - shift).exp(), lo, hi, &breaks, &cfg)?;
        i1 += integrate(|x0| x0 * (log_g(x0) - shift).exp(), lo, hi, &breaks, &cfg)?;
    }
    Ok(RestrictedMoments {
        log_integral: i0.ln() + shift,
        mean: i1 / i0,
    })
}

/// Exact score of the diffused mixture as a batched 1-D score function.
pub struct MixtureScore<'a> {
    pub mixture: &'a Mixture1D,
}

impl ScoreFn for MixtureScore<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn score(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        check_one_column(x)?;
        Ok(Array2::from_shape_fn(x.raw_dim(), |(i, _)| self.mixture.score_at(x[[i, 0]], sigmas[i])))
    }
}

/// `grad ln C*` as a guidance term.
pub struct ExactGuidance<'a> {
    pub mixture: &'a Mixture1D,
    pub constraint: &'a Constraint1D,
    /// Central-difference step.
    pub step: f64,
}

impl Guidance for ExactGuidance<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn grad_log(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        check_one_column(x)?;
        Ok(Array2::from_shape_fn(x.raw_dim(), |(i, _)| {
            grad_log_exact_classifier(self.mixture, self.constraint, x[[i, 0]], sigmas[i], self.step)
        }))
    }
}

fn check_one_column(x: ArrayView2<f64>) -> Result<()> {
    if x.ncols() != 1 {
        return Err(Error::Config(format!("expected one-dimensional points, got {}", x.ncols())));
    }
    Ok(())
}
