//! Executable checks of the guidance identities on 1-D mixtures.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mixture::{
    constraint_mass, diffused_pdf, exact_classifier, grad_log_exact_classifier, restricted_quadrature, Constraint1D,
    ExactGuidance, Mixture1D, MixtureScore,
};
use super::quad::{integrate, QuadConfig};
use crate::diffusion::{sample_reverse, NoiseSchedule, SamplerConfig};
use crate::error::Result;
use crate::guidance::{binary_ce, binary_entropy, binary_kl, GuidedScore};
use crate::seed::rng_from;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub grid: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, grid: String, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            grid,
            max_error,
            tolerance,
            passed: max_error < tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn new(checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

/// `n` evenly spaced points on `[a, b]`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn describe(ts: &[f64], xs: &[f64]) -> String {
    format!(
        "t in {ts:?}; {} points on [{}, {}]",
        xs.len(),
        xs.first().copied().unwrap_or(f64::NAN),
        xs.last().copied().unwrap_or(f64::NAN)
    )
}

/// Largest `|(grad ln p_t + grad ln C*) - grad ln p_t(. | omega)|` over the
/// grid. The left side uses the closed-form mixture score and a central
/// difference of `ln C*`; the right side integrates the restricted posterior
/// by quadrature.
pub fn verify_guided_score_identity(m: &Mixture1D, c: &Constraint1D, ts: &[f64], xs: &[f64]) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for &t in ts {
        for &x in xs {
            let lhs = m.score_at(x, t) + grad_log_exact_classifier(m, c, x, t, FD_STEP);
            let q = restricted_quadrature(m, c, x, t)?;
            let rhs = (q.mean - x) / (t * t);
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(CheckResult::new("guided_score_identity", describe(ts, xs), worst, 1e-3))
}

/// `alpha(t) = int p_t(x) C*(x, t) dx` at each time; reports the largest
/// spread between times (and against the closed-form prior).
pub fn verify_alpha_invariance(m: &Mixture1D, c: &Constraint1D, ts: &[f64]) -> Result<CheckResult> {
    let cfg = QuadConfig::default();
    let closed = constraint_mass(m, c);
    let mut values = Vec::new();
    for &t in ts {
        let sd = m.stds.iter().map(|s| (s * s + t * t).sqrt()).fold(0.0, f64::max);
        let lo = m.means.iter().copied().fold(f64::INFINITY, f64::min) - 40.0 * sd;
        let hi = m.means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 40.0 * sd;
        let mut breaks: Vec<f64> = m.means.clone();
        breaks.extend(c.intervals().iter().flat_map(|&(a, b)| [a, b]).filter(|v| v.is_finite()));
        let a = if t == 0.0 {
            // C*(x, 0) is the indicator of omega
            c.intervals()
                .iter()
                .map(|&(a, b)| {
                    let (a, b) = (a.max(lo), b.min(hi));
                    if a < b {
                        integrate(|x| m.pdf_at(x, 0.0), a, b, &breaks, &cfg)
                    } else {
                        Ok(0.0)
                    }
                })
                .sum::<Result<f64>>()?
        } else {
            integrate(|x| m.pdf_at(x, t) * exact_classifier(m, c, x, t).unwrap_or(f64::NAN), lo, hi, &breaks, &cfg)?
        };
        values.push(a);
    }
    let mut spread: f64 = 0.0;
    for a in &values {
        spread = spread.max((a - closed).abs());
        for b in &values {
            spread = spread.max((a - b).abs());
        }
    }
    Ok(CheckResult::new("alpha_time_invariance", format!("t in {ts:?}; quadrature over x"), spread, 1e-6))
}

/// `p(x | y = 1) / p(x) = 1 / alpha` at `t = 0` on the grid points inside
/// omega, with `alpha` by quadrature.
pub fn verify_posterior_ratio(m: &Mixture1D, c: &Constraint1D, xs: &[f64]) -> Result<CheckResult> {
    let cfg = QuadConfig::default();
    let mut alpha = 0.0;
    for &(a, b) in c.intervals() {
        let lo = a.max(-60.0);
        let hi = b.min(60.0);
        if lo < hi {
            alpha += integrate(|x| m.pdf_at(x, 0.0), lo, hi, &m.means, &cfg)?;
        }
    }
    let mut worst: f64 = 0.0;
    for &x in xs.iter().filter(|x| c.contains(**x)) {
        let ratio = diffused_pdf(m, Some(c), x, 0.0)? / diffused_pdf(m, None, x, 0.0)?;
        worst = worst.max((ratio - 1.0 / alpha).abs());
    }
    Ok(CheckResult::new("truncated_over_marginal_is_inverse_alpha", describe(&[0.0], xs), worst, 1e-9))
}

/// The truncated target puts no density outside omega.
pub fn verify_no_mass_outside(m: &Mixture1D, c: &Constraint1D, xs: &[f64]) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for &x in xs.iter().filter(|x| !c.contains(**x)) {
        worst = worst.max(diffused_pdf(m, Some(c), x, 0.0)?);
    }
    Ok(CheckResult::new("no_mass_outside_constraint", describe(&[0.0], xs), worst, 1e-300))
}

/// Dataset log-likelihood under the truncated target minus that under the
/// unconstrained model, on points drawn from the truncated target; the check
/// passes when the gap is nonnegative. `max_error` reports the shortfall.
pub fn verify_likelihood_ordering(m: &Mixture1D, c: &Constraint1D, n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = rng_from(seed);
    let mut gap = 0.0;
    let mut drawn = 0;
    while drawn < n {
        let x = m.sample(&mut rng);
        if !c.contains(x) {
            continue;
        }
        gap += diffused_pdf(m, Some(c), x, 0.0)?.ln() - diffused_pdf(m, None, x, 0.0)?.ln();
        drawn += 1;
    }
    Ok(CheckResult::new(
        "truncated_likelihood_dominates",
        format!("{n} points from the truncated target"),
        (-gap).max(0.0),
        f64::MIN_POSITIVE,
    ))
}

/// Restricted densities integrate to one.
pub fn verify_restricted_normalization(m: &Mixture1D, c: &Constraint1D, ts: &[f64]) -> Result<CheckResult> {
    let cfg = QuadConfig::default();
    let mut worst: f64 = 0.0;
    for &t in ts.iter().filter(|t| **t > 0.0) {
        let sd = m.stds.iter().map(|s| (s * s + t * t).sqrt()).fold(0.0, f64::max);
        let lo = m.means.iter().copied().fold(f64::INFINITY, f64::min) - 40.0 * sd;
        let hi = m.means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 40.0 * sd;
        let mut breaks = m.means.clone();
        breaks.extend(c.intervals().iter().flat_map(|&(a, b)| [a, b]).filter(|v| v.is_finite()));
        let total = integrate(|x| diffused_pdf(m, Some(c), x, t).unwrap_or(f64::NAN), lo, hi, &breaks, &cfg)?;
        worst = worst.max((total - 1.0).abs());
    }
    Ok(CheckResult::new("restricted_density_normalized", format!("t in {ts:?}"), worst, 1e-6))
}

/// Closed-form classifier against brute-force posterior quadrature.
pub fn verify_classifier_quadrature(m: &Mixture1D, c: &Constraint1D, ts: &[f64], xs: &[f64]) -> Result<CheckResult> {
    let whole = Constraint1D::whole_line();
    let mut worst: f64 = 0.0;
    for &t in ts {
        for &x in xs {
            let closed = exact_classifier(m, c, x, t)?;
            let brute = (restricted_quadrature(m, c, x, t)?.log_integral
                - restricted_quadrature(m, &whole, x, t)?.log_integral)
                .exp();
            worst = worst.max((closed - brute).abs());
        }
    }
    Ok(CheckResult::new("classifier_vs_posterior_quadrature", describe(ts, xs), worst, 1e-6))
}

/// Pointwise `CE(q, p) - H(q) = KL(q || p)` for the exact classifier and
/// perturbations of it.
pub fn verify_ce_kl(m: &Mixture1D, c: &Constraint1D, ts: &[f64], xs: &[f64]) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for &t in ts {
        for &x in xs {
            let q = exact_classifier(m, c, x, t)?;
            for d in [-0.3, -0.01, 0.0, 0.01, 0.3] {
                let p = (q + d).clamp(1e-6, 1.0 - 1e-6);
                let err = (binary_ce(q, p) - binary_entropy(q) - binary_kl(q, p)).abs();
                worst = worst.max(err);
            }
        }
    }
    Ok(CheckResult::new("cross_entropy_kl_decomposition", describe(ts, xs), worst, 1e-12))
}

/// Infraction of the reverse sampler driven by the exact mixture score plus
/// the exact classifier gradient.
pub fn guided_infraction(m: &Mixture1D, c: &Constraint1D, n: usize, steps: usize, seed: u64) -> Result<f64> {
    let base = MixtureScore { mixture: m };
    let guide = ExactGuidance {
        mixture: m,
        constraint: c,
        step: FD_STEP,
    };
    let guided = GuidedScore {
        base: &base,
        guides: vec![&guide],
        scale: 1.0,
    };
    let x: Array2<f64> = sample_reverse(&guided, &NoiseSchedule::default(), n, SamplerConfig { steps, seed })?;
    let bad = x.column(0).iter().filter(|v| !c.contains(**v)).count();
    Ok(bad as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub samples: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            steps: 200,
            seed: 0,
        }
    }
}

/// Every check on the lab mixture `0.5 N(-2, 0.25) + 0.5 N(2, 0.25)` with
/// omega = `[0, inf)`.
pub fn verify_all(cfg: &VerifyConfig) -> Result<VerificationReport> {
    let m = Mixture1D::lab();
    let c = Constraint1D::from(0.0);
    let ts = [0.1, 0.5, 1.0, 2.0];
    let xs = linspace(-4.0, 4.0, 81);
    let mut checks = vec![
        verify_guided_score_identity(&m, &c, &ts, &xs)?,
        verify_guided_score_identity(&m, &Constraint1D::whole_line(), &ts, &xs).map(|mut r| {
            r.name = "guided_score_identity_unconstrained".into();
            r.tolerance = 1e-8;
            r.passed = r.max_error < r.tolerance;
            r
        })?,
        verify_alpha_invariance(&m, &c, &[0.0, 0.5, 2.0])?,
        verify_posterior_ratio(&m, &c, &xs)?,
        verify_no_mass_outside(&m, &c, &xs)?,
        verify_likelihood_ordering(&m, &c, 1000, cfg.seed)?,
        verify_restricted_normalization(&m, &c, &ts)?,
        verify_classifier_quadrature(&m, &c, &ts, &linspace(-4.0, 4.0, 17))?,
        verify_ce_kl(&m, &c, &ts, &xs)?,
    ];
    let rate = guided_infraction(&m, &c, cfg.samples, cfg.steps, cfg.seed)?;
    checks.push(CheckResult::new(
        "exact_guidance_infraction",
        format!("{} samples, {} steps", cfg.samples, cfg.steps),
        rate,
        0.005,
    ));
    Ok(VerificationReport::new(checks))
}
