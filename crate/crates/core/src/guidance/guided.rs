use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::classifier::TimeClassifier;
use super::Guidance;
use crate::diffusion::{ScoreFn, ScoreModel};
use crate::error::{Error, Result};

pub const GUIDED_KIND: &str = "guided_model";

/// Baseline score plus the log-gradients of a stack of classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedModel {
    pub baseline: ScoreModel,
    pub stack: Vec<TimeClassifier>,
    /// Multiplier on every classifier term; 1 means plain guidance.
    #[serde(default = "unit_scale")]
    pub guidance_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl GuidedModel {
    pub fn new(baseline: ScoreModel) -> Self {
        Self {
            baseline,
            stack: Vec::new(),
            guidance_scale: 1.0,
        }
    }

    pub fn push(&mut self, c: TimeClassifier) -> Result<()> {
        if c.dim() != self.baseline.dim() {
            return Err(Error::Config(format!(
                "classifier dimension {} does not match model dimension {}",
                c.dim(),
                self.baseline.dim()
            )));
        }
        self.stack.push(c);
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.stack.len()
    }

    pub fn guided_score(&self, x: &[f64], t: f64) -> Result<ndarray::Array1<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Config(e.to_string()))?;
        Ok(self.score(xv, &[self.baseline.schedule.sigma(t)])?.row(0).to_owned())
    }
}

/// `base(x) + scale * sum_k guide_k(x)`, adding the terms in stack order.
pub fn guided_score_with(
    base: &dyn ScoreFn,
    guides: &[&dyn Guidance],
    scale: f64,
    x: ArrayView2<f64>,
    sigmas: &[f64],
) -> Result<Array2<f64>> {
    let mut s = base.score(x, sigmas)?;
    for g in guides {
        s.scaled_add(scale, &g.grad_log(x, sigmas)?);
    }
    Ok(s)
}

impl ScoreFn for GuidedModel {
    fn dim(&self) -> usize {
        self.baseline.dim()
    }

    fn score(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        let guides: Vec<&dyn Guidance> = self.stack.iter().map(|c| c as &dyn Guidance).collect();
        guided_score_with(&self.baseline, &guides, self.guidance_scale, x, sigmas)
    }
}

/// A borrowed score plus borrowed guidance terms.
pub struct GuidedScore<'a> {
    pub base: &'a dyn ScoreFn,
    pub guides: Vec<&'a dyn Guidance>,
    pub scale: f64,
}

impl ScoreFn for GuidedScore<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        guided_score_with(self.base, &self.guides, self.scale, x, sigmas)
    }
}
