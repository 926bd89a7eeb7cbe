//! Oracle-assisted classifier guidance for variance-exploding diffusion
//! models.
//!
//! A baseline score model is trained on data, then guidance classifiers are
//! trained on oracle-labeled samples from the current model and stacked onto
//! its score until the sampler stops violating the constraint. The stack can
//! be distilled back into a single network. [`analytic`] checks the identities
//! the method relies on against closed-form and quadrature ground truth.

pub mod analytic;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod genneg;
pub mod guidance;
pub mod io;
pub mod numkit;
pub mod oracle;
pub mod plot;
pub mod seed;

pub use error::{Error, Result};
