//! Ground truth on 1-D Gaussian mixtures with interval constraints: exact
//! diffused densities, exact Bayes classifiers, quadrature cross-checks and
//! a JSON verification report.

pub mod mixture;
pub mod normal;
pub mod quad;
pub mod verify;

pub use mixture::{
    constraint_mass, diffused_pdf, exact_classifier, grad_log_exact_classifier, log_exact_classifier,
    restricted_quadrature, Constraint1D, ExactGuidance, Mixture1D, MixtureScore, RestrictedMoments,
};
pub use verify::{
    guided_infraction, linspace, verify_all, verify_alpha_invariance, verify_ce_kl, verify_classifier_quadrature,
    verify_likelihood_ordering, verify_no_mass_outside, verify_posterior_ratio, verify_restricted_normalization,
    verify_guided_score_identity, CheckResult, VerificationReport, VerifyConfig, FD_STEP,
};
