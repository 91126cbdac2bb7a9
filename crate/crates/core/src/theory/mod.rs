//! Numerical verification of the learning-dynamics results: objective
//! identities, closed-form update laws, one-step log-ratio orderings, and the
//! margin effect of an explicit push-down term.

mod kl_dynamics;
mod lemmas;
mod theorem1;

pub use kl_dynamics::{
    kl_descent, kl_descent_step, kl_gradient, mode_seeking_witness, KLDynamicsState,
    WitnessConfig, WitnessReport,
};
pub use lemmas::{
    kl_regularized_loss, lemma2_alignment, lemma2_margin_experiment, optimal_tilted_policy,
    seeded_lemma2_witness, verify_lemma1_identity, verify_lemma3_identity, Lemma1Report,
    Lemma2Config, Lemma2Report, Lemma3Report,
};
pub use theorem1::{
    case1_gap_oracle, case23_gap_oracle, delta_from_parts, delta_log_ratios,
    falsification_search, logarithmic_mean, theorem1_case_check, CaseRecord, CaseReport,
    CaseSamplerConfig, DeltaPair, DeltaParts, TheoremCase,
};

/// Central finite difference of a scalar function of a parameter vector.
/// Shared by the gradient-check suites; a sign-flipped gradient is caught by
/// comparing against this.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(x.len());
    let mut work = x.to_vec();
    for k in 0..x.len() {
        let orig = work[k];
        work[k] = orig + h;
        let plus = f(&work);
        work[k] = orig - h;
        let minus = f(&work);
        work[k] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Relative L2 error between an analytic gradient and its finite-difference
/// estimate.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff2: f64 =
        analytic.iter().zip(numeric.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let a2: f64 = analytic.iter().map(|a| a * a).sum();
    let n2: f64 = numeric.iter().map(|b| b * b).sum();
    (diff2 / a2.max(n2).max(1e-24)).sqrt()
}
