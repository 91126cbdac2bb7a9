//! One-step log-ratio comparisons between forward and reverse KL descent:
//! the Delta quantities, their mean-value-theorem gap oracles, and randomized
//! case checks over operationalized preconditions.
//!
//! The case thresholds are derived from the proofs' mean-value structure:
//! case 1 turns on the logarithmic mean of the target values, cases 2 and 3
//! on the point `c''` defined by the chord slope of `p ln p`.

use super::kl_dynamics::KLDynamicsState;
use crate::dist::{kl, Divergence, KlDirection};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng;

/// Difference of one-step log probability ratios across two categories, for
/// the forward and reverse objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaPair {
    pub forward: f64,
    pub reverse: f64,
}

/// The scalars the closed forms actually depend on. Normalizers cancel in the
/// differences, so two categories' current and target masses plus the full
/// divergence are sufficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaParts {
    pub p1: f64,
    pub p2: f64,
    pub q1: f64,
    pub q2: f64,
    pub kl_pq: f64,
}

/// Evaluates both closed forms from their parts.
pub fn delta_from_parts(parts: &DeltaParts, eta: f64) -> DeltaPair {
    let DeltaParts { p1, p2, q1, q2, kl_pq } = *parts;
    let forward = eta * (q1 - q2) - eta * (p1 - p2);
    let reverse = eta * (p1 * (q1 / p1).ln() - p2 * (q2 / p2).ln() + kl_pq * (p1 - p2));
    DeltaPair { forward, reverse }
}

/// Extracts the parts from a dynamics state and evaluates both deltas.
pub fn delta_log_ratios(state: &KLDynamicsState, x1: usize, x2: usize) -> Result<DeltaPair> {
    if x1 == x2 {
        return Err(Error::invalid("categories must differ"));
    }
    let v = state.probs.len();
    if x1 >= v || x2 >= v {
        return Err(Error::invalid(format!("category out of range 0..{v}")));
    }
    let kl_pq = match kl(&state.probs, &state.target, KlDirection::Reverse)? {
        Divergence::Finite(d) => d,
        Divergence::Infinite => {
            return Err(Error::invalid("state has mass outside target support"))
        }
    };
    let parts = DeltaParts {
        p1: state.probs.prob(x1),
        p2: state.probs.prob(x2),
        q1: state.target.prob(x1),
        q2: state.target.prob(x2),
        kl_pq,
    };
    Ok(delta_from_parts(&parts, state.eta))
}

/// `(a - b) / (ln a - ln b)` for positive `a != b`; `a` when they coincide.
pub fn logarithmic_mean(a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        (a - b) / (a.ln() - b.ln())
    }
}

/// Case-1 gap oracle: with `p1 = p2 = pbar`,
/// `reverse - forward = eta (q1 - q2)(pbar / L - 1)` with `L` the
/// logarithmic mean of the target values.
pub fn case1_gap_oracle(parts: &DeltaParts, eta: f64) -> Result<f64> {
    if parts.p1 != parts.p2 {
        return Err(Error::invalid("case-1 oracle needs p1 == p2"));
    }
    let l = logarithmic_mean(parts.q1, parts.q2);
    Ok(eta * (parts.q1 - parts.q2) * (parts.p1 / l - 1.0))
}

/// Case-2/3 gap oracle: with `q1 = q2 = q`,
/// `reverse - forward = eta (p1 - p2)(ln q - ln c'' + KL)` where `c''` solves
/// `p1 ln p1 - p2 ln p2 = (1 + ln c'')(p1 - p2)`.
pub fn case23_gap_oracle(parts: &DeltaParts, eta: f64) -> Result<f64> {
    if parts.q1 != parts.q2 {
        return Err(Error::invalid("case-2/3 oracle needs q1 == q2"));
    }
    if parts.p1 == parts.p2 {
        return Err(Error::invalid("case-2/3 oracle needs p1 != p2"));
    }
    let chord =
        (parts.p1 * parts.p1.ln() - parts.p2 * parts.p2.ln()) / (parts.p1 - parts.p2);
    let ln_c = chord - 1.0;
    Ok(eta * (parts.p1 - parts.p2) * (parts.q1.ln() - ln_c + parts.kl_pq))
}

/// The three operationalized regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoremCase {
    /// Equal current masses, distinct targets: reverse moves more when the
    /// shared mass sits above the targets' logarithmic mean.
    Case1,
    /// Equal targets well above both masses: reverse favors the currently
    /// likelier category.
    Case2,
    /// Equal targets far below both masses: reverse demotes the likelier
    /// category harder.
    Case3,
}

impl TheoremCase {
    pub fn name(&self) -> &'static str {
        match self {
            TheoremCase::Case1 => "case1",
            TheoremCase::Case2 => "case2",
            TheoremCase::Case3 => "case3",
        }
    }
}

/// Sampler geometry for the case checks.
#[derive(Debug, Clone)]
pub struct CaseSamplerConfig {
    pub vocab: usize,
    /// Case-1 margin above the logarithmic mean.
    pub case1_margin: f64,
    /// Case-2 multiplicative threshold on q over p1.
    pub case2_ratio: f64,
    /// Case-2 minimum gap p1 - p2.
    pub case2_p_gap: f64,
    /// Case-3 multiplicative slack below the p2 e^{-KL} bound.
    pub case3_slack: f64,
}

impl Default for CaseSamplerConfig {
    fn default() -> Self {
        CaseSamplerConfig {
            vocab: 10,
            case1_margin: 1e-6,
            case2_ratio: 1.01,
            case2_p_gap: 1e-3,
            case3_slack: 1e-6,
        }
    }
}

/// One sampled configuration with its deltas and verdicts.
#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub parts: DeltaParts,
    pub eta: f64,
    pub delta: DeltaPair,
    /// |oracle gap - (reverse - forward)|
    pub identity_residual: f64,
    pub pass: bool,
}

/// The full log of one case run.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub case: TheoremCase,
    pub records: Vec<CaseRecord>,
}

impl CaseReport {
    pub fn samples(&self) -> usize {
        self.records.len()
    }

    pub fn violations(&self) -> Vec<&CaseRecord> {
        self.records.iter().filter(|r| !r.pass).collect()
    }

    pub fn max_identity_residual(&self) -> f64 {
        self.records.iter().map(|r| r.identity_residual).fold(0.0, f64::max)
    }

    /// Structured text: one line per sampled configuration, regression-diff
    /// friendly.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# theorem-1 {} samples={} violations={} max_identity_residual={:.3e}\n",
            self.case.name(),
            self.samples(),
            self.violations().len(),
            self.max_identity_residual()
        );
        out.push_str("# idx\tp1\tp2\tq1\tq2\tkl\teta\tdelta_f\tdelta_r\tresidual\tverdict\n");
        for (i, r) in self.records.iter().enumerate() {
            out.push_str(&format!(
                "{i}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.3e}\t{}\n",
                r.parts.p1,
                r.parts.p2,
                r.parts.q1,
                r.parts.q2,
                r.parts.kl_pq,
                r.eta,
                r.delta.forward,
                r.delta.reverse,
                r.identity_residual,
                if r.pass { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

fn fill_rest<R: Rng>(rng: &mut R, rest: usize, mass: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..rest).map(|_| rng.gen::<f64>() + 0.01).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|x| x / sum * mass).collect()
}

fn kl_from_parts(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q.iter()).map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

/// Samples `(p, q, x1, x2, eta)` satisfying the case's operationalized
/// precondition and checks the claimed strict ordering of the deltas exactly.
/// Violations are returned as data.
pub fn theorem1_case_check(
    case: TheoremCase,
    config: &CaseSamplerConfig,
    n_samples: usize,
    seed: u64,
) -> Result<CaseReport> {
    if config.vocab < 3 {
        return Err(Error::invalid("case sampler needs at least 3 categories"));
    }
    let mut rng = rng_from_seed(seed);
    let mut records = Vec::with_capacity(n_samples);
    let mut guard = 0usize;
    while records.len() < n_samples {
        guard += 1;
        if guard > n_samples * 1000 {
            return Err(Error::InternalConsistency(format!(
                "{} sampler rejected too many proposals",
                case.name()
            )));
        }
        let eta = 0.1 + rng.gen::<f64>() * 1.9;
        let rest = config.vocab - 2;
        let proposal: Option<(Vec<f64>, Vec<f64>)> = match case {
            TheoremCase::Case1 => {
                // q free with q1 > q2; shared p mass above logmean(q1, q2)
                let q1 = rng.gen::<f64>() * 0.45 + 0.02;
                let q2 = rng.gen::<f64>() * q1 * 0.9 + 1e-4;
                if q1 - q2 < 1e-4 {
                    None
                } else {
                    let lm = logarithmic_mean(q1, q2);
                    let lo = lm + config.case1_margin;
                    let hi = 0.45;
                    if lo >= hi {
                        None
                    } else {
                        let pbar = lo + rng.gen::<f64>() * (hi - lo);
                        let mut q = vec![q1, q2];
                        q.extend(fill_rest(&mut rng, rest, 1.0 - q1 - q2));
                        let mut p = vec![pbar, pbar];
                        p.extend(fill_rest(&mut rng, rest, 1.0 - 2.0 * pbar));
                        Some((p, q))
                    }
                }
            }
            TheoremCase::Case2 => {
                // equal targets at least case2_ratio above p1 > p2
                let p1 = rng.gen::<f64>() * 0.3 + 0.01;
                let p2 = rng.gen::<f64>() * (p1 - config.case2_p_gap).max(0.0) + 5e-4;
                if p1 - p2 < config.case2_p_gap {
                    None
                } else {
                    let lo = config.case2_ratio * p1;
                    let hi = 0.49;
                    if lo >= hi {
                        None
                    } else {
                        let qv = lo + rng.gen::<f64>() * (hi - lo);
                        let mut p = vec![p1, p2];
                        p.extend(fill_rest(&mut rng, rest, 1.0 - p1 - p2));
                        let mut q = vec![qv, qv];
                        q.extend(fill_rest(&mut rng, rest, 1.0 - 2.0 * qv));
                        Some((p, q))
                    }
                }
            }
            TheoremCase::Case3 => {
                // equal targets below p2 e^{-KL}; keep the rest of q close to
                // p so the divergence stays small enough to accept
                let p1 = rng.gen::<f64>() * 0.25 + 0.05;
                let p2 = rng.gen::<f64>() * (p1 - config.case2_p_gap).max(0.0) + 0.02;
                if p1 - p2 < config.case2_p_gap {
                    None
                } else {
                    let qv = p2 * (rng.gen::<f64>() * 0.5 + 0.05);
                    let mut p = vec![p1, p2];
                    p.extend(fill_rest(&mut rng, rest, 1.0 - p1 - p2));
                    let mut q = vec![qv, qv];
                    // proportional fill tracks p's shape off the pair
                    let scale = (1.0 - 2.0 * qv) / (1.0 - p1 - p2);
                    q.extend(p[2..].iter().map(|&x| x * scale));
                    let klv = kl_from_parts(&p, &q);
                    if qv <= p2 * (-klv).exp() * (1.0 - config.case3_slack) {
                        Some((p, q))
                    } else {
                        None
                    }
                }
            }
        };
        let Some((p, q)) = proposal else { continue };
        let kl_pq = kl_from_parts(&p, &q);
        let parts = DeltaParts { p1: p[0], p2: p[1], q1: q[0], q2: q[1], kl_pq };
        let delta = delta_from_parts(&parts, eta);
        let gap = delta.reverse - delta.forward;
        let oracle = match case {
            TheoremCase::Case1 => case1_gap_oracle(&parts, eta)?,
            TheoremCase::Case2 | TheoremCase::Case3 => case23_gap_oracle(&parts, eta)?,
        };
        let identity_residual = (oracle - gap).abs();
        let pass = match case {
            TheoremCase::Case1 | TheoremCase::Case2 => delta.reverse > delta.forward,
            TheoremCase::Case3 => delta.reverse < delta.forward,
        };
        records.push(CaseRecord { parts, eta, delta, identity_residual, pass });
    }
    Ok(CaseReport { case, records })
}

/// Samples the same geometries *without* the operationalized margins and
/// reports where the strict ordering fails. Failures here are expected; the
/// map shows the preconditions are load-bearing.
pub fn falsification_search(
    case: TheoremCase,
    config: &CaseSamplerConfig,
    n_samples: usize,
    seed: u64,
) -> Result<CaseReport> {
    if config.vocab < 3 {
        return Err(Error::invalid("case sampler needs at least 3 categories"));
    }
    let mut rng = rng_from_seed(seed);
    let mut records = Vec::with_capacity(n_samples);
    while records.len() < n_samples {
        let eta = 0.1 + rng.gen::<f64>() * 1.9;
        let rest = config.vocab - 2;
        let (p, q) = match case {
            TheoremCase::Case1 => {
                let q1 = rng.gen::<f64>() * 0.45 + 0.02;
                let q2 = rng.gen::<f64>() * q1 * 0.9 + 1e-4;
                if q1 - q2 < 1e-4 {
                    continue;
                }
                // any shared mass, below or above the logarithmic mean
                let pbar = rng.gen::<f64>() * 0.45 + 1e-3;
                let mut q = vec![q1, q2];
                q.extend(fill_rest(&mut rng, rest, 1.0 - q1 - q2));
                let mut p = vec![pbar, pbar];
                p.extend(fill_rest(&mut rng, rest, 1.0 - 2.0 * pbar));
                (p, q)
            }
            TheoremCase::Case2 | TheoremCase::Case3 => {
                let p1 = rng.gen::<f64>() * 0.3 + 0.01;
                let p2 = rng.gen::<f64>() * (p1 - 1e-3).max(0.0) + 5e-4;
                if p1 - p2 < 1e-3 {
                    continue;
                }
                // equal targets anywhere feasible
                let qv = rng.gen::<f64>() * 0.45 + 1e-3;
                let mut p = vec![p1, p2];
                p.extend(fill_rest(&mut rng, rest, 1.0 - p1 - p2));
                let mut q = vec![qv, qv];
                q.extend(fill_rest(&mut rng, rest, 1.0 - 2.0 * qv));
                (p, q)
            }
        };
        let kl_pq = kl_from_parts(&p, &q);
        let parts = DeltaParts { p1: p[0], p2: p[1], q1: q[0], q2: q[1], kl_pq };
        let delta = delta_from_parts(&parts, eta);
        let oracle = match case {
            TheoremCase::Case1 => case1_gap_oracle(&parts, eta)?,
            _ => case23_gap_oracle(&parts, eta)?,
        };
        let pass = match case {
            TheoremCase::Case1 | TheoremCase::Case2 => delta.reverse > delta.forward,
            TheoremCase::Case3 => delta.reverse < delta.forward,
        };
        records.push(CaseRecord {
            parts,
            eta,
            delta,
            identity_residual: (oracle - (delta.reverse - delta.forward)).abs(),
            pass,
        });
    }
    Ok(CaseReport { case, records })
}
