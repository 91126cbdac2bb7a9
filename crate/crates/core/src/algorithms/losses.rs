//! Per-objective losses and their exact gradients with respect to the policy
//! logits.
//!
//! All gradients are score-function based: the gradient of `log pi(y|x)` for
//! one slice is `one_hot(y_j) - softmax(logits[x][j])`, and every loss below
//! is a weighted combination of such terms with weights treated as constants
//! (standardized rewards, importance ratios at the sampled point, contrastive
//! coefficients).

use super::{standardize_rewards, select_best_of_n, AlgorithmKind, AlgorithmSpec};
use crate::bandit::{PreferenceTriple, Response};
use crate::dist::Categorical;
use crate::error::{Error, Result};
use crate::policy::{GradientTensor, PolicyDense, TabularPolicy};
use crate::reward_model::sigmoid;

/// Responses drawn for one prompt, with rewards and the log-probabilities the
/// generation policy assigned them at sampling time.
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub prompt: usize,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
    pub gen_log_probs: Vec<f64>,
}

impl ScoredGroup {
    fn check(&self) -> Result<()> {
        if self.responses.is_empty() {
            return Err(Error::invalid("empty response group"));
        }
        if self.rewards.len() != self.responses.len()
            || self.gen_log_probs.len() != self.responses.len()
        {
            return Err(Error::invalid("group rewards/log-probs do not match responses"));
        }
        Ok(())
    }
}

/// A minibatch: scored response groups for reward-driven objectives,
/// preference triples for contrastive and preferred-only objectives.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Responses(&'a [ScoredGroup]),
    Pairs(&'a [PreferenceTriple]),
}

/// Loss value and exact gradient for the spec'd objective on this minibatch.
///
/// `reference` is consumed by the contrastive kinds (their implicit reward is
/// a log-ratio against it). Generation log-probabilities ride inside the
/// batch, frozen at sampling time.
pub fn loss_and_grad(
    spec: &AlgorithmSpec,
    policy: &TabularPolicy,
    reference: &Categorical,
    batch: Batch<'_>,
) -> Result<(f64, GradientTensor)> {
    let dense = policy.dense();
    loss_and_grad_with_dense(spec, policy, &dense, reference, batch)
}

/// Same as [`loss_and_grad`] with a precomputed dense view, so trainers can
/// share one softmax pass between the loss and the metrics row.
pub fn loss_and_grad_with_dense(
    spec: &AlgorithmSpec,
    policy: &TabularPolicy,
    dense: &PolicyDense,
    reference: &Categorical,
    batch: Batch<'_>,
) -> Result<(f64, GradientTensor)> {
    let mut grad = GradientTensor::zeros_like(policy);
    let loss = match (spec.kind, batch) {
        (AlgorithmKind::BestOfN, Batch::Responses(groups)) => {
            best_of_n(spec, policy, dense, groups, &mut grad, false)?
        }
        (AlgorithmKind::BestOfNNeg, Batch::Responses(groups)) => {
            best_of_n(spec, policy, dense, groups, &mut grad, true)?
        }
        (AlgorithmKind::Reinforce, Batch::Responses(groups)) => {
            policy_gradient(spec, policy, dense, groups, &mut grad, PgKind::Reinforce)?
        }
        (AlgorithmKind::Ppo, Batch::Responses(groups)) => {
            policy_gradient(spec, policy, dense, groups, &mut grad, PgKind::Ppo)?
        }
        (AlgorithmKind::Rwr, Batch::Responses(groups)) => {
            policy_gradient(spec, policy, dense, groups, &mut grad, PgKind::Rwr)?
        }
        (AlgorithmKind::Ipo, Batch::Pairs(pairs)) => {
            contrastive(spec, policy, dense, reference, pairs, &mut grad, Contrast::Ipo)?
        }
        (AlgorithmKind::Dpo, Batch::Pairs(pairs)) => {
            contrastive(spec, policy, dense, reference, pairs, &mut grad, Contrast::Dpo)?
        }
        (AlgorithmKind::PrefFt, Batch::Pairs(pairs)) => {
            pref_ft(policy, dense, pairs, &mut grad)?
        }
        (kind, _) => {
            return Err(Error::Config(format!(
                "{} expects a {} batch",
                kind.name(),
                if kind.uses_pairs() { "preference-pair" } else { "scored-response" }
            )))
        }
    };
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            detail: format!("{} produced a non-finite loss or gradient", spec.kind.name()),
        });
    }
    Ok((loss, grad))
}

fn dense_log_prob(dense: &PolicyDense, row: usize, y: &Response) -> f64 {
    y.tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| dense.log_probs_slice(row, pos)[t])
        .sum()
}

/// Accumulates `coef * (one_hot(y_j) - p_j)` into the context's slices.
fn add_score_grad(
    grad: &mut GradientTensor,
    dense: &PolicyDense,
    row: usize,
    y: &Response,
    coef: f64,
) {
    for (pos, &t) in y.tokens.iter().enumerate() {
        let p = dense.probs_slice(row, pos);
        let slice = grad.slice_mut(row, pos);
        for (g, &pi) in slice.iter_mut().zip(p.iter()) {
            *g -= coef * pi;
        }
        slice[t] += coef;
    }
}

fn best_of_n(
    spec: &AlgorithmSpec,
    policy: &TabularPolicy,
    dense: &PolicyDense,
    groups: &[ScoredGroup],
    grad: &mut GradientTensor,
    with_negatives: bool,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    let inv = 1.0 / groups.len() as f64;
    let log_floor = spec.hyper.neg_floor.ln();
    let mut loss = 0.0;
    for group in groups {
        group.check()?;
        let row = policy.context_row(group.prompt)?;
        let best = select_best_of_n(&group.rewards).expect("group checked non-empty");
        let lp_best = dense_log_prob(dense, row, &group.responses[best]);
        loss += -lp_best * inv;
        add_score_grad(grad, dense, row, &group.responses[best], -inv);
        if with_negatives {
            for (j, y) in group.responses.iter().enumerate() {
                if j == best {
                    continue;
                }
                let lp = dense_log_prob(dense, row, y);
                // push down only while the response keeps non-negligible mass
                if lp >= log_floor {
                    loss += spec.hyper.beta_neg * lp * inv;
                    add_score_grad(grad, dense, row, y, spec.hyper.beta_neg * inv);
                }
            }
        }
    }
    Ok(loss)
}

enum PgKind {
    Reinforce,
    Ppo,
    Rwr,
}

fn policy_gradient(
    spec: &AlgorithmSpec,
    policy: &TabularPolicy,
    dense: &PolicyDense,
    groups: &[ScoredGroup],
    grad: &mut GradientTensor,
    pg: PgKind,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    for g in groups {
        g.check()?;
    }
    // standardized rewards, batch-level by default or within each prompt group
    let standardized: Vec<Vec<f64>> = if spec.per_prompt_standardize {
        groups
            .iter()
            .map(|g| standardize_rewards(&g.rewards))
            .collect::<Result<_>>()?
    } else {
        let flat: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let std = standardize_rewards(&flat)?;
        let mut it = std.into_iter();
        groups
            .iter()
            .map(|g| (0..g.rewards.len()).map(|_| it.next().unwrap()).collect())
            .collect()
    };
    let count: usize = groups.iter().map(|g| g.responses.len()).sum();
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for (group, rbar_group) in groups.iter().zip(standardized.iter()) {
        let row = policy.context_row(group.prompt)?;
        for ((y, &rbar), &gen_lp) in
            group.responses.iter().zip(rbar_group.iter()).zip(group.gen_log_probs.iter())
        {
            let lp = dense_log_prob(dense, row, y);
            match pg {
                PgKind::Reinforce => {
                    loss += -lp * rbar * inv;
                    add_score_grad(grad, dense, row, y, -rbar * inv);
                }
                PgKind::Rwr => {
                    let w = (rbar / spec.hyper.beta_rwr).exp();
                    loss += -lp * w * inv;
                    add_score_grad(grad, dense, row, y, -w * inv);
                }
                PgKind::Ppo => {
                    let eps = spec.hyper.eps_clip;
                    let rho = (lp - gen_lp).exp();
                    let unclipped = rho * rbar;
                    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * rbar;
                    let take_unclipped = if spec.ppo_f24_max {
                        unclipped >= clipped
                    } else {
                        unclipped <= clipped
                    };
                    let surrogate = if take_unclipped { unclipped } else { clipped };
                    loss += -surrogate * inv;
                    if take_unclipped {
                        // d(rho * rbar)/dtheta = rbar * rho * grad log pi;
                        // the clipped branch is flat in theta when selected strictly
                        add_score_grad(grad, dense, row, y, -rbar * rho * inv);
                    }
                }
            }
        }
    }
    Ok(loss)
}

enum Contrast {
    Ipo,
    Dpo,
}

fn contrastive(
    spec: &AlgorithmSpec,
    policy: &TabularPolicy,
    dense: &PolicyDense,
    reference: &Categorical,
    pairs: &[PreferenceTriple],
    grad: &mut GradientTensor,
    kind: Contrast,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for t in pairs {
        let row = policy.context_row(t.prompt)?;
        let h = implicit_margin(dense, row, reference, t)?;
        match kind {
            Contrast::Ipo => {
                let target = 1.0 / (2.0 * spec.hyper.tau_ipo);
                let resid = h - target;
                loss += resid * resid * inv;
                let coef = 2.0 * resid * inv;
                add_score_grad(grad, dense, row, &t.preferred, coef);
                add_score_grad(grad, dense, row, &t.dispreferred, -coef);
            }
            Contrast::Dpo => {
                let beta = spec.hyper.beta_dpo;
                loss += -log_sigmoid(beta * h) * inv;
                let coef = -sigmoid(-beta * h) * beta * inv;
                add_score_grad(grad, dense, row, &t.preferred, coef);
                add_score_grad(grad, dense, row, &t.dispreferred, -coef);
            }
        }
    }
    Ok(loss)
}

/// `log[pi(y_w) pi_ref(y_l) / (pi_ref(y_w) pi(y_l))]`
fn implicit_margin(
    dense: &PolicyDense,
    row: usize,
    reference: &Categorical,
    t: &PreferenceTriple,
) -> Result<f64> {
    let ref_lp = |y: &Response| -> Result<f64> {
        let mut total = 0.0;
        for &tok in &y.tokens {
            let p = reference.prob(tok);
            if p <= 0.0 {
                return Err(Error::invalid("reference has zero mass on a dataset response"));
            }
            total += p.ln();
        }
        Ok(total)
    };
    Ok(dense_log_prob(dense, row, &t.preferred) - ref_lp(&t.preferred)?
        - (dense_log_prob(dense, row, &t.dispreferred) - ref_lp(&t.dispreferred)?))
}

fn pref_ft(
    policy: &TabularPolicy,
    dense: &PolicyDense,
    pairs: &[PreferenceTriple],
    grad: &mut GradientTensor,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for t in pairs {
        let row = policy.context_row(t.prompt)?;
        loss += -dense_log_prob(dense, row, &t.preferred) * inv;
        add_score_grad(grad, dense, row, &t.preferred, -inv);
    }
    Ok(loss)
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::{apply_probability_floor, BanditProblem, RewardKind};
    use crate::policy::{adam_step, AdamState};
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn test_problem(v: usize, n: usize) -> BanditProblem {
        let mut reference: Vec<f64> = (0..v).map(|i| 1.0 + ((i * 7 % 5) as f64) * 0.4).collect();
        let total: f64 = reference.iter().sum();
        for p in &mut reference {
            *p /= total;
        }
        apply_probability_floor(&mut reference, 1e-6).unwrap();
        let table: Vec<f64> = (0..v).map(|a| ((a * 13 % v) as f64) / v as f64).collect();
        BanditProblem::new(
            v,
            n,
            Categorical::new(reference).unwrap(),
            RewardKind::Custom(table),
        )
        .unwrap()
    }

    fn perturbed_policy(problem: &BanditProblem, prompts: &[usize], seed: u64) -> TabularPolicy {
        let mut policy = TabularPolicy::init_from_reference(problem, prompts).unwrap();
        let mut rng = rng_from_seed(seed);
        for x in policy.raw_logits_mut() {
            *x += rng.gen::<f64>() - 0.5;
        }
        policy
    }

    fn sample_groups(
        problem: &BanditProblem,
        gen: &TabularPolicy,
        prompts: &[usize],
        per_prompt: usize,
        seed: u64,
    ) -> Vec<ScoredGroup> {
        let mut rng = rng_from_seed(seed);
        prompts
            .iter()
            .map(|&prompt| {
                let responses = gen.sample_responses(prompt, per_prompt, &mut rng).unwrap();
                let rewards = responses.iter().map(|y| problem.response_reward(y)).collect();
                let gen_log_probs =
                    responses.iter().map(|y| gen.log_prob(prompt, y).unwrap()).collect();
                ScoredGroup { prompt, responses, rewards, gen_log_probs }
            })
            .collect()
    }

    fn sample_pairs(
        problem: &BanditProblem,
        gen: &TabularPolicy,
        prompts: &[usize],
        per_prompt: usize,
        seed: u64,
    ) -> Vec<PreferenceTriple> {
        let groups = sample_groups(problem, gen, prompts, per_prompt, seed);
        let mut out = Vec::new();
        for g in &groups {
            out.extend(crate::bandit::pair_responses(
                g.prompt,
                &g.responses,
                &g.rewards,
                crate::bandit::Pairing::BestVsRest,
            ));
        }
        assert!(!out.is_empty());
        out
    }

    #[test]
    fn ipo_loss_at_init_is_inverse_tau_squared() {
        let problem = test_problem(10, 2);
        let prompts = [0, 1];
        let policy = TabularPolicy::init_from_reference(&problem, &prompts).unwrap();
        let pairs = sample_pairs(&problem, &policy, &prompts, 4, 3);
        let spec = AlgorithmSpec::offline(AlgorithmKind::Ipo);
        let (loss, _) =
            loss_and_grad(&spec, &policy, problem.reference(), Batch::Pairs(&pairs)).unwrap();
        // h = 0 at init, so every pair contributes (1/(2 tau))^2 = 100
        assert_abs_diff_eq!(loss, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn dpo_gradient_coefficient_is_half_at_init() {
        let problem = test_problem(10, 2);
        let prompts = [0, 1];
        let policy = TabularPolicy::init_from_reference(&problem, &prompts).unwrap();
        let pairs = sample_pairs(&problem, &policy, &prompts, 4, 3);
        let spec = AlgorithmSpec::offline(AlgorithmKind::Dpo);
        let (loss, grad) =
            loss_and_grad(&spec, &policy, problem.reference(), Batch::Pairs(&pairs)).unwrap();
        assert_abs_diff_eq!(loss, -(0.5f64.ln()), epsilon = 1e-9);

        // expected gradient: coefficient sigma(0) = 0.5 on every triple
        let dense = policy.dense();
        let mut expected = GradientTensor::zeros_like(&policy);
        let inv = 1.0 / pairs.len() as f64;
        for t in &pairs {
            let row = policy.context_row(t.prompt).unwrap();
            let coef = -0.5 * spec.hyper.beta_dpo * inv;
            add_score_grad(&mut expected, &dense, row, &t.preferred, coef);
            add_score_grad(&mut expected, &dense, row, &t.dispreferred, -coef);
        }
        for (a, b) in grad.data.iter().zip(expected.data.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ppo_at_generation_snapshot_matches_reinforce() {
        let problem = test_problem(8, 2);
        let prompts = [0, 2];
        let policy = perturbed_policy(&problem, &prompts, 5);
        let groups = sample_groups(&problem, &policy, &prompts, 5, 9);
        let ppo = AlgorithmSpec::online(AlgorithmKind::Ppo);
        let reinforce = AlgorithmSpec::online(AlgorithmKind::Reinforce);
        let (ppo_loss, ppo_grad) =
            loss_and_grad(&ppo, &policy, problem.reference(), Batch::Responses(&groups)).unwrap();
        let (_, r_grad) =
            loss_and_grad(&reinforce, &policy, problem.reference(), Batch::Responses(&groups))
                .unwrap();
        assert!(ppo_loss.abs() <= 1e-12, "on-policy ppo loss {ppo_loss}");
        for (a, b) in ppo_grad.data.iter().zip(r_grad.data.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn degenerate_rewards_yield_zero_policy_gradient() {
        let problem = test_problem(8, 2);
        let prompts = [0];
        let policy = perturbed_policy(&problem, &prompts, 5);
        let mut groups = sample_groups(&problem, &policy, &prompts, 4, 9);
        for r in &mut groups[0].rewards {
            *r = 0.3;
        }
        let spec = AlgorithmSpec::online(AlgorithmKind::Reinforce);
        let (_, grad) =
            loss_and_grad(&spec, &policy, problem.reference(), Batch::Responses(&groups)).unwrap();
        assert!(grad.data.iter().all(|&g| g == 0.0));
    }

    fn fd_check(
        spec: &AlgorithmSpec,
        policy: &TabularPolicy,
        problem: &BanditProblem,
        batch: Batch<'_>,
    ) {
        let (_, grad) = loss_and_grad(spec, policy, problem.reference(), batch).unwrap();
        let h = 1e-5;
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        for k in 0..policy.raw_logits().len() {
            let mut plus = policy.clone();
            plus.raw_logits_mut()[k] += h;
            let mut minus = policy.clone();
            minus.raw_logits_mut()[k] -= h;
            let lp = loss_and_grad(spec, &plus, problem.reference(), batch).unwrap().0;
            let lm = loss_and_grad(spec, &minus, problem.reference(), batch).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let g = grad.data[k];
            diff2 += (g - fd) * (g - fd);
            fd2 += fd * fd;
        }
        let rel = (diff2 / grad.squared_norm().max(fd2).max(1e-24)).sqrt();
        assert!(rel < 1e-5, "{}: gradient relative error {rel}", spec.kind.name());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let problem = test_problem(5, 2);
        let prompts = [0, 3];
        let policy = perturbed_policy(&problem, &prompts, 11);
        let groups = sample_groups(&problem, &policy, &prompts, 4, 17);
        let pairs = sample_pairs(&problem, &policy, &prompts, 4, 17);
        for kind in [
            AlgorithmKind::BestOfN,
            AlgorithmKind::BestOfNNeg,
            AlgorithmKind::Reinforce,
            AlgorithmKind::Ppo,
            AlgorithmKind::Rwr,
        ] {
            let mut spec = AlgorithmSpec::online(kind);
            spec.hyper.neg_floor = 1e-30;
            fd_check(&spec, &policy, &problem, Batch::Responses(&groups));
        }
        for kind in [AlgorithmKind::Ipo, AlgorithmKind::Dpo, AlgorithmKind::PrefFt] {
            let spec = AlgorithmSpec::offline(kind);
            fd_check(&spec, &policy, &problem, Batch::Pairs(&pairs));
        }
    }

    #[test]
    fn negative_gradient_flag_is_loadbearing() {
        let problem = test_problem(6, 2);
        let prompts = [0];
        let policy = perturbed_policy(&problem, &prompts, 2);
        let pairs = sample_pairs(&problem, &policy, &prompts, 4, 8);

        // For contrastive kinds, the descent direction -grad_loss points along
        // -grad log pi(y_l): the update pushes dispreferred likelihood down.
        for kind in [AlgorithmKind::Dpo, AlgorithmKind::Ipo] {
            let spec = AlgorithmSpec::offline(kind);
            let (_, grad) =
                loss_and_grad(&spec, &policy, problem.reference(), Batch::Pairs(&pairs)).unwrap();
            let mut inner = 0.0;
            for t in &pairs {
                let g_l = policy.logprob_gradient(t.prompt, &t.dispreferred).unwrap();
                for (a, b) in grad.data.iter().zip(g_l.data.iter()) {
                    inner += (-a) * (-b);
                }
            }
            assert!(inner > 0.0, "{}: inner product {inner}", kind.name());
        }

        // PrefFt ignores the dispreferred response entirely.
        let spec = AlgorithmSpec::offline(AlgorithmKind::PrefFt);
        let (_, grad) =
            loss_and_grad(&spec, &policy, problem.reference(), Batch::Pairs(&pairs)).unwrap();
        let mut mutated = pairs.clone();
        for t in &mut mutated {
            t.dispreferred = Response::new(vec![0; 2]);
        }
        let (_, grad2) =
            loss_and_grad(&spec, &policy, problem.reference(), Batch::Pairs(&mutated)).unwrap();
        assert_eq!(grad.data, grad2.data);
    }

    #[test]
    fn best_of_n_neg_floor_gates_push_down() {
        let problem = test_problem(6, 2);
        let prompts = [0];
        let policy = perturbed_policy(&problem, &prompts, 2);
        let groups = sample_groups(&problem, &policy, &prompts, 4, 8);

        let plain = AlgorithmSpec::online(AlgorithmKind::BestOfN);
        let mut gated = AlgorithmSpec::online(AlgorithmKind::BestOfNNeg);
        gated.hyper.neg_floor = 1.0; // log floor = 0 > any log prob: all gated off
        let (l1, g1) =
            loss_and_grad(&plain, &policy, problem.reference(), Batch::Responses(&groups)).unwrap();
        let (l2, g2) =
            loss_and_grad(&gated, &policy, problem.reference(), Batch::Responses(&groups)).unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-15);
        assert_eq!(g1.data, g2.data);

        let mut active = AlgorithmSpec::online(AlgorithmKind::BestOfNNeg);
        active.hyper.neg_floor = 1e-30;
        let (l3, _) =
            loss_and_grad(&active, &policy, problem.reference(), Batch::Responses(&groups))
                .unwrap();
        assert!(l3 < l1, "active negative terms add negative log-likelihood mass");
    }

    #[test]
    fn contrastive_losses_are_shift_invariant() {
        let problem = test_problem(6, 2);
        let prompts = [0, 1];
        let policy = perturbed_policy(&problem, &prompts, 4);
        let pairs = sample_pairs(&problem, &policy, &prompts, 4, 6);
        let mut shifted = policy.clone();
        for x in shifted.raw_logits_mut() {
            *x += 3.7;
        }
        for kind in [AlgorithmKind::Dpo, AlgorithmKind::Ipo] {
            let spec = AlgorithmSpec::offline(kind);
            let (a, _) =
                loss_and_grad(&spec, &policy, problem.reference(), Batch::Pairs(&pairs)).unwrap();
            let (b, _) =
                loss_and_grad(&spec, &shifted, problem.reference(), Batch::Pairs(&pairs)).unwrap();
            assert!((a - b).abs() <= 1e-10, "{}: {a} vs {b}", kind.name());
        }
    }

    #[test]
    fn reward_shift_leaves_standardizing_gradients_unchanged() {
        let problem = test_problem(6, 2);
        let prompts = [0, 1];
        let policy = perturbed_policy(&problem, &prompts, 4);
        let groups = sample_groups(&problem, &policy, &prompts, 4, 6);
        let mut shifted = groups.clone();
        for g in &mut shifted {
            for r in &mut g.rewards {
                *r += 17.0;
            }
        }
        for kind in [AlgorithmKind::Reinforce, AlgorithmKind::Ppo, AlgorithmKind::Rwr] {
            let spec = AlgorithmSpec::online(kind);
            let (_, a) = loss_and_grad(&spec, &policy, problem.reference(), Batch::Responses(&groups))
                .unwrap();
            let (_, b) =
                loss_and_grad(&spec, &policy, problem.reference(), Batch::Responses(&shifted))
                    .unwrap();
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert!((x - y).abs() <= 1e-10, "{}: {x} vs {y}", kind.name());
            }
        }
    }

    #[test]
    fn one_step_margin_mechanism() {
        let problem = test_problem(10, 2);
        let prompts = [0, 1];
        let policy = TabularPolicy::init_from_reference(&problem, &prompts).unwrap();
        let pairs = sample_pairs(&problem, &policy, &prompts, 6, 12);
        let margin = |p: &TabularPolicy| -> f64 {
            pairs
                .iter()
                .map(|t| {
                    p.log_prob(t.prompt, &t.preferred).unwrap()
                        - p.log_prob(t.prompt, &t.dispreferred).unwrap()
                })
                .sum::<f64>()
                / pairs.len() as f64
        };
        let winner_lp = |p: &TabularPolicy| -> f64 {
            pairs.iter().map(|t| p.log_prob(t.prompt, &t.preferred).unwrap()).sum::<f64>()
                / pairs.len() as f64
        };

        // one full-batch DPO step strictly increases the margin
        let mut dpo_policy = policy.clone();
        let spec = AlgorithmSpec::offline(AlgorithmKind::Dpo);
        let (_, grad) =
            loss_and_grad(&spec, &dpo_policy, problem.reference(), Batch::Pairs(&pairs)).unwrap();
        let mut adam = AdamState::for_policy(&dpo_policy);
        adam_step(&mut dpo_policy, &mut adam, &grad, 0.01).unwrap();
        assert!(margin(&dpo_policy) > margin(&policy));

        // one Pref-FT step increases the preferred log-likelihood
        let mut ft_policy = policy.clone();
        let spec = AlgorithmSpec::offline(AlgorithmKind::PrefFt);
        let (_, grad) =
            loss_and_grad(&spec, &ft_policy, problem.reference(), Batch::Pairs(&pairs)).unwrap();
        let mut adam = AdamState::for_policy(&ft_policy);
        adam_step(&mut ft_policy, &mut adam, &grad, 0.01).unwrap();
        assert!(winner_lp(&ft_policy) > winner_lp(&policy));
    }

    #[test]
    fn batch_kind_mismatch_rejected() {
        let problem = test_problem(5, 2);
        let policy = TabularPolicy::init_from_reference(&problem, &[0]).unwrap();
        let pairs = sample_pairs(&problem, &policy, &[0], 4, 3);
        let spec = AlgorithmSpec::online(AlgorithmKind::Ppo);
        assert!(matches!(
            loss_and_grad(&spec, &policy, problem.reference(), Batch::Pairs(&pairs)),
            Err(Error::Config(_))
        ));
    }
}
