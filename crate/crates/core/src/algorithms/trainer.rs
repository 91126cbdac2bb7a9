//! The unified fine-tuning loop: per outer iteration, draw prompts, obtain
//! responses (from the current policy, a stale snapshot, or a fixed offline
//! set), score them, and run `T` inner passes of minibatch gradient steps,
//! recording exact policy metrics at every step.

use super::losses::{loss_and_grad_with_dense, Batch, ScoredGroup};
use super::{AlgorithmKind, AlgorithmSpec};
use crate::bandit::{
    pair_responses, BanditProblem, DatasetMeta, Pairing, PreferenceDataset, PreferenceTriple,
    PromptSamples, Provenance, Response,
};
use crate::error::{Error, Result};
use crate::policy::{adam_step, AdamState, PolicyDense, TabularPolicy};
use crate::reward_model::TabularRewardModel;
use crate::rng::{derive_seed, rng_from_seed, salts};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

/// Where training responses come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DataSource {
    /// Sample from the current policy at the start of every outer iteration.
    OnPolicy,
    /// Draw from a fixed pre-collected set; the generation policy is the
    /// reference.
    OfflineFixed,
    /// Sample from a snapshot refreshed every `refresh_every` outer
    /// iterations (1 is equivalent to on-policy).
    StalePolicy { refresh_every: usize },
}

/// Whether responses are scored by the gold reward or a learned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RewardSource {
    Gold,
    Learned,
}

/// Scores responses during training; `token_table` exposes the per-token
/// structure when exact expectations over policy slices are possible.
pub trait RewardAccessor {
    fn score(&self, prompt: usize, y: &Response) -> f64;
    fn token_table(&self) -> Option<&[f64]>;
    fn name(&self) -> String;
}

/// The problem's own reward function.
pub struct GoldReward<'a> {
    problem: &'a BanditProblem,
}

impl<'a> GoldReward<'a> {
    pub fn new(problem: &'a BanditProblem) -> Self {
        GoldReward { problem }
    }
}

impl RewardAccessor for GoldReward<'_> {
    fn score(&self, _prompt: usize, y: &Response) -> f64 {
        self.problem.response_reward(y)
    }

    fn token_table(&self) -> Option<&[f64]> {
        Some(self.problem.token_rewards())
    }

    fn name(&self) -> String {
        format!("gold-{}", self.problem.reward_kind().name())
    }
}

/// A trained tabular reward model used as the proxy scorer.
pub struct LearnedReward {
    model: TabularRewardModel,
}

impl LearnedReward {
    pub fn new(model: TabularRewardModel) -> Self {
        LearnedReward { model }
    }

    pub fn model(&self) -> &TabularRewardModel {
        &self.model
    }
}

impl RewardAccessor for LearnedReward {
    fn score(&self, _prompt: usize, y: &Response) -> f64 {
        self.model.predict(y).expect("trained model scores any in-range response")
    }

    fn token_table(&self) -> Option<&[f64]> {
        match self.model.pooling() {
            crate::reward_model::Pooling::Mean => Some(self.model.token_values()),
            crate::reward_model::Pooling::Max => None,
        }
    }

    fn name(&self) -> String {
        format!("learned-{}", self.model.pooling().name())
    }
}

/// Knobs of the unified loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainerConfig {
    /// Total samples per outer iteration (B).
    pub total_samples: usize,
    /// Responses per prompt (C).
    pub responses_per_prompt: usize,
    /// Inner passes over the sampled set (T).
    pub inner_passes: usize,
    /// Minibatch size in samples (M).
    pub minibatch_size: usize,
    pub lr: f64,
    pub outer_iterations: usize,
    pub seed: u64,
    pub data_source: DataSource,
    pub reward_source: RewardSource,
}

impl TrainerConfig {
    pub fn validate(&self, spec: &AlgorithmSpec) -> Result<()> {
        if self.responses_per_prompt == 0 || self.total_samples == 0 {
            return Err(Error::Config("B and C must be positive".into()));
        }
        if self.total_samples % self.responses_per_prompt != 0 {
            return Err(Error::Config(format!(
                "B ({}) must be divisible by C ({})",
                self.total_samples, self.responses_per_prompt
            )));
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.total_samples {
            return Err(Error::Config(format!(
                "M ({}) must be in 1..=B ({})",
                self.minibatch_size, self.total_samples
            )));
        }
        if self.inner_passes == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if spec.kind == AlgorithmKind::Reinforce && self.inner_passes > 1 {
            return Err(Error::Config(
                "reinforce performs exactly one pass per sample; T > 1 is sample reuse".into(),
            ));
        }
        if spec.kind.standardizes_rewards() && self.minibatch_size < 2 {
            return Err(Error::Config("reward standardization needs minibatches of at least 2".into()));
        }
        if !spec.kind.uses_pairs() && self.minibatch_size % self.responses_per_prompt != 0 {
            return Err(Error::Config(format!(
                "M ({}) must be a multiple of C ({}) so prompt groups stay whole",
                self.minibatch_size, self.responses_per_prompt
            )));
        }
        if spec.kind.uses_pairs() && self.responses_per_prompt < 2 {
            return Err(Error::Config("pair objectives need C >= 2".into()));
        }
        if let DataSource::StalePolicy { refresh_every } = self.data_source {
            if refresh_every == 0 {
                return Err(Error::Config("stale refresh interval must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// One record per gradient step, measured on the policy the step's gradient
/// was computed from (pre-update). Expectations and divergences are exact
/// sums over policy slices. Margin and implicit-reward fields apply to pair
/// objectives only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub expected_gold_reward: f64,
    pub expected_proxy_reward: Option<f64>,
    pub kl_policy_to_ref: f64,
    pub kl_policy_to_gen: f64,
    pub loss: f64,
    pub margin: Option<f64>,
    pub implicit_reward_w: Option<f64>,
    pub implicit_reward_l: Option<f64>,
}

/// A non-step event worth surfacing (degenerate batches, skipped updates).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub outer_iteration: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTrace {
    pub rows: Vec<MetricsRow>,
    pub events: Vec<TraceEvent>,
}

/// Fixed data for offline runs: per-prompt response sets for reward-driven
/// objectives and oriented triples for pair objectives, built from the same
/// draws.
#[derive(Debug, Clone)]
pub struct OfflineData {
    responses: BTreeMap<usize, Vec<Response>>,
    pairs: BTreeMap<usize, Vec<PreferenceTriple>>,
}

impl OfflineData {
    pub fn new(pool: Vec<PromptSamples>, dataset: &PreferenceDataset) -> Self {
        let mut responses = BTreeMap::new();
        for group in pool {
            responses.insert(group.prompt, group.responses);
        }
        let mut pairs: BTreeMap<usize, Vec<PreferenceTriple>> = BTreeMap::new();
        for t in &dataset.triples {
            pairs.entry(t.prompt).or_default().push(t.clone());
        }
        OfflineData { responses, pairs }
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.values().map(|v| v.len()).sum()
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub policy: TabularPolicy,
    pub trace: MetricsTrace,
}

/// An aborted run: the error plus whatever trace was recorded before it.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub partial: MetricsTrace,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} steps: {}", self.partial.rows.len(), self.error)
    }
}

/// Exact expected gold reward of the policy, averaged over its contexts.
pub fn expected_reward(policy: &TabularPolicy, token_rewards: &[f64]) -> f64 {
    let dense = policy.dense();
    expected_reward_dense(policy, &dense, token_rewards)
}

fn expected_reward_dense(policy: &TabularPolicy, dense: &PolicyDense, table: &[f64]) -> f64 {
    let mut total = 0.0;
    for row in 0..policy.num_contexts() {
        for pos in 0..policy.response_len() {
            total += dense
                .probs_slice(row, pos)
                .iter()
                .zip(table.iter())
                .map(|(&p, &r)| p * r)
                .sum::<f64>();
        }
    }
    total / (policy.num_contexts() * policy.response_len()) as f64
}

/// Summed per-position KL from the policy to fixed per-token log
/// probabilities, averaged over contexts.
fn kl_to_logprobs(policy: &TabularPolicy, dense: &PolicyDense, other_lp: &[f64]) -> f64 {
    let v = policy.vocab_size();
    let mut total = 0.0;
    for row in 0..policy.num_contexts() {
        for pos in 0..policy.response_len() {
            let p = dense.probs_slice(row, pos);
            let lp = dense.log_probs_slice(row, pos);
            for a in 0..v {
                total += p[a] * (lp[a] - other_lp[a]);
            }
        }
    }
    total / policy.num_contexts() as f64
}

fn kl_to_dense(policy: &TabularPolicy, dense: &PolicyDense, gen: &PolicyDense) -> f64 {
    let v = policy.vocab_size();
    let mut total = 0.0;
    for row in 0..policy.num_contexts() {
        for pos in 0..policy.response_len() {
            let p = dense.probs_slice(row, pos);
            let lp = dense.log_probs_slice(row, pos);
            let glp = gen.log_probs_slice(row, pos);
            for a in 0..v {
                total += p[a] * (lp[a] - glp[a]);
            }
        }
    }
    total / policy.num_contexts() as f64
}

/// Samples from the policy, ranks by the accessor, and pairs best-vs-rest.
/// Ties are dropped; the gap stored on each triple is the accessor's gap.
pub fn build_online_preference_pairs(
    policy: &TabularPolicy,
    prompts: &[usize],
    n_per_prompt: usize,
    accessor: &dyn RewardAccessor,
    seed: u64,
    iteration: u64,
) -> Result<PreferenceDataset> {
    if n_per_prompt < 2 {
        return Err(Error::invalid("need at least 2 samples per prompt to form pairs"));
    }
    let mut rng = rng_from_seed(seed);
    let mut triples = Vec::new();
    for &prompt in prompts {
        let responses = policy.sample_responses(prompt, n_per_prompt, &mut rng)?;
        let rewards: Vec<f64> = responses.iter().map(|y| accessor.score(prompt, y)).collect();
        triples.extend(pair_responses(prompt, &responses, &rewards, Pairing::BestVsRest));
    }
    Ok(PreferenceDataset {
        meta: DatasetMeta {
            vocab_size: policy.vocab_size(),
            response_len: policy.response_len(),
            reward_name: accessor.name(),
            seed,
        },
        provenance: Provenance::PolicySampled(iteration),
        triples,
    })
}

enum GenSnapshot {
    Policy { policy: TabularPolicy, dense: PolicyDense },
    Reference,
}

/// Runs the unified loop and returns the trained policy with its trace.
/// Aborts (carrying the partial trace) on non-finite losses or invalid
/// configurations.
pub fn unified_train(
    spec: &AlgorithmSpec,
    config: &TrainerConfig,
    problem: &BanditProblem,
    initial_policy: TabularPolicy,
    accessor: &dyn RewardAccessor,
    offline: Option<&OfflineData>,
) -> std::result::Result<TrainOutput, TrainAbort> {
    let abort = |error: Error| TrainAbort { error, partial: MetricsTrace::default() };
    config.validate(spec).map_err(abort)?;
    if config.data_source == DataSource::OfflineFixed && offline.is_none() {
        return Err(abort(Error::Config(
            "offline-fixed data source requires a preference dataset or sample pool".into(),
        )));
    }

    let prompt_ids = initial_policy.context_ids().to_vec();
    let mut policy = initial_policy;
    let mut adam = AdamState::for_policy(&policy);
    let mut rng = rng_from_seed(derive_seed(config.seed, salts::TRAINING));
    let mut trace = MetricsTrace::default();
    let mut step = 0usize;

    let ln_ref: Vec<f64> = problem.reference().probs().iter().map(|p| p.ln()).collect();
    let gold_table = problem.token_rewards().to_vec();
    let proxy_table = match config.reward_source {
        RewardSource::Learned => accessor.token_table().map(|t| t.to_vec()),
        RewardSource::Gold => None,
    };

    let mut gen = GenSnapshot::Reference;
    let prompts_per_iter = config.total_samples / config.responses_per_prompt;

    for iter in 0..config.outer_iterations {
        match config.data_source {
            DataSource::OnPolicy => {
                gen = GenSnapshot::Policy { policy: policy.clone(), dense: policy.dense() };
            }
            DataSource::StalePolicy { refresh_every } => {
                if iter % refresh_every == 0 {
                    gen = GenSnapshot::Policy { policy: policy.clone(), dense: policy.dense() };
                }
            }
            DataSource::OfflineFixed => {}
        }

        let drawn: Vec<usize> = (0..prompts_per_iter)
            .map(|_| prompt_ids[rng.gen_range(0..prompt_ids.len())])
            .collect();

        if spec.kind.uses_pairs() {
            let mut triples: Vec<PreferenceTriple> = Vec::new();
            match config.data_source {
                DataSource::OfflineFixed => {
                    // draw C triples per prompt from the fixed set, without
                    // replacement within one draw
                    let data = offline.expect("validated above");
                    for &prompt in &drawn {
                        if let Some(ts) = data.pairs.get(&prompt) {
                            if ts.len() <= config.responses_per_prompt {
                                triples.extend(ts.iter().cloned());
                            } else {
                                let mut idx: Vec<usize> = (0..ts.len()).collect();
                                for k in 0..config.responses_per_prompt {
                                    let j = rng.gen_range(k..idx.len());
                                    idx.swap(k, j);
                                    triples.push(ts[idx[k]].clone());
                                }
                            }
                        }
                    }
                }
                _ => {
                    let gen_policy = match &gen {
                        GenSnapshot::Policy { policy, .. } => policy,
                        GenSnapshot::Reference => &policy,
                    };
                    for &prompt in &drawn {
                        let responses = gen_policy
                            .sample_responses(prompt, config.responses_per_prompt, &mut rng)
                            .map_err(abort)?;
                        let rewards: Vec<f64> =
                            responses.iter().map(|y| accessor.score(prompt, y)).collect();
                        triples.extend(pair_responses(
                            prompt,
                            &responses,
                            &rewards,
                            Pairing::BestVsRest,
                        ));
                    }
                }
            }
            if triples.is_empty() {
                trace.events.push(TraceEvent {
                    outer_iteration: iter,
                    message: "degenerate iteration: no preference pairs (all ties dropped); update skipped"
                        .into(),
                });
                continue;
            }
            let mut indices: Vec<usize> = (0..triples.len()).collect();
            for _ in 0..config.inner_passes {
                indices.shuffle(&mut rng);
                for chunk in indices.chunks(config.minibatch_size) {
                    let minibatch: Vec<PreferenceTriple> =
                        chunk.iter().map(|&i| triples[i].clone()).collect();
                    run_step(
                        spec,
                        config,
                        problem,
                        &mut policy,
                        &mut adam,
                        &gen,
                        Batch::Pairs(&minibatch),
                        &ln_ref,
                        &gold_table,
                        proxy_table.as_deref(),
                        &mut step,
                        &mut trace,
                    )?;
                }
            }
        } else {
            let mut groups: Vec<ScoredGroup> = Vec::with_capacity(drawn.len());
            for &prompt in &drawn {
                let responses = match config.data_source {
                    DataSource::OfflineFixed => {
                        // draw C responses per prompt from the fixed pool,
                        // without replacement within one draw
                        let data = offline.expect("validated above");
                        let pool = data
                            .responses
                            .get(&prompt)
                            .ok_or_else(|| {
                                Error::Config(format!("offline pool has no responses for prompt {prompt}"))
                            })
                            .map_err(|e| TrainAbort { error: e, partial: trace.clone() })?;
                        if pool.len() < config.responses_per_prompt {
                            return Err(TrainAbort {
                                error: Error::Config(format!(
                                    "offline pool for prompt {prompt} has {} responses, C is {}",
                                    pool.len(),
                                    config.responses_per_prompt
                                )),
                                partial: trace.clone(),
                            });
                        }
                        let mut idx: Vec<usize> = (0..pool.len()).collect();
                        let mut picked = Vec::with_capacity(config.responses_per_prompt);
                        for k in 0..config.responses_per_prompt {
                            let j = rng.gen_range(k..idx.len());
                            idx.swap(k, j);
                            picked.push(pool[idx[k]].clone());
                        }
                        picked
                    }
                    _ => {
                        let gen_policy = match &gen {
                            GenSnapshot::Policy { policy, .. } => policy,
                            GenSnapshot::Reference => &policy,
                        };
                        gen_policy
                            .sample_responses(prompt, config.responses_per_prompt, &mut rng)
                            .map_err(|e| TrainAbort { error: e, partial: trace.clone() })?
                    }
                };
                let rewards: Vec<f64> =
                    responses.iter().map(|y| accessor.score(prompt, y)).collect();
                let gen_log_probs: Vec<f64> = match &gen {
                    GenSnapshot::Policy { policy: gp, .. } => responses
                        .iter()
                        .map(|y| gp.log_prob(prompt, y))
                        .collect::<Result<_>>()
                        .map_err(|e| TrainAbort { error: e, partial: trace.clone() })?,
                    GenSnapshot::Reference => responses
                        .iter()
                        .map(|y| y.tokens.iter().map(|&t| ln_ref[t]).sum())
                        .collect(),
                };
                groups.push(ScoredGroup { prompt, responses, rewards, gen_log_probs });
            }
            let groups_per_minibatch =
                (config.minibatch_size / config.responses_per_prompt).max(1);
            let mut indices: Vec<usize> = (0..groups.len()).collect();
            for _ in 0..config.inner_passes {
                indices.shuffle(&mut rng);
                for chunk in indices.chunks(groups_per_minibatch) {
                    let minibatch: Vec<ScoredGroup> =
                        chunk.iter().map(|&i| groups[i].clone()).collect();
                    run_step(
                        spec,
                        config,
                        problem,
                        &mut policy,
                        &mut adam,
                        &gen,
                        Batch::Responses(&minibatch),
                        &ln_ref,
                        &gold_table,
                        proxy_table.as_deref(),
                        &mut step,
                        &mut trace,
                    )?;
                }
            }
        }
    }

    Ok(TrainOutput { policy, trace })
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    spec: &AlgorithmSpec,
    config: &TrainerConfig,
    problem: &BanditProblem,
    policy: &mut TabularPolicy,
    adam: &mut AdamState,
    gen: &GenSnapshot,
    batch: Batch<'_>,
    ln_ref: &[f64],
    gold_table: &[f64],
    proxy_table: Option<&[f64]>,
    step: &mut usize,
    trace: &mut MetricsTrace,
) -> std::result::Result<(), TrainAbort> {
    let dense = policy.dense();
    let expected_gold = expected_reward_dense(policy, &dense, gold_table);
    let expected_proxy = proxy_table.map(|t| expected_reward_dense(policy, &dense, t));
    let kl_ref = kl_to_logprobs(policy, &dense, ln_ref);
    let kl_gen = match gen {
        GenSnapshot::Policy { dense: gen_dense, .. } => kl_to_dense(policy, &dense, gen_dense),
        GenSnapshot::Reference => kl_ref,
    };

    let (loss, grad) =
        loss_and_grad_with_dense(spec, policy, &dense, problem.reference(), batch).map_err(|e| {
            let error = match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step: *step, detail },
                other => other,
            };
            TrainAbort { error, partial: trace.clone() }
        })?;

    let (margin, iw, il) = match batch {
        Batch::Pairs(pairs) => {
            let mut m = 0.0;
            let mut w = 0.0;
            let mut l = 0.0;
            for t in pairs {
                let row = policy.context_row(t.prompt).expect("batch prompts are registered");
                let lp = |y: &Response| -> f64 {
                    y.tokens
                        .iter()
                        .enumerate()
                        .map(|(pos, &tok)| dense.log_probs_slice(row, pos)[tok])
                        .sum()
                };
                let ref_lp =
                    |y: &Response| -> f64 { y.tokens.iter().map(|&tok| ln_ref[tok]).sum() };
                let lw = lp(&t.preferred);
                let ll = lp(&t.dispreferred);
                m += lw - ll;
                w += lw - ref_lp(&t.preferred);
                l += ll - ref_lp(&t.dispreferred);
            }
            let n = pairs.len() as f64;
            (Some(m / n), Some(w / n), Some(l / n))
        }
        Batch::Responses(_) => (None, None, None),
    };

    trace.rows.push(MetricsRow {
        step: *step,
        expected_gold_reward: expected_gold,
        expected_proxy_reward: expected_proxy,
        kl_policy_to_ref: kl_ref,
        kl_policy_to_gen: kl_gen,
        loss,
        margin,
        implicit_reward_w: iw,
        implicit_reward_l: il,
    });

    adam_step(policy, adam, &grad, config.lr)
        .map_err(|e| TrainAbort { error: e, partial: trace.clone() })?;
    *step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::{build_offline_preference_dataset, sample_reference_pool, RewardKind};

    fn standard_setup() -> (BanditProblem, Vec<usize>, TabularPolicy) {
        let problem = BanditProblem::standard(RewardKind::R1, 0).unwrap();
        let prompts = crate::bandit::sample_prompts(100, 5, 1).unwrap();
        let policy = TabularPolicy::init_from_reference(&problem, &prompts).unwrap();
        (problem, prompts, policy)
    }

    fn online_config(outer: usize) -> TrainerConfig {
        TrainerConfig {
            total_samples: 20,
            responses_per_prompt: 5,
            inner_passes: 1,
            minibatch_size: 20,
            lr: 0.1,
            outer_iterations: outer,
            seed: 7,
            data_source: DataSource::OnPolicy,
            reward_source: RewardSource::Gold,
        }
    }

    #[test]
    fn one_step_per_iteration_when_b_equals_m() {
        let (problem, _, policy) = standard_setup();
        let spec = AlgorithmSpec::online(AlgorithmKind::BestOfN);
        let out = unified_train(
            &spec,
            &online_config(4),
            &problem,
            policy,
            &GoldReward::new(&problem),
            None,
        )
        .unwrap();
        assert_eq!(out.trace.rows.len(), 4);
        for (i, row) in out.trace.rows.iter().enumerate() {
            assert_eq!(row.step, i);
        }
    }

    #[test]
    fn on_policy_first_inner_step_has_zero_kl_to_gen() {
        let (problem, _, policy) = standard_setup();
        let spec = AlgorithmSpec::online(AlgorithmKind::BestOfN);
        let mut config = online_config(3);
        config.minibatch_size = 10; // two steps per iteration
        let out = unified_train(&spec, &config, &problem, policy, &GoldReward::new(&problem), None)
            .unwrap();
        assert_eq!(out.trace.rows.len(), 6);
        for iter in 0..3 {
            let first = &out.trace.rows[iter * 2];
            assert_eq!(first.kl_policy_to_gen, 0.0, "iteration {iter} first step");
            let second = &out.trace.rows[iter * 2 + 1];
            assert!(second.kl_policy_to_gen > 0.0, "iteration {iter} second step");
        }
    }

    #[test]
    fn zero_learning_rate_is_a_bitwise_noop() {
        let (problem, _, policy) = standard_setup();
        let before: Vec<u64> = policy.raw_logits().iter().map(|x| x.to_bits()).collect();
        let spec = AlgorithmSpec::online(AlgorithmKind::Rwr);
        let mut config = online_config(5);
        config.lr = 0.0;
        let out = unified_train(&spec, &config, &problem, policy, &GoldReward::new(&problem), None)
            .unwrap();
        let after: Vec<u64> = out.policy.raw_logits().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
        let r0 = out.trace.rows[0].expected_gold_reward;
        assert!(out.trace.rows.iter().all(|r| r.expected_gold_reward == r0));
    }

    #[test]
    fn reinforce_rejects_sample_reuse() {
        let (problem, _, policy) = standard_setup();
        let spec = AlgorithmSpec::online(AlgorithmKind::Reinforce);
        let mut config = online_config(1);
        config.inner_passes = 3;
        let err = unified_train(&spec, &config, &problem, policy, &GoldReward::new(&problem), None)
            .unwrap_err();
        assert!(matches!(err.error, Error::Config(_)));
    }

    #[test]
    fn offline_source_requires_data() {
        let (problem, _, policy) = standard_setup();
        let spec = AlgorithmSpec::offline(AlgorithmKind::Ipo);
        let mut config = online_config(1);
        config.data_source = DataSource::OfflineFixed;
        let err = unified_train(&spec, &config, &problem, policy, &GoldReward::new(&problem), None)
            .unwrap_err();
        assert!(matches!(err.error, Error::Config(_)));
    }

    #[test]
    fn offline_ipo_trains_on_fixed_pairs() {
        let (problem, prompts, policy) = standard_setup();
        let pool = sample_reference_pool(&problem, &prompts, 5, 3).unwrap();
        let dataset =
            build_offline_preference_dataset(&problem, &prompts, 5, Pairing::BestVsRest, 3)
                .unwrap();
        let offline = OfflineData::new(pool, &dataset);
        let spec = AlgorithmSpec::offline(AlgorithmKind::Ipo);
        let mut config = online_config(5);
        config.data_source = DataSource::OfflineFixed;
        config.lr = 0.05;
        let out = unified_train(
            &spec,
            &config,
            &problem,
            policy,
            &GoldReward::new(&problem),
            Some(&offline),
        )
        .unwrap();
        assert!(!out.trace.rows.is_empty());
        // every recorded row carries pair diagnostics
        assert!(out.trace.rows.iter().all(|r| r.margin.is_some()));
        // kl to gen equals kl to ref when data comes from the reference
        for r in &out.trace.rows {
            assert_eq!(r.kl_policy_to_gen, r.kl_policy_to_ref);
        }
    }

    #[test]
    fn degenerate_one_hot_policy_skips_pair_updates() {
        let (problem, prompts, mut policy) = standard_setup();
        for x in policy.raw_logits_mut() {
            *x = 0.0;
        }
        // concentrate every slice on token 4
        for row in 0..prompts.len() {
            for pos in 0..problem.response_len() {
                let v = problem.vocab_size();
                let off = (row * problem.response_len() + pos) * v;
                policy.raw_logits_mut()[off + 4] = 80.0;
            }
        }
        let spec = AlgorithmSpec::online(AlgorithmKind::Ipo);
        let out = unified_train(
            &spec,
            &online_config(2),
            &problem,
            policy,
            &GoldReward::new(&problem),
            None,
        )
        .unwrap();
        assert!(out.trace.rows.is_empty());
        assert_eq!(out.trace.events.len(), 2);
        assert!(out.trace.events[0].message.contains("degenerate"));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (problem, _, policy) = standard_setup();
        let spec = AlgorithmSpec::online(AlgorithmKind::BestOfN);
        let run = |p: TabularPolicy| {
            unified_train(&spec, &online_config(6), &problem, p, &GoldReward::new(&problem), None)
                .unwrap()
        };
        let a = run(policy.clone());
        let b = run(policy);
        assert_eq!(a.trace, b.trace);
        assert!(a
            .policy
            .raw_logits()
            .iter()
            .zip(b.policy.raw_logits())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn online_pairs_contract() {
        let (problem, prompts, policy) = standard_setup();
        let gold = GoldReward::new(&problem);
        let ds = build_online_preference_pairs(&policy, &prompts, 2, &gold, 5, 3).unwrap();
        assert!(ds.triples.len() <= prompts.len());
        assert_eq!(ds.provenance, Provenance::PolicySampled(3));
        for t in &ds.triples {
            assert!(
                gold.score(t.prompt, &t.preferred) > gold.score(t.prompt, &t.dispreferred),
                "orientation must follow the accessor"
            );
        }
        assert!(build_online_preference_pairs(&policy, &prompts, 1, &gold, 5, 0).is_err());
    }

    #[test]
    fn stale_snapshot_refreshes_on_schedule() {
        let (problem, _, policy) = standard_setup();
        let spec = AlgorithmSpec::online(AlgorithmKind::BestOfN);
        let mut config = online_config(4);
        config.data_source = DataSource::StalePolicy { refresh_every: 2 };
        let out = unified_train(&spec, &config, &problem, policy, &GoldReward::new(&problem), None)
            .unwrap();
        // refresh iterations see a fresh snapshot, others a stale one
        assert_eq!(out.trace.rows[0].kl_policy_to_gen, 0.0);
        assert!(out.trace.rows[1].kl_policy_to_gen > 0.0);
        assert_eq!(out.trace.rows[2].kl_policy_to_gen, 0.0);
        assert!(out.trace.rows[3].kl_policy_to_gen > 0.0);
    }
}
