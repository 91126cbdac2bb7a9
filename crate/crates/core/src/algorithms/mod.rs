//! Fine-tuning objectives with analytic gradients, plus the unified trainer
//! that varies data sourcing (on-policy / offline / stale), sample reuse, and
//! minibatching around them.

mod losses;
mod trainer;

pub use losses::{loss_and_grad, Batch, ScoredGroup};
pub use trainer::{
    build_online_preference_pairs, expected_reward, unified_train, DataSource, GoldReward,
    LearnedReward, MetricsRow, MetricsTrace, OfflineData, RewardAccessor, RewardSource,
    TraceEvent, TrainAbort, TrainOutput, TrainerConfig,
};

use crate::error::{Error, Result};

/// The objective families studied here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AlgorithmKind {
    BestOfN,
    BestOfNNeg,
    Ipo,
    Dpo,
    Reinforce,
    Ppo,
    Rwr,
    PrefFt,
}

impl AlgorithmKind {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmKind::BestOfN => "best-of-n",
            AlgorithmKind::BestOfNNeg => "best-of-n-neg",
            AlgorithmKind::Ipo => "ipo",
            AlgorithmKind::Dpo => "dpo",
            AlgorithmKind::Reinforce => "reinforce",
            AlgorithmKind::Ppo => "ppo",
            AlgorithmKind::Rwr => "rwr",
            AlgorithmKind::PrefFt => "pref-ft",
        }
    }

    /// Kinds that consume preference triples rather than scored responses.
    pub fn uses_pairs(&self) -> bool {
        matches!(self, AlgorithmKind::Ipo | AlgorithmKind::Dpo | AlgorithmKind::PrefFt)
    }

    /// Kinds whose loss standardizes rewards over the minibatch.
    pub fn standardizes_rewards(&self) -> bool {
        matches!(self, AlgorithmKind::Reinforce | AlgorithmKind::Ppo | AlgorithmKind::Rwr)
    }

    /// Whether the loss carries an explicit or advantage-induced term that
    /// pushes likelihood down on some responses.
    pub fn has_negative_gradient(&self) -> bool {
        matches!(
            self,
            AlgorithmKind::BestOfNNeg
                | AlgorithmKind::Ipo
                | AlgorithmKind::Dpo
                | AlgorithmKind::Reinforce
                | AlgorithmKind::Ppo
        )
    }
}

/// Loss hyperparameters; defaults follow the bandit protocol.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlgorithmHyper {
    /// Weight of the KL regularizer in the surrogate objective (reporting).
    pub beta_kl: f64,
    pub tau_ipo: f64,
    pub beta_dpo: f64,
    pub beta_rwr: f64,
    pub eps_clip: f64,
    pub beta_neg: f64,
    /// Response-level probability below which the push-down term switches off.
    pub neg_floor: f64,
    pub n_samples_per_prompt: usize,
}

impl Default for AlgorithmHyper {
    fn default() -> Self {
        AlgorithmHyper {
            beta_kl: 0.0,
            tau_ipo: 0.05,
            beta_dpo: 0.1,
            beta_rwr: 0.1,
            eps_clip: 0.2,
            beta_neg: 1.0,
            neg_floor: 1e-8,
            n_samples_per_prompt: 10,
        }
    }
}

/// An objective plus its sampling/reuse/negative-gradient classification.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlgorithmSpec {
    pub kind: AlgorithmKind,
    pub on_policy_sampling: bool,
    pub sample_reuse: bool,
    pub negative_gradient: bool,
    pub hyper: AlgorithmHyper,
    /// Reproduces the literal optimistic max-clip variant of the surrogate;
    /// the default pessimistic min is what clipping is for.
    pub ppo_f24_max: bool,
    /// Standardize rewards within each prompt group instead of across the
    /// whole minibatch.
    pub per_prompt_standardize: bool,
}

impl AlgorithmSpec {
    /// Classification flags for a kind under a data regime. Offline methods
    /// never sample, so reuse is not applicable and maps to false; a single
    /// pass over fresh samples is not reuse either.
    pub fn flags(kind: AlgorithmKind, online: bool) -> (bool, bool, bool) {
        let negative = kind.has_negative_gradient();
        if !online {
            return (false, false, negative);
        }
        let reuse = kind != AlgorithmKind::Reinforce;
        (true, reuse, negative)
    }

    pub fn new(kind: AlgorithmKind, online: bool) -> Self {
        let (on_policy_sampling, sample_reuse, negative_gradient) = Self::flags(kind, online);
        AlgorithmSpec {
            kind,
            on_policy_sampling,
            sample_reuse,
            negative_gradient,
            hyper: AlgorithmHyper::default(),
            ppo_f24_max: false,
            per_prompt_standardize: false,
        }
    }

    pub fn online(kind: AlgorithmKind) -> Self {
        Self::new(kind, true)
    }

    pub fn offline(kind: AlgorithmKind) -> Self {
        Self::new(kind, false)
    }
}

/// Zero-mean, unit-variance standardization with a Bessel-corrected standard
/// deviation and a small stabilizer in the denominator.
pub fn standardize_rewards(raw: &[f64]) -> Result<Vec<f64>> {
    const EPS_STD: f64 = 1e-8;
    if raw.len() < 2 {
        return Err(Error::invalid(format!(
            "standardization needs at least 2 rewards, got {}",
            raw.len()
        )));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    Ok(raw.iter().map(|r| (r - mean) / (std + EPS_STD)).collect())
}

/// Argmax with ties resolved to the lowest index; `None` on an empty slice.
pub fn select_best_of_n(rewards: &[f64]) -> Option<usize> {
    if rewards.is_empty() {
        return None;
    }
    let mut best = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = i;
        }
    }
    Some(best)
}
