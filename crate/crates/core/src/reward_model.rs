//! Pairwise preference probabilities and a learned per-token reward table
//! trained with the classification loss on preference pairs.
//!
//! The model mirrors the gold reward's structure (a per-token value table with
//! mean pooling), so realizability is exact and coverage effects are isolated
//! from approximation error. The loss is invariant to adding a constant to all
//! token values, so checks use rank correlations or pairwise margins, never
//! absolute values.

use crate::bandit::{PreferenceDataset, Response};
use crate::error::{Error, Result};
use crate::policy::AdamState;
use crate::rng::rng_from_seed;
use rand::seq::SliceRandom;

/// Preference probability under the pairwise comparison model, computed
/// stably as `sigmoid(r1 - r2)`.
pub fn bt_probability(r1: f64, r2: f64) -> f64 {
    sigmoid(r1 - r2)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How token values pool into a response-level reward. `Mean` matches the
/// gold reward; `Max` is a deliberately misspecified variant for
/// over-optimization studies (experimental).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Pooling {
    Mean,
    Max,
}

impl Pooling {
    pub fn name(&self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ModelState {
    Uninitialized,
    Initialized,
    Trained,
}

/// Per-token reward values with a pooling mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularRewardModel {
    values: Vec<f64>,
    pooling: Pooling,
    state: ModelState,
    steps: usize,
    seed: u64,
}

impl TabularRewardModel {
    pub fn new_uninitialized(vocab_size: usize, pooling: Pooling) -> Self {
        TabularRewardModel {
            values: vec![0.0; vocab_size],
            pooling,
            state: ModelState::Uninitialized,
            steps: 0,
            seed: 0,
        }
    }

    pub fn from_values(values: Vec<f64>, pooling: Pooling) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("token values must be finite"));
        }
        Ok(TabularRewardModel { values, pooling, state: ModelState::Initialized, steps: 0, seed: 0 })
    }

    pub fn is_trained(&self) -> bool {
        self.state == ModelState::Trained
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn token_values(&self) -> &[f64] {
        &self.values
    }

    /// Token values reported in the mean-zero gauge.
    pub fn centered_values(&self) -> Vec<f64> {
        let mean = self.values.iter().sum::<f64>() / self.values.len() as f64;
        self.values.iter().map(|v| v - mean).collect()
    }

    /// Response-level reward under the pooling mode.
    pub fn predict(&self, y: &Response) -> Result<f64> {
        if self.state == ModelState::Uninitialized {
            return Err(Error::invalid("reward model is neither trained nor initialized"));
        }
        if let Some(&t) = y.tokens.iter().find(|&&t| t >= self.values.len()) {
            return Err(Error::invalid(format!("token {t} outside value table")));
        }
        Ok(match self.pooling {
            Pooling::Mean => {
                y.tokens.iter().map(|&t| self.values[t]).sum::<f64>() / y.len() as f64
            }
            Pooling::Max => y
                .tokens
                .iter()
                .map(|&t| self.values[t])
                .fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Knobs for [`train_reward_model`]. Full-batch by default; `minibatch`
/// switches to shuffled minibatches under the given seed.
#[derive(Debug, Clone)]
pub struct RewardTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub pooling: Pooling,
    pub minibatch: Option<usize>,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        RewardTrainConfig { lr: 0.05, steps: 2000, seed: 0, pooling: Pooling::Mean, minibatch: None }
    }
}

/// Result of a training run: the model, the final loss, and the per-step loss
/// trajectory.
#[derive(Debug, Clone)]
pub struct RewardTrainOutcome {
    pub model: TabularRewardModel,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Maximizes `sum log sigmoid(r(y_w) - r(y_l))` by Adam on the token values
/// from zero init. Contradictory duplicate pairs are allowed; the loss simply
/// plateaus.
pub fn train_reward_model(
    dataset: &PreferenceDataset,
    config: &RewardTrainConfig,
) -> Result<RewardTrainOutcome> {
    if dataset.triples.is_empty() {
        return Err(Error::invalid("preference dataset is empty"));
    }
    let v = dataset.meta.vocab_size;
    let mut values = vec![0.0; v];
    let mut adam = AdamState::new(v);
    let mut rng = rng_from_seed(config.seed);
    let mut order: Vec<usize> = (0..dataset.triples.len()).collect();
    let mut losses = Vec::with_capacity(config.steps);

    for _ in 0..config.steps {
        let batch: Vec<usize> = match config.minibatch {
            None => order.clone(),
            Some(m) => {
                order.shuffle(&mut rng);
                order.iter().copied().take(m.max(1)).collect()
            }
        };
        let mut grad = vec![0.0; v];
        let mut loss = 0.0;
        for &idx in &batch {
            let t = &dataset.triples[idx];
            let margin = pooled(&values, &t.preferred, config.pooling)
                - pooled(&values, &t.dispreferred, config.pooling);
            loss += -log_sigmoid(margin);
            // d/dv of -log sigmoid(margin) = -sigmoid(-margin) * d margin/dv
            let coef = -sigmoid(-margin) / batch.len() as f64;
            accumulate_pooled_grad(&mut grad, &values, &t.preferred, config.pooling, coef);
            accumulate_pooled_grad(&mut grad, &values, &t.dispreferred, config.pooling, -coef);
        }
        loss /= batch.len() as f64;
        losses.push(loss);
        adam.update(&mut values, &grad, config.lr)?;
    }

    let final_loss = losses.last().copied().unwrap_or(0.0);
    Ok(RewardTrainOutcome {
        model: TabularRewardModel {
            values,
            pooling: config.pooling,
            state: ModelState::Trained,
            steps: config.steps,
            seed: config.seed,
        },
        final_loss,
        losses,
    })
}

fn pooled(values: &[f64], y: &Response, pooling: Pooling) -> f64 {
    match pooling {
        Pooling::Mean => y.tokens.iter().map(|&t| values[t]).sum::<f64>() / y.len() as f64,
        Pooling::Max => y.tokens.iter().map(|&t| values[t]).fold(f64::NEG_INFINITY, f64::max),
    }
}

fn accumulate_pooled_grad(
    grad: &mut [f64],
    values: &[f64],
    y: &Response,
    pooling: Pooling,
    coef: f64,
) {
    match pooling {
        Pooling::Mean => {
            let w = coef / y.len() as f64;
            for &t in &y.tokens {
                grad[t] += w;
            }
        }
        Pooling::Max => {
            // subgradient at the first argmax token
            let best = y
                .tokens
                .iter()
                .copied()
                .max_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap())
                .unwrap();
            grad[best] += coef;
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::invalid("need at least 2 points for a rank correlation"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in ra.iter().zip(rb.iter()) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::invalid("rank correlation undefined for constant input"));
    }
    Ok(cov / (var_a * var_b).sqrt())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

// --- checkpoint io ------------------------------------------------------------

impl TabularRewardModel {
    /// Header (V, pooling, steps, seed) plus one value per line at 17
    /// significant digits.
    pub fn to_checkpoint_text(&self) -> String {
        let mut out = format!(
            "# V={} pooling={} steps={} seed={}\n",
            self.values.len(),
            self.pooling.name(),
            self.steps,
            self.seed
        );
        for v in &self.values {
            out.push_str(&format!("{v:.16e}\n"));
        }
        out
    }

    pub fn from_checkpoint_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let header =
            header.strip_prefix("# ").ok_or_else(|| Error::Parse("line 1: missing header".into()))?;
        let mut v = 0usize;
        let mut pooling = Pooling::Mean;
        let mut steps = 0usize;
        let mut seed = 0u64;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line 1: bad field '{field}'")))?;
            match key {
                "V" => v = value.parse().map_err(|_| Error::Parse("bad V".into()))?,
                "pooling" => {
                    pooling = match value {
                        "mean" => Pooling::Mean,
                        "max" => Pooling::Max,
                        _ => return Err(Error::Parse(format!("unknown pooling '{value}'"))),
                    }
                }
                "steps" => steps = value.parse().map_err(|_| Error::Parse("bad steps".into()))?,
                "seed" => seed = value.parse().map_err(|_| Error::Parse("bad seed".into()))?,
                _ => return Err(Error::Parse(format!("line 1: unknown key '{key}'"))),
            }
        }
        let values: Vec<f64> = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.parse().map_err(|_| Error::Parse(format!("bad value '{l}'"))))
            .collect::<Result<_>>()?;
        if values.len() != v {
            return Err(Error::Parse(format!("expected {v} values, found {}", values.len())));
        }
        Ok(TabularRewardModel {
            values,
            pooling,
            state: if steps > 0 { ModelState::Trained } else { ModelState::Initialized },
            steps,
            seed,
        })
    }
}
