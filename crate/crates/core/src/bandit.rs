//! The didactic N-token bandit: reference policy, token-level reward curves,
//! response scoring, and offline preference-dataset construction.
//!
//! A response is a sequence of `N` tokens from a vocabulary of size `V`; its
//! reward is the mean of token-level rewards, so expectations under factored
//! policies decompose exactly per position. The reference policy is a binned
//! heavy-tailed marginal shared across positions, floored away from zero so
//! log-ratio losses stay finite.

use crate::dist::{self, Categorical, Divergence};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, DetRng};
use rand::Rng;
use rand_distr::{Cauchy, Distribution};

/// Token-level reward curve. `R1` peaks at token 70 (low reference density),
/// `R2` peaks at token 20 (near the reference mode).
#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    R1,
    R2,
    Custom(Vec<f64>),
}

impl RewardKind {
    pub fn name(&self) -> &'static str {
        match self {
            RewardKind::R1 => "R1",
            RewardKind::R2 => "R2",
            RewardKind::Custom(_) => "custom",
        }
    }
}

/// Token-level reward for the closed-form curves; tokens live in 0..100.
pub fn token_reward(kind: &RewardKind, token: usize) -> Result<f64> {
    match kind {
        RewardKind::R1 | RewardKind::R2 => {
            if token >= 100 {
                return Err(Error::invalid(format!("token {token} out of range 0..100")));
            }
            let peak = if matches!(kind, RewardKind::R1) { 70.0 } else { 20.0 };
            let z = (token as f64 - peak) / 10.0;
            Ok((-z * z).exp())
        }
        RewardKind::Custom(table) => table
            .get(token)
            .copied()
            .ok_or_else(|| Error::invalid(format!("token {token} outside custom table"))),
    }
}

/// Defaults for the binned-Cauchy reference construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub n_samples: usize,
    pub location: f64,
    pub scale: f64,
    pub vocab_size: usize,
    pub floor: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig { n_samples: 10_000, location: -0.7, scale: 0.4, vocab_size: 100, floor: 1e-6 }
    }
}

/// Draws heavy-tailed samples, keeps those inside [-1, 1], bins them into
/// `vocab_size` equal-width bins labeled 0.. from -1 upward, and normalizes
/// bin frequencies into a floored probability vector.
///
/// Out-of-range samples are discarded rather than clamped: clamping would
/// pile the truncated tails onto the edge bins (almost 30% of the default
/// distribution lies below -1) and move the mode to bin 0, while the intended
/// geometry is a bump peaked where the location parameter lands (bin 15).
pub fn build_reference_policy(config: &ReferenceConfig, seed: u64) -> Result<Categorical> {
    if config.n_samples == 0 {
        return Err(Error::invalid("reference construction needs at least one sample"));
    }
    if config.scale <= 0.0 {
        return Err(Error::invalid("scale must be positive"));
    }
    let v = config.vocab_size;
    if v < 2 {
        return Err(Error::invalid("vocab size must be at least 2"));
    }
    let cauchy = Cauchy::new(config.location, config.scale)
        .map_err(|e| Error::invalid(format!("bad Cauchy parameters: {e}")))?;
    let mut rng = rng_from_seed(seed);
    let mut counts = vec![0usize; v];
    let width = 2.0 / v as f64;
    let mut retained = 0usize;
    for _ in 0..config.n_samples {
        let x: f64 = cauchy.sample(&mut rng);
        if !(-1.0..=1.0).contains(&x) {
            continue;
        }
        let bin = (((x + 1.0) / width).floor() as usize).min(v - 1);
        counts[bin] += 1;
        retained += 1;
    }
    if retained == 0 {
        return Err(Error::invalid("every sample fell outside [-1, 1]"));
    }
    let mut probs: Vec<f64> = counts.iter().map(|&c| c as f64 / retained as f64).collect();
    apply_probability_floor(&mut probs, config.floor)?;
    Ok(Categorical::new(probs)?)
}

/// Raises every entry to at least `floor` and renormalizes, iterating until
/// both the floor and the unit sum hold exactly. Requires `len * floor < 1`.
pub fn apply_probability_floor(probs: &mut [f64], floor: f64) -> Result<()> {
    if floor < 0.0 || floor * probs.len() as f64 >= 1.0 {
        return Err(Error::invalid(format!("floor {floor} infeasible for {} entries", probs.len())));
    }
    // Fixpoint: entries at the floor are pinned there, the rest are rescaled
    // to take up the remaining mass. Terminates in at most len passes since
    // the pinned set only grows.
    let mut pinned = vec![false; probs.len()];
    loop {
        let mut changed = false;
        for (p, pin) in probs.iter_mut().zip(pinned.iter_mut()) {
            if !*pin && *p <= floor {
                *pin = true;
                changed = true;
            }
        }
        let pinned_mass = floor * pinned.iter().filter(|&&b| b).count() as f64;
        let free_mass: f64 =
            probs.iter().zip(pinned.iter()).filter(|(_, &pin)| !pin).map(|(p, _)| *p).sum();
        let scale = (1.0 - pinned_mass) / free_mass;
        for (p, &pin) in probs.iter_mut().zip(pinned.iter()) {
            if pin {
                *p = floor;
            } else {
                *p *= scale;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(())
}

/// A response: exactly `N` token ids in `0..V`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Response {
    pub tokens: Vec<usize>,
}

impl Response {
    pub fn new(tokens: Vec<usize>) -> Self {
        Response { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The bandit instance: geometry, reference marginal, and reward curve.
#[derive(Debug, Clone)]
pub struct BanditProblem {
    vocab_size: usize,
    response_len: usize,
    reference: Categorical,
    reward: RewardKind,
    token_rewards: Vec<f64>,
}

impl BanditProblem {
    pub fn new(
        vocab_size: usize,
        response_len: usize,
        reference: Categorical,
        reward: RewardKind,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::invalid("vocab size must be at least 2"));
        }
        if response_len < 1 {
            return Err(Error::invalid("response length must be at least 1"));
        }
        if reference.len() != vocab_size {
            return Err(Error::LengthMismatch { left: reference.len(), right: vocab_size });
        }
        if reference.probs().iter().any(|&p| p <= 0.0) {
            return Err(Error::invalid("reference must have full support (apply a floor)"));
        }
        let token_rewards =
            (0..vocab_size).map(|a| token_reward(&reward, a)).collect::<Result<Vec<_>>>()?;
        Ok(BanditProblem { vocab_size, response_len, reference, reward, token_rewards })
    }

    /// The default geometry: V=100, N=10, binned-Cauchy reference.
    pub fn standard(reward: RewardKind, reference_seed: u64) -> Result<Self> {
        let reference = build_reference_policy(&ReferenceConfig::default(), reference_seed)?;
        BanditProblem::new(100, 10, reference, reward)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn reference(&self) -> &Categorical {
        &self.reference
    }

    pub fn reward_kind(&self) -> &RewardKind {
        &self.reward
    }

    /// Token-level reward table of length V.
    pub fn token_rewards(&self) -> &[f64] {
        &self.token_rewards
    }

    pub fn check_response(&self, y: &Response) -> Result<()> {
        if y.len() != self.response_len {
            return Err(Error::invalid(format!(
                "response length {} != {}",
                y.len(),
                self.response_len
            )));
        }
        if let Some(&t) = y.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!("token {t} out of range 0..{}", self.vocab_size)));
        }
        Ok(())
    }

    /// Mean of token-level rewards; prompt-independent.
    pub fn response_reward(&self, y: &Response) -> f64 {
        debug_assert!(self.check_response(y).is_ok());
        y.tokens.iter().map(|&t| self.token_rewards[t]).sum::<f64>() / y.len() as f64
    }

    /// One i.i.d. draw per position from the per-token reference marginal.
    pub fn sample_reference_response(&self, rng: &mut DetRng) -> Response {
        let tokens =
            (0..self.response_len).map(|_| dist::sample(&self.reference, rng)).collect();
        Response::new(tokens)
    }
}

/// Which policy generated a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ReferenceSampled,
    PolicySampled(u64),
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::ReferenceSampled => write!(f, "reference-sampled"),
            Provenance::PolicySampled(iter) => write!(f, "policy-sampled:{iter}"),
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "reference-sampled" {
            Ok(Provenance::ReferenceSampled)
        } else if let Some(rest) = s.strip_prefix("policy-sampled:") {
            Ok(Provenance::PolicySampled(
                rest.parse().map_err(|_| Error::Parse(format!("bad provenance {s}")))?,
            ))
        } else {
            Err(Error::Parse(format!("bad provenance {s}")))
        }
    }
}

/// One preference comparison, oriented so the preferred response has the
/// larger gold reward. `gold_gap` is diagnostic only.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTriple {
    pub prompt: usize,
    pub preferred: Response,
    pub dispreferred: Response,
    pub gold_gap: f64,
}

impl PreferenceTriple {
    pub fn new(prompt: usize, preferred: Response, dispreferred: Response, gold_gap: f64) -> Result<Self> {
        if gold_gap < 0.0 {
            return Err(Error::invalid(format!("gold gap {gold_gap} must be non-negative")));
        }
        Ok(PreferenceTriple { prompt, preferred, dispreferred, gold_gap })
    }
}

/// Metadata recorded in the dataset header line.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub vocab_size: usize,
    pub response_len: usize,
    pub reward_name: String,
    pub seed: u64,
}

/// A set of preference triples plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub meta: DatasetMeta,
    pub provenance: Provenance,
    pub triples: Vec<PreferenceTriple>,
}

/// How sampled responses are turned into comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Pairing {
    AllPairs,
    BestVsRest,
}

/// Responses drawn for one prompt, kept together so best-of-N style selection
/// stays meaningful.
#[derive(Debug, Clone)]
pub struct PromptSamples {
    pub prompt: usize,
    pub responses: Vec<Response>,
}

/// Draws `n_per_prompt` reference responses for every prompt.
pub fn sample_reference_pool(
    problem: &BanditProblem,
    prompts: &[usize],
    n_per_prompt: usize,
    seed: u64,
) -> Result<Vec<PromptSamples>> {
    if prompts.is_empty() {
        return Err(Error::invalid("prompt list is empty"));
    }
    let mut rng = rng_from_seed(seed);
    Ok(prompts
        .iter()
        .map(|&prompt| PromptSamples {
            prompt,
            responses: (0..n_per_prompt)
                .map(|_| problem.sample_reference_response(&mut rng))
                .collect(),
        })
        .collect())
}

/// Turns per-prompt samples into oriented preference triples. Pairs whose
/// rewards tie are dropped so datasets stay deterministic.
pub fn pair_responses(
    prompt: usize,
    responses: &[Response],
    rewards: &[f64],
    pairing: Pairing,
) -> Vec<PreferenceTriple> {
    let mut triples = Vec::new();
    let mut push = |i: usize, j: usize| {
        let (w, l) = if rewards[i] > rewards[j] {
            (i, j)
        } else if rewards[j] > rewards[i] {
            (j, i)
        } else {
            return;
        };
        triples.push(PreferenceTriple {
            prompt,
            preferred: responses[w].clone(),
            dispreferred: responses[l].clone(),
            gold_gap: rewards[w] - rewards[l],
        });
    };
    match pairing {
        Pairing::AllPairs => {
            for i in 0..responses.len() {
                for j in (i + 1)..responses.len() {
                    push(i, j);
                }
            }
        }
        Pairing::BestVsRest => {
            let best = crate::algorithms::select_best_of_n(rewards).unwrap_or(0);
            for j in 0..responses.len() {
                if j != best {
                    push(best, j);
                }
            }
        }
    }
    triples
}

/// Samples `n_per_prompt` responses per prompt from the reference and pairs
/// them by gold reward.
pub fn build_offline_preference_dataset(
    problem: &BanditProblem,
    prompts: &[usize],
    n_per_prompt: usize,
    pairing: Pairing,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n_per_prompt < 2 {
        return Err(Error::invalid("need at least 2 responses per prompt to form pairs"));
    }
    let pool = sample_reference_pool(problem, prompts, n_per_prompt, seed)?;
    let mut triples = Vec::new();
    for group in &pool {
        let rewards: Vec<f64> =
            group.responses.iter().map(|y| problem.response_reward(y)).collect();
        triples.extend(pair_responses(group.prompt, &group.responses, &rewards, pairing));
    }
    Ok(PreferenceDataset {
        meta: DatasetMeta {
            vocab_size: problem.vocab_size(),
            response_len: problem.response_len(),
            reward_name: problem.reward_kind().name().to_string(),
            seed,
        },
        provenance: Provenance::ReferenceSampled,
        triples,
    })
}

/// Exact value of the KL-regularized objective for a factored policy:
/// expected reward minus `beta` times the summed per-position divergence from
/// the reference.
pub fn surrogate_objective(
    problem: &BanditProblem,
    policy_marginals: &[Categorical],
    token_rewards: &[f64],
    beta: f64,
    reference: &Categorical,
) -> Result<f64> {
    if policy_marginals.len() != problem.response_len() {
        return Err(Error::invalid(format!(
            "expected one marginal per position ({}), got {}",
            problem.response_len(),
            policy_marginals.len()
        )));
    }
    if beta < 0.0 {
        return Err(Error::invalid("beta must be non-negative"));
    }
    let mut expected_reward = 0.0;
    let mut kl_total = 0.0;
    for marginal in policy_marginals {
        if marginal.len() != token_rewards.len() {
            return Err(Error::LengthMismatch {
                left: marginal.len(),
                right: token_rewards.len(),
            });
        }
        expected_reward += marginal
            .probs()
            .iter()
            .zip(token_rewards.iter())
            .map(|(&p, &r)| p * r)
            .sum::<f64>();
        match dist::kl(marginal, reference, crate::dist::KlDirection::Reverse)? {
            Divergence::Finite(v) => kl_total += v,
            Divergence::Infinite => {
                return Err(Error::invalid("policy has mass outside the reference support"))
            }
        }
    }
    Ok(expected_reward / problem.response_len() as f64 - beta * kl_total)
}

/// Draws a prompt set of the given size uniformly from the vocabulary,
/// without replacement.
pub fn sample_prompts(vocab_size: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > vocab_size {
        return Err(Error::invalid(format!("cannot draw {count} prompts from {vocab_size} tokens")));
    }
    let mut rng = rng_from_seed(seed);
    let mut pool: Vec<usize> = (0..vocab_size).collect();
    let mut prompts = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.gen_range(0..pool.len());
        prompts.push(pool.swap_remove(k));
    }
    prompts
        .sort_unstable();
    Ok(prompts)
}

// --- line-oriented dataset serialization -------------------------------------

impl PreferenceDataset {
    /// One triple per line: `prompt<TAB>y_w<TAB>y_l<TAB>gold_gap` with tokens
    /// space-separated; the first line is a header recording V, N, reward
    /// kind, seed, and provenance.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# V={} N={} reward={} seed={} provenance={}\n",
            self.meta.vocab_size,
            self.meta.response_len,
            self.meta.reward_name,
            self.meta.seed,
            self.provenance
        ));
        for t in &self.triples {
            let w: Vec<String> = t.preferred.tokens.iter().map(|x| x.to_string()).collect();
            let l: Vec<String> = t.dispreferred.tokens.iter().map(|x| x.to_string()).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.16e}\n",
                t.prompt,
                w.join(" "),
                l.join(" "),
                t.gold_gap
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))?;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| Error::Parse("line 1: missing '# ' header".into()))?;
        let mut meta = DatasetMeta {
            vocab_size: 0,
            response_len: 0,
            reward_name: String::new(),
            seed: 0,
        };
        let mut provenance = Provenance::ReferenceSampled;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line 1: bad header field '{field}'")))?;
            match key {
                "V" => meta.vocab_size = parse_num(value, 1, "V")?,
                "N" => meta.response_len = parse_num(value, 1, "N")?,
                "reward" => meta.reward_name = value.to_string(),
                "seed" => {
                    meta.seed = value
                        .parse()
                        .map_err(|_| Error::Parse(format!("line 1: bad seed '{value}'")))?
                }
                "provenance" => provenance = value.parse()?,
                _ => return Err(Error::Parse(format!("line 1: unknown header key '{key}'"))),
            }
        }
        let mut triples = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::Parse(format!("line {lineno}: expected 4 tab-separated fields")));
            }
            let prompt = parse_num(parts[0], 1, &format!("line {lineno} prompt"))?;
            let preferred = parse_tokens(parts[1], lineno)?;
            let dispreferred = parse_tokens(parts[2], lineno)?;
            let gold_gap: f64 = parts[3]
                .parse()
                .map_err(|_| Error::Parse(format!("line {lineno}: bad gold gap '{}'", parts[3])))?;
            triples.push(PreferenceTriple::new(prompt, preferred, dispreferred, gold_gap)?);
        }
        Ok(PreferenceDataset { meta, provenance, triples })
    }
}

fn parse_num(s: &str, lineno: usize, what: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse(format!("line {lineno}: bad {what} '{s}'")))
}

fn parse_tokens(s: &str, lineno: usize) -> Result<Response> {
    let tokens = s
        .split(' ')
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("line {lineno}: bad token '{t}'"))))
        .collect::<Result<Vec<usize>>>()?;
    Ok(Response::new(tokens))
}
