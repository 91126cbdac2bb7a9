//! Tabular softmax policy over (context, position) with exact
//! log-probabilities, analytic score-function gradients, and an Adam updater.
//!
//! Positions are independent given the context: the reward is a mean of
//! token-level terms and the reference is factored, so the optimal
//! KL-regularized policy is factored too. This keeps every gradient in the
//! crate analytic.

use crate::bandit::{BanditProblem, Response};
use crate::dist::{log_softmax_slice, sample_slice, softmax_slice};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use std::collections::BTreeMap;

/// Per-(context, position) logits with a prompt-id-to-row map.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_contexts: usize,
    response_len: usize,
    vocab_size: usize,
    logits: Vec<f64>,
    context_ids: Vec<usize>,
    context_index: BTreeMap<usize, usize>,
}

/// Gradient array congruent with a policy's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTensor {
    pub data: Vec<f64>,
    num_contexts: usize,
    response_len: usize,
    vocab_size: usize,
}

impl GradientTensor {
    pub fn zeros_like(policy: &TabularPolicy) -> Self {
        GradientTensor {
            data: vec![0.0; policy.logits.len()],
            num_contexts: policy.num_contexts,
            response_len: policy.response_len,
            vocab_size: policy.vocab_size,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for x in &mut self.data {
            *x *= factor;
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &GradientTensor, factor: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += factor * b;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn congruent_with(&self, policy: &TabularPolicy) -> bool {
        self.num_contexts == policy.num_contexts
            && self.response_len == policy.response_len
            && self.vocab_size == policy.vocab_size
    }

    pub fn slice(&self, row: usize, pos: usize) -> &[f64] {
        let off = (row * self.response_len + pos) * self.vocab_size;
        &self.data[off..off + self.vocab_size]
    }

    pub fn slice_mut(&mut self, row: usize, pos: usize) -> &mut [f64] {
        let off = (row * self.response_len + pos) * self.vocab_size;
        &mut self.data[off..off + self.vocab_size]
    }
}

/// Dense snapshot of per-slice probabilities and log-probabilities; computed
/// once per gradient step or metrics row instead of per response.
#[derive(Debug, Clone)]
pub struct PolicyDense {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    response_len: usize,
    vocab_size: usize,
}

impl PolicyDense {
    pub fn probs_slice(&self, row: usize, pos: usize) -> &[f64] {
        let off = (row * self.response_len + pos) * self.vocab_size;
        &self.probs[off..off + self.vocab_size]
    }

    pub fn log_probs_slice(&self, row: usize, pos: usize) -> &[f64] {
        let off = (row * self.response_len + pos) * self.vocab_size;
        &self.log_probs[off..off + self.vocab_size]
    }
}

impl TabularPolicy {
    /// Sets every slice to the log of the reference marginal, so the policy
    /// equals the reference exactly at initialization.
    pub fn init_from_reference(problem: &BanditProblem, prompts: &[usize]) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::invalid("prompt list is empty"));
        }
        let v = problem.vocab_size();
        let n = problem.response_len();
        let log_ref: Vec<f64> = problem.reference().probs().iter().map(|p| p.ln()).collect();
        let mut context_ids: Vec<usize> = prompts.to_vec();
        context_ids.dedup();
        if context_ids.len() != prompts.len() {
            return Err(Error::invalid("duplicate prompts in context list"));
        }
        let mut logits = Vec::with_capacity(context_ids.len() * n * v);
        for _ in 0..context_ids.len() * n {
            logits.extend_from_slice(&log_ref);
        }
        let context_index =
            context_ids.iter().enumerate().map(|(row, &id)| (id, row)).collect();
        Ok(TabularPolicy {
            num_contexts: context_ids.len(),
            response_len: n,
            vocab_size: v,
            logits,
            context_ids,
            context_index,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_ids(&self) -> &[usize] {
        &self.context_ids
    }

    pub fn context_row(&self, prompt: usize) -> Result<usize> {
        self.context_index.get(&prompt).copied().ok_or(Error::UnknownContext(prompt))
    }

    pub fn logits_slice(&self, row: usize, pos: usize) -> &[f64] {
        let off = (row * self.response_len + pos) * self.vocab_size;
        &self.logits[off..off + self.vocab_size]
    }

    pub fn raw_logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn raw_logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Probabilities of one (context, position) slice.
    pub fn probs(&self, prompt: usize, pos: usize) -> Result<Vec<f64>> {
        let row = self.context_row(prompt)?;
        Ok(softmax_slice(self.logits_slice(row, pos)))
    }

    /// Softmax and log-softmax of every slice.
    pub fn dense(&self) -> PolicyDense {
        let slices = self.num_contexts * self.response_len;
        let mut probs = Vec::with_capacity(self.logits.len());
        let mut log_probs = Vec::with_capacity(self.logits.len());
        for s in 0..slices {
            let off = s * self.vocab_size;
            let lp = log_softmax_slice(&self.logits[off..off + self.vocab_size]);
            probs.extend(lp.iter().map(|&x| x.exp()));
            log_probs.extend_from_slice(&lp);
        }
        PolicyDense { probs, log_probs, response_len: self.response_len, vocab_size: self.vocab_size }
    }

    /// `sum_j log softmax(logits[x][j])[y_j]`
    pub fn log_prob(&self, prompt: usize, y: &Response) -> Result<f64> {
        let row = self.context_row(prompt)?;
        if y.len() != self.response_len {
            return Err(Error::invalid(format!(
                "response length {} != {}",
                y.len(),
                self.response_len
            )));
        }
        let mut total = 0.0;
        for (pos, &token) in y.tokens.iter().enumerate() {
            let lp = log_softmax_slice(self.logits_slice(row, pos));
            total += lp[token];
        }
        Ok(total)
    }

    /// Per-position independent categorical draws; deterministic per seed.
    pub fn sample_responses(
        &self,
        prompt: usize,
        count: usize,
        rng: &mut DetRng,
    ) -> Result<Vec<Response>> {
        if count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let row = self.context_row(prompt)?;
        let slice_probs: Vec<Vec<f64>> = (0..self.response_len)
            .map(|pos| softmax_slice(self.logits_slice(row, pos)))
            .collect();
        Ok((0..count)
            .map(|_| {
                Response::new(
                    slice_probs.iter().map(|p| sample_slice(p, rng)).collect(),
                )
            })
            .collect())
    }

    /// Gradient of `log pi(y | x)` w.r.t. the logits: slice `j` of context `x`
    /// is `one_hot(y_j) - softmax(logits[x][j])`; all other rows are zero.
    pub fn logprob_gradient(&self, prompt: usize, y: &Response) -> Result<GradientTensor> {
        let row = self.context_row(prompt)?;
        if y.len() != self.response_len {
            return Err(Error::invalid(format!(
                "response length {} != {}",
                y.len(),
                self.response_len
            )));
        }
        let mut grad = GradientTensor::zeros_like(self);
        for (pos, &token) in y.tokens.iter().enumerate() {
            let p = softmax_slice(self.logits_slice(row, pos));
            let slice = grad.slice_mut(row, pos);
            for (g, &pi) in slice.iter_mut().zip(p.iter()) {
                *g = -pi;
            }
            slice[token] += 1.0;
        }
        Ok(grad)
    }
}

/// Adam moments congruent with a policy's logits.
///
/// Moments decay on every parameter each step (dense update) even when the
/// gradient is sparse, matching common optimizer semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_policy(policy: &TabularPolicy) -> Self {
        AdamState::new(policy.logits.len())
    }

    /// One bias-corrected Adam update of `params` along `-grad`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grad.len() != self.first_moment.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state over {} params given {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grad.len()
            )));
        }
        if lr < 0.0 {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for ((p, m), (v, &g)) in params
            .iter_mut()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut().zip(grad.iter()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Applies one Adam step to the policy logits and increments the counter.
pub fn adam_step(
    policy: &mut TabularPolicy,
    adam: &mut AdamState,
    grad: &GradientTensor,
    lr: f64,
) -> Result<()> {
    if !grad.congruent_with(policy) {
        return Err(Error::ShapeMismatch("gradient does not match policy shape".into()));
    }
    if lr <= 0.0 && lr != 0.0 {
        return Err(Error::invalid("learning rate must be positive"));
    }
    adam.update(&mut policy.logits, &grad.data, lr)
}

// --- checkpoint io ------------------------------------------------------------

impl TabularPolicy {
    /// Text dump: header (num_contexts, N, V, step), the context ids in row
    /// order, then one line per (context, position) slice at 17 significant
    /// digits, which round-trips f64 exactly.
    pub fn to_checkpoint_text(&self, step: u64) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# contexts={} N={} V={} step={}\n",
            self.num_contexts, self.response_len, self.vocab_size, step
        ));
        let ids: Vec<String> = self.context_ids.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("# context_ids={}\n", ids.join(" ")));
        for row in 0..self.num_contexts {
            for pos in 0..self.response_len {
                let vals: Vec<String> =
                    self.logits_slice(row, pos).iter().map(|x| format!("{x:.16e}")).collect();
                out.push_str(&vals.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_checkpoint_text(text: &str) -> Result<(Self, u64)> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let header =
            header.strip_prefix("# ").ok_or_else(|| Error::Parse("line 1: missing header".into()))?;
        let mut contexts = 0usize;
        let mut n = 0usize;
        let mut v = 0usize;
        let mut step = 0u64;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line 1: bad field '{field}'")))?;
            let parsed: u64 =
                value.parse().map_err(|_| Error::Parse(format!("line 1: bad value '{value}'")))?;
            match key {
                "contexts" => contexts = parsed as usize,
                "N" => n = parsed as usize,
                "V" => v = parsed as usize,
                "step" => step = parsed,
                _ => return Err(Error::Parse(format!("line 1: unknown key '{key}'"))),
            }
        }
        let ids_line = lines.next().ok_or_else(|| Error::Parse("missing context id line".into()))?;
        let ids_line = ids_line
            .strip_prefix("# context_ids=")
            .ok_or_else(|| Error::Parse("line 2: expected context_ids".into()))?;
        let context_ids: Vec<usize> = ids_line
            .split(' ')
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("line 2: bad id '{t}'"))))
            .collect::<Result<_>>()?;
        if context_ids.len() != contexts {
            return Err(Error::Parse(format!(
                "header says {contexts} contexts, id line has {}",
                context_ids.len()
            )));
        }
        let mut logits = Vec::with_capacity(contexts * n * v);
        for (idx, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            for t in line.split(' ') {
                let x: f64 = t
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad logit '{t}'", idx + 3)))?;
                logits.push(x);
            }
        }
        if logits.len() != contexts * n * v {
            return Err(Error::Parse(format!(
                "expected {} logits, found {}",
                contexts * n * v,
                logits.len()
            )));
        }
        let context_index = context_ids.iter().enumerate().map(|(row, &id)| (id, row)).collect();
        Ok((
            TabularPolicy {
                num_contexts: contexts,
                response_len: n,
                vocab_size: v,
                logits,
                context_ids,
                context_index,
            },
            step,
        ))
    }
}
