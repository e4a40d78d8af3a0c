//! The verify-and-commit decode loop and its acceptance analytics.
//!
//! Each outer step commits one main token and then verifies the branch
//! proposals from the previous forward pass against the greedy path. A
//! proposal is accepted only if every earlier proposal was accepted and it
//! matches the greedy token at its position, so the decoded sequence is
//! token-for-token identical to plain autoregressive decoding. The saving
//! shows up purely as fewer forward passes: the verification extension is
//! one batched pass, and its output at the last accepted position seeds
//! the next outer step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::StepModel;
use crate::mtp::{Distribution, ModelStepOutput, MtpConfig, Token, DISTRIBUTION_SUM_TOL};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("max_tokens must be >= 1")]
    InvalidBudget,
    #[error("model emitted a malformed distribution at step {step}: {reason}")]
    MalformedDistribution { step: u64, reason: String },
    #[error("model provides {available} branches but config requires {required}")]
    InsufficientBranches { available: usize, required: usize },
    #[error("invalid acceptance rates: {0}")]
    InvalidRates(String),
    #[error("no steps recorded")]
    EmptyStats,
}

/// Decode session parameters.
#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub mtp: MtpConfig,
    pub max_tokens: usize,
    pub eos_token: Option<Token>,
}

impl DecodeConfig {
    pub fn new(mtp: MtpConfig, max_tokens: usize, eos_token: Option<Token>) -> Result<Self, DecodeError> {
        if max_tokens == 0 {
            return Err(DecodeError::InvalidBudget);
        }
        Ok(Self {
            mtp,
            max_tokens,
            eos_token,
        })
    }
}

/// Append-only per-position decode state with truncation semantics,
/// standing in for the KV cache. Truncating to `n` restores a state
/// observationally equivalent to having decoded only the first `n`
/// positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeCache {
    entries: Vec<Token>,
}

impl DecodeCache {
    pub fn from_prompt(prompt: &[Token]) -> Self {
        Self {
            entries: prompt.to_vec(),
        }
    }

    pub fn committed_len(&self) -> usize {
        self.entries.len()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.entries
    }

    pub fn append(&mut self, token: Token) {
        self.entries.push(token);
    }

    /// Roll back to the first `n` positions. Returns the number of
    /// entries dropped.
    pub fn truncate(&mut self, n: usize) -> usize {
        assert!(n <= self.entries.len());
        let dropped = self.entries.len() - n;
        self.entries.truncate(n);
        dropped
    }
}

/// Per-position strict acceptance counters plus forward-pass accounting.
///
/// `attempts[h]` counts verification steps where proposal position h+1 was
/// reachable (not past an accepted eos or the token budget); `accepts[h]`
/// counts the steps where proposals 1..=h+1 all matched the greedy path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub attempts: Vec<u64>,
    pub accepts: Vec<u64>,
    /// Outer steps that ran a verification extension.
    pub verify_steps: u64,
    pub emitted_tokens: u64,
    pub forward_passes: u64,
    pub rollbacks: u64,
}

impl AcceptanceStats {
    pub fn new(num_branches: usize) -> Self {
        Self {
            attempts: vec![0; num_branches],
            accepts: vec![0; num_branches],
            verify_steps: 0,
            emitted_tokens: 0,
            forward_passes: 0,
            rollbacks: 0,
        }
    }

    pub fn num_branches(&self) -> usize {
        self.attempts.len()
    }

    /// Measured strict per-position acceptance rates.
    pub fn rates(&self) -> Vec<f64> {
        self.attempts
            .iter()
            .zip(&self.accepts)
            .map(|(&at, &ac)| if at == 0 { 0.0 } else { ac as f64 / at as f64 })
            .collect()
    }

    /// Mean accepted proposals per verification step, plus the always
    /// committed main token.
    pub fn average_accepted_length(&self) -> f64 {
        if self.verify_steps == 0 {
            return 1.0;
        }
        let accepted: u64 = self.accepts.iter().sum();
        1.0 + accepted as f64 / self.verify_steps as f64
    }

    /// Explicit cross-session aggregation; sessions never share counters.
    pub fn merge(&mut self, other: &AcceptanceStats) {
        assert_eq!(self.attempts.len(), other.attempts.len());
        for (a, b) in self.attempts.iter_mut().zip(&other.attempts) {
            *a += b;
        }
        for (a, b) in self.accepts.iter_mut().zip(&other.accepts) {
            *a += b;
        }
        self.verify_steps += other.verify_steps;
        self.emitted_tokens += other.emitted_tokens;
        self.forward_passes += other.forward_passes;
        self.rollbacks += other.rollbacks;
    }
}

/// Flat report over an [`AcceptanceStats`], the serialized stats surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub rates: Vec<f64>,
    pub avg_accepted_length: f64,
    /// Display form "x.x / (H+1)".
    pub avg_accepted_display: String,
    pub tokens: u64,
    pub forward_passes: u64,
    pub tokens_per_forward_pass: f64,
    pub rollbacks: u64,
}

/// Summarize recorded stats. Errors when nothing was recorded.
pub fn acceptance_summary(stats: &AcceptanceStats) -> Result<AcceptanceReport, DecodeError> {
    if stats.verify_steps == 0 && stats.emitted_tokens == 0 {
        return Err(DecodeError::EmptyStats);
    }
    let avg = stats.average_accepted_length();
    Ok(AcceptanceReport {
        rates: stats.rates(),
        avg_accepted_length: avg,
        avg_accepted_display: format!("{:.1} / {}", avg, stats.num_branches() + 1),
        tokens: stats.emitted_tokens,
        forward_passes: stats.forward_passes,
        tokens_per_forward_pass: if stats.forward_passes == 0 {
            0.0
        } else {
            stats.emitted_tokens as f64 / stats.forward_passes as f64
        },
        rollbacks: stats.rollbacks,
    })
}

/// Argmax with ties broken toward the lowest token id.
pub fn greedy_pick(dist: &Distribution) -> Token {
    let mut best = 0usize;
    let mut best_p = dist.probs()[0];
    for (i, &p) in dist.probs().iter().enumerate().skip(1) {
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    best as Token
}

fn validate_output(
    out: &ModelStepOutput,
    required_branches: usize,
    step: u64,
) -> Result<(), DecodeError> {
    let check_dist = |d: &Distribution| -> Result<(), String> {
        let mut sum = 0.0;
        for &p in d.probs() {
            if !(p >= 0.0) {
                return Err(format!("negative or non-finite probability {p}"));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOL {
            return Err(format!("probabilities sum to {sum}"));
        }
        Ok(())
    };
    check_dist(&out.main).map_err(|reason| DecodeError::MalformedDistribution { step, reason })?;
    for b in &out.branches {
        check_dist(b).map_err(|reason| DecodeError::MalformedDistribution { step, reason })?;
    }
    if out.branches.len() < required_branches {
        return Err(DecodeError::InsufficientBranches {
            available: out.branches.len(),
            required: required_branches,
        });
    }
    Ok(())
}

/// Reference oracle: one greedy token per forward pass until the budget or
/// eos. The verified decoder must reproduce this output exactly.
pub fn autoregressive_decode<M: StepModel>(
    model: &M,
    prompt: &[Token],
    config: &DecodeConfig,
) -> Result<Vec<Token>, DecodeError> {
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    for step in 0.. {
        let step_out = model.step(&context);
        validate_output(&step_out, 0, step)?;
        let token = greedy_pick(&step_out.main);
        out.push(token);
        context.push(token);
        if Some(token) == config.eos_token || out.len() >= config.max_tokens {
            break;
        }
    }
    Ok(out)
}

/// Speculative decode with strict prefix verification.
///
/// Per outer step: commit the main token, extend the cache provisionally
/// with the branch proposals, run the verification extension (counted as
/// one batched forward pass), accept the matching prefix, truncate the
/// cache back to the committed length, and reuse the extension output at
/// the last accepted position as the next step's main pass.
pub fn verified_decode<M: StepModel>(
    model: &M,
    prompt: &[Token],
    config: &DecodeConfig,
) -> Result<(Vec<Token>, AcceptanceStats), DecodeError> {
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    let h = config.mtp.num_branches;
    let mut cache = DecodeCache::from_prompt(prompt);
    let mut stats = AcceptanceStats::new(h);
    let mut emitted: Vec<Token> = Vec::new();
    let mut step_idx: u64 = 0;

    let mut out = model.step(cache.tokens());
    validate_output(&out, h, step_idx)?;
    stats.forward_passes += 1;

    loop {
        let main_token = greedy_pick(&out.main);
        cache.append(main_token);
        emitted.push(main_token);
        stats.emitted_tokens += 1;
        if Some(main_token) == config.eos_token || emitted.len() >= config.max_tokens {
            break;
        }

        let proposals: Vec<Token> = out.branches[..h].iter().map(greedy_pick).collect();

        // Verification extension: model outputs at the committed context
        // and at each provisional proposal prefix. One batched pass.
        step_idx += 1;
        stats.forward_passes += 1;
        stats.verify_steps += 1;
        let committed_len = cache.committed_len();
        let mut ext_outs: Vec<ModelStepOutput> = Vec::with_capacity(h + 1);
        for j in 0..=h {
            let ext = model.step(cache.tokens());
            validate_output(&ext, h, step_idx)?;
            ext_outs.push(ext);
            if j < h {
                cache.append(proposals[j]);
            }
        }

        let mut accepted = 0usize;
        let mut prefix_ok = true;
        let mut hit_eos = false;
        for pos in 1..=h {
            if emitted.len() >= config.max_tokens {
                break; // position not reachable within the budget
            }
            stats.attempts[pos - 1] += 1;
            if prefix_ok {
                let greedy = greedy_pick(&ext_outs[pos - 1].main);
                if proposals[pos - 1] == greedy {
                    stats.accepts[pos - 1] += 1;
                    emitted.push(greedy);
                    stats.emitted_tokens += 1;
                    accepted = pos;
                    if Some(greedy) == config.eos_token {
                        hit_eos = true;
                        break;
                    }
                } else {
                    prefix_ok = false;
                }
            }
        }

        // Rollback: drop the provisional entries beyond the committed
        // prefix. No partial-entry surgery.
        let dropped = cache.truncate(committed_len + accepted);
        if dropped > 0 {
            stats.rollbacks += 1;
        }

        if hit_eos || emitted.len() >= config.max_tokens {
            break;
        }
        // The extension output at the last accepted position is exactly
        // the model output at the committed context; no extra pass needed.
        out = ext_outs.swap_remove(accepted);
    }

    Ok((emitted, stats))
}

/// Tokens-per-step expectation from strict per-position rates:
/// `1 + sum(rates)` out of H+1.
pub fn expected_accepted_length(rates: &[f64]) -> Result<f64, DecodeError> {
    validate_rates(rates)?;
    Ok(1.0 + rates.iter().sum::<f64>())
}

fn validate_rates(rates: &[f64]) -> Result<(), DecodeError> {
    for &r in rates {
        if !(0.0..=1.0).contains(&r) {
            return Err(DecodeError::InvalidRates(format!("rate {r} outside [0, 1]")));
        }
    }
    for pair in rates.windows(2) {
        if pair[1] > pair[0] {
            return Err(DecodeError::InvalidRates(format!(
                "rates must be non-increasing (strict prefix property), got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

/// Monte Carlo model of strict acceptance: each step draws the accepted
/// prefix length from the conditional per-position probabilities implied
/// by the strict rates, so the measured rates converge to the inputs.
pub fn simulate_acceptance(
    rates: &[f64],
    steps: u64,
    seed: u64,
) -> Result<AcceptanceStats, DecodeError> {
    use rand::{Rng, SeedableRng};
    validate_rates(rates)?;
    if steps == 0 {
        return Err(DecodeError::EmptyStats);
    }
    let h = rates.len();
    // Conditional match probability at position i given the prefix held:
    // r_i / r_{i-1} (1 when both are zero).
    let mut conditional = Vec::with_capacity(h);
    let mut prev = 1.0;
    for &r in rates {
        conditional.push(if prev == 0.0 { 0.0 } else { r / prev });
        prev = r;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut stats = AcceptanceStats::new(h);
    for _ in 0..steps {
        stats.verify_steps += 1;
        stats.forward_passes += 1;
        stats.emitted_tokens += 1; // the main token
        let mut alive = true;
        let mut accepted = 0usize;
        for (i, &c) in conditional.iter().enumerate() {
            stats.attempts[i] += 1;
            if alive && rng.gen::<f64>() < c {
                stats.accepts[i] += 1;
                stats.emitted_tokens += 1;
                accepted = i + 1;
            } else {
                alive = false;
            }
        }
        if accepted < h {
            stats.rollbacks += 1;
        }
    }
    Ok(stats)
}
