//! MTP branch weighting and the combined next-token + lookahead loss.
//!
//! A model with H lookahead branches emits, at every decode position, one
//! main distribution over the vocabulary plus H branch distributions. The
//! training loss combines the standard next-token cross-entropy with the
//! branch losses, weighted by an exponentially decaying schedule so that
//! nearer lookaheads count more.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token id over a contiguous vocabulary `0..V`.
pub type Token = u32;

#[derive(Debug, Error, PartialEq)]
pub enum MtpError {
    #[error("invalid MTP config: {0}")]
    InvalidConfig(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("no trainable positions in sequence")]
    EmptySequence,
}

/// Lookahead configuration: branch count and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtpConfig {
    /// Number of lookahead branches H.
    pub num_branches: usize,
    /// Per-branch weight decay factor, in (0, 1].
    pub decay: f64,
}

impl MtpConfig {
    pub const DEFAULT_NUM_BRANCHES: usize = 5;
    pub const DEFAULT_DECAY: f64 = 0.9;

    pub fn new(num_branches: usize, decay: f64) -> Result<Self, MtpError> {
        if num_branches == 0 {
            return Err(MtpError::InvalidConfig("num_branches must be >= 1".into()));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(MtpError::InvalidConfig(format!(
                "decay must be in (0, 1], got {decay}"
            )));
        }
        Ok(Self { num_branches, decay })
    }
}

impl Default for MtpConfig {
    fn default() -> Self {
        Self {
            num_branches: Self::DEFAULT_NUM_BRANCHES,
            decay: Self::DEFAULT_DECAY,
        }
    }
}

/// A probability distribution over the vocabulary.
///
/// Entries are non-negative and sum to 1 within 1e-9; construction
/// enforces this so downstream code can rely on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

/// Tolerance on the probability-mass sum accepted by [`Distribution::new`].
pub const DISTRIBUTION_SUM_TOL: f64 = 1e-9;

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, MtpError> {
        if probs.is_empty() {
            return Err(MtpError::InvalidDistribution("empty support".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0)) {
            return Err(MtpError::InvalidDistribution(format!(
                "negative or non-finite entry {p}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOL {
            return Err(MtpError::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Uniform distribution over `vocab` tokens.
    pub fn uniform(vocab: usize) -> Self {
        assert!(vocab > 0);
        Self {
            probs: vec![1.0 / vocab as f64; vocab],
        }
    }

    /// All mass on `token`.
    pub fn one_hot(vocab: usize, token: Token) -> Self {
        assert!((token as usize) < vocab);
        let mut probs = vec![0.0; vocab];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    /// Softmax of raw logits (numerically stabilized by max subtraction).
    pub fn from_logits(logits: &[f64]) -> Self {
        assert!(!logits.is_empty());
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self {
            probs: exps.into_iter().map(|e| e / sum).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.probs[token as usize]
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    /// Validation for distributions that arrive from outside the
    /// constructor (e.g. deserialized model tables).
    pub fn check(probs: &[f64]) -> Result<(), MtpError> {
        Self::new(probs.to_vec()).map(|_| ())
    }
}

/// One decode step's output: main next-token distribution plus one
/// distribution per lookahead branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStepOutput {
    pub main: Distribution,
    pub branches: Vec<Distribution>,
}

impl ModelStepOutput {
    pub fn uniform(vocab: usize, num_branches: usize) -> Self {
        Self {
            main: Distribution::uniform(vocab),
            branches: vec![Distribution::uniform(vocab); num_branches],
        }
    }
}

/// Normalized per-branch loss weights, decaying by the configured factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    w: Vec<f64>,
}

impl LossWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn get(&self, branch: usize) -> f64 {
        self.w[branch]
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Branch weights `w_h = decay^(h-1) / sum_j decay^(j-1)` for h = 1..=H.
pub fn branch_weights(config: MtpConfig) -> LossWeights {
    let h = config.num_branches;
    let raw: Vec<f64> = (0..h).map(|i| config.decay.powi(i as i32)).collect();
    let sum: f64 = raw.iter().sum();
    LossWeights {
        w: raw.into_iter().map(|v| v / sum).collect(),
    }
}

/// Targets for one training position: the next token plus up to H future
/// tokens, with a mask for positions that fall past the end of the
/// sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTargets {
    pub next_token: Token,
    pub future_tokens: Vec<Token>,
    pub valid_mask: Vec<bool>,
}

impl PositionTargets {
    /// Targets for position `t` of `tokens`: next token `tokens[t+1]`,
    /// branch h targeting `tokens[t+1+h]`. Requires `t + 1 < tokens.len()`.
    pub fn at(tokens: &[Token], t: usize, num_branches: usize) -> Self {
        assert!(t + 1 < tokens.len(), "position has no next-token target");
        let next_token = tokens[t + 1];
        let mut future_tokens = Vec::with_capacity(num_branches);
        let mut valid_mask = Vec::with_capacity(num_branches);
        for h in 1..=num_branches {
            if t + 1 + h < tokens.len() {
                future_tokens.push(tokens[t + 1 + h]);
                valid_mask.push(true);
            }
        }
        Self {
            next_token,
            future_tokens,
            valid_mask,
        }
    }
}

/// Natural-log cross-entropy against a single target token.
///
/// A target with probability exactly 0 yields `f64::INFINITY`; no clamping
/// happens here, the caller chooses its own floor policy.
pub fn cross_entropy(dist: &Distribution, target: Token) -> f64 {
    let p = dist.prob(target);
    if p == 0.0 {
        f64::INFINITY
    } else {
        -p.ln()
    }
}

/// Combined loss at one position: `CE(main, next) + sum_h w_h * CE(branch_h,
/// future_h)` over the valid (unmasked) branch targets.
pub fn mtp_position_loss(
    main: &Distribution,
    branches: &[Distribution],
    targets: &PositionTargets,
    weights: &LossWeights,
) -> f64 {
    let mut loss = cross_entropy(main, targets.next_token);
    for (h, (&target, &valid)) in targets
        .future_tokens
        .iter()
        .zip(targets.valid_mask.iter())
        .enumerate()
    {
        if !valid || h >= branches.len() {
            continue;
        }
        loss += weights.get(h) * cross_entropy(&branches[h], target);
    }
    loss
}

/// Mean of [`mtp_position_loss`] over every position of `tokens` that has
/// a next-token target. `step_outputs[i]` is the model output at context
/// `tokens[..=i]`, so exactly `tokens.len() - 1` outputs are expected.
pub fn sequence_loss(
    step_outputs: &[ModelStepOutput],
    tokens: &[Token],
    config: MtpConfig,
) -> Result<f64, MtpError> {
    if tokens.len() < 2 || step_outputs.is_empty() {
        return Err(MtpError::EmptySequence);
    }
    if step_outputs.len() != tokens.len() - 1 {
        return Err(MtpError::InvalidConfig(format!(
            "expected {} step outputs for {} tokens, got {}",
            tokens.len() - 1,
            tokens.len(),
            step_outputs.len()
        )));
    }
    let weights = branch_weights(config);
    let mut total = 0.0;
    for (t, out) in step_outputs.iter().enumerate() {
        let targets = PositionTargets::at(tokens, t, config.num_branches);
        total += mtp_position_loss(&out.main, &out.branches, &targets, &weights);
    }
    Ok(total / step_outputs.len() as f64)
}
