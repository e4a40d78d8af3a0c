//! Desk-scale step models.
//!
//! Two models implement the [`StepModel`] contract used by the decoder:
//!
//! - [`TableModel`] — a deterministic lookup table keyed on the last k
//!   context tokens, used to exercise the decode loop with fully
//!   controlled outputs.
//! - [`LinearMtpModel`] — a trainable linear model with a mean-of-window
//!   context summary, a backbone transform, and per-branch projections
//!   that chain each branch on the previous branch's hidden state plus a
//!   shifted token embedding. Gradients are written by hand and checked
//!   against central finite differences in the tests.
//!
//! The two-stage training recipe lives here as well: frozen-branch
//! alignment first (only the branch projections move), then joint
//! calibration (everything moves, lower learning rate).

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mtp::{
    branch_weights, Distribution, LossWeights, ModelStepOutput, MtpConfig, PositionTargets, Token,
};

/// A model the decoder can step: given a committed context, produce the
/// main next-token distribution and the branch lookahead distributions.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn num_branches(&self) -> usize;
    /// Output at `context`. Must be deterministic: identical contexts give
    /// identical outputs.
    fn step(&self, context: &[Token]) -> ModelStepOutput;
}

// ---------------------------------------------------------------------------
// Table model
// ---------------------------------------------------------------------------

/// Deterministic table model: exact lookup on the last `context_order`
/// tokens, uniform fallback when the key is absent.
#[derive(Debug, Clone)]
pub struct TableModel {
    context_order: usize,
    vocab_size: usize,
    num_branches: usize,
    entries: HashMap<Vec<Token>, ModelStepOutput>,
    fallback: ModelStepOutput,
}

impl TableModel {
    pub fn new(context_order: usize, vocab_size: usize, num_branches: usize) -> Self {
        Self {
            context_order,
            vocab_size,
            num_branches,
            entries: HashMap::new(),
            fallback: ModelStepOutput::uniform(vocab_size, num_branches),
        }
    }

    /// Store an output under a context key. The key is matched against the
    /// last `context_order` tokens of the decode context.
    pub fn insert(&mut self, key: Vec<Token>, output: ModelStepOutput) {
        self.entries.insert(key, output);
    }

    pub fn set_fallback(&mut self, output: ModelStepOutput) {
        self.fallback = output;
    }

    fn key_for<'a>(&self, context: &'a [Token]) -> &'a [Token] {
        if context.len() > self.context_order {
            &context[context.len() - self.context_order..]
        } else {
            context
        }
    }

    /// Randomized model for differential testing: peaked main
    /// distributions over every context key of length `context_order`,
    /// independently random peaked branch distributions.
    pub fn random(
        vocab_size: usize,
        context_order: usize,
        num_branches: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut model = Self::new(context_order, vocab_size, num_branches);
        let mut keys: Vec<Vec<Token>> = vec![vec![]];
        for _ in 0..context_order {
            keys = keys
                .into_iter()
                .flat_map(|k| {
                    (0..vocab_size as Token).map(move |t| {
                        let mut k2 = k.clone();
                        k2.push(t);
                        k2
                    })
                })
                .collect();
        }
        let peaked = |rng: &mut ChaCha8Rng| {
            let logits: Vec<f64> = (0..vocab_size).map(|_| rng.gen_range(-4.0..4.0)).collect();
            Distribution::from_logits(&logits)
        };
        for key in keys {
            let main = peaked(rng);
            let branches = (0..num_branches).map(|_| peaked(rng)).collect();
            model.insert(key, ModelStepOutput { main, branches });
        }
        model
    }
}

impl StepModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn num_branches(&self) -> usize {
        self.num_branches
    }

    fn step(&self, context: &[Token]) -> ModelStepOutput {
        let key = self.key_for(context);
        self.entries
            .get(key)
            .cloned()
            .unwrap_or_else(|| self.fallback.clone())
    }
}

// ---------------------------------------------------------------------------
// Linear MTP model
// ---------------------------------------------------------------------------

/// Probability floor applied inside the trainer's loss so that a
/// zero-probability target cannot produce a non-finite step.
pub const TRAIN_PROB_FLOOR: f64 = 1e-12;

/// Default peak learning rates for the two training stages.
pub const DEFAULT_STAGE1_LR: f64 = 2e-4;
pub const DEFAULT_STAGE2_LR: f64 = 2e-5;

/// Half-width of the uniform parameter init interval.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    /// Only the branch projections are optimized; embeddings, backbone and
    /// output head stay bitwise frozen.
    FrozenBranchAlignment,
    /// All parameter blocks are optimized.
    JointCalibration,
}

impl TrainStage {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            TrainStage::FrozenBranchAlignment => DEFAULT_STAGE1_LR,
            TrainStage::JointCalibration => DEFAULT_STAGE2_LR,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStageConfig {
    pub stage: TrainStage,
    pub learning_rate: f64,
    pub steps: usize,
    /// Reserved for data shuffling; the trainer is currently full-batch
    /// and deterministic, so the seed does not influence the result.
    pub seed: u64,
}

impl TrainStageConfig {
    pub fn new(stage: TrainStage, learning_rate: f64, steps: usize, seed: u64) -> Result<Self, TrainError> {
        if !(learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be > 0, got {learning_rate}"
            )));
        }
        Ok(Self {
            stage,
            learning_rate,
            steps,
            seed,
        })
    }
}

/// Trainable linear model with H chained lookahead branches.
///
/// Shapes (row-major `Vec<f64>`):
/// - `embed`: V x d token embeddings, shared by context, shifts, and (via
///   the head) output.
/// - `backbone`: d x d transform of the mean context embedding.
/// - `branch_proj[h]`: d x 2d, mapping the unit-normalized pair
///   (previous hidden state, shifted token embedding) back to d.
/// - `head`: V x d shared output projection for the main path and every
///   branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMtpModel {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_branches: usize,
    /// Context summary window: the mean embedding is taken over the last
    /// `context_window` tokens.
    pub context_window: usize,
    pub embed: Vec<f64>,
    pub backbone: Vec<f64>,
    pub branch_proj: Vec<Vec<f64>>,
    pub head: Vec<f64>,
}

/// Gradients mirroring the model's parameter blocks.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub embed: Vec<f64>,
    pub backbone: Vec<f64>,
    pub branch_proj: Vec<Vec<f64>>,
    pub head: Vec<f64>,
}

fn unit_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Backward through `y = x / ||x||`: `dx = (dy - y (y . dy)) / ||x||`.
/// Zero-norm inputs pass the gradient through unchanged, matching the
/// identity fallback in `unit_normalize`.
fn unit_normalize_backward(x: &[f64], y: &[f64], dy: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return dy.to_vec();
    }
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(dy)
        .map(|(yi, dyi)| (dyi - yi * dot) / n)
        .collect()
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| {
            let row = &m[r * cols..(r + 1) * cols];
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

fn matvec_t(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    // m^T x where m is rows x cols.
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] += row[c] * x[r];
        }
    }
    out
}

fn add_outer(acc: &mut [f64], rows_vec: &[f64], cols_vec: &[f64]) {
    let cols = cols_vec.len();
    for (r, &rv) in rows_vec.iter().enumerate() {
        if rv == 0.0 {
            continue;
        }
        let row = &mut acc[r * cols..(r + 1) * cols];
        for (c, &cv) in cols_vec.iter().enumerate() {
            row[c] += rv * cv;
        }
    }
}

/// Per-position forward trace kept for the backward pass.
struct ForwardTrace {
    context_mean: Vec<f64>,
    /// Hidden states h_0..h_m (h_0 from the backbone, h_i from branch i).
    hiddens: Vec<Vec<f64>>,
    /// Normalized pairs (a, b) fed into branch i (index i-1).
    norm_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    /// Shift token embeddings (unnormalized) for branch i (index i-1).
    shift_embeds: Vec<Vec<f64>>,
    /// Softmax outputs p_0..p_m.
    probs: Vec<Vec<f64>>,
}

impl LinearMtpModel {
    pub fn zeroed(
        vocab_size: usize,
        hidden_dim: usize,
        num_branches: usize,
        context_window: usize,
    ) -> Self {
        assert!(vocab_size > 0 && hidden_dim > 0 && num_branches > 0 && context_window > 0);
        Self {
            vocab_size,
            hidden_dim,
            num_branches,
            context_window,
            embed: vec![0.0; vocab_size * hidden_dim],
            backbone: vec![0.0; hidden_dim * hidden_dim],
            branch_proj: vec![vec![0.0; hidden_dim * 2 * hidden_dim]; num_branches],
            head: vec![0.0; vocab_size * hidden_dim],
        }
    }

    /// Seeded uniform init in `[-INIT_SCALE, INIT_SCALE]` for every block.
    pub fn random(
        vocab_size: usize,
        hidden_dim: usize,
        num_branches: usize,
        context_window: usize,
        seed: u64,
    ) -> Self {
        let mut model = Self::zeroed(vocab_size, hidden_dim, num_branches, context_window);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |v: &mut [f64], rng: &mut ChaCha8Rng| {
            for x in v.iter_mut() {
                *x = rng.gen_range(-INIT_SCALE..=INIT_SCALE);
            }
        };
        fill(&mut model.embed, &mut rng);
        fill(&mut model.backbone, &mut rng);
        for g in &mut model.branch_proj {
            fill(g, &mut rng);
        }
        fill(&mut model.head, &mut rng);
        model
    }

    /// Re-initialize each branch projection: the square sub-block acting on
    /// the hidden state is copied from the backbone (the branches inherit
    /// the converged transform), the sub-block acting on the shift
    /// embedding is freshly randomized from the seeded uniform scheme.
    pub fn init_branches_from_backbone(mut self, seed: u64) -> Self {
        let d = self.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in &mut self.branch_proj {
            for r in 0..d {
                for c in 0..d {
                    g[r * 2 * d + c] = self.backbone[r * d + c];
                }
                for c in d..2 * d {
                    g[r * 2 * d + c] = rng.gen_range(-INIT_SCALE..=INIT_SCALE);
                }
            }
        }
        self
    }

    /// The d x d sub-block of branch `h`'s projection that multiplies the
    /// normalized hidden state.
    pub fn branch_hidden_block(&self, h: usize) -> Vec<f64> {
        let d = self.hidden_dim;
        let g = &self.branch_proj[h];
        let mut out = Vec::with_capacity(d * d);
        for r in 0..d {
            out.extend_from_slice(&g[r * 2 * d..r * 2 * d + d]);
        }
        out
    }

    fn context_mean(&self, context: &[Token]) -> Vec<f64> {
        let d = self.hidden_dim;
        let window = if context.len() > self.context_window {
            &context[context.len() - self.context_window..]
        } else {
            context
        };
        let mut mean = vec![0.0; d];
        for &t in window {
            let e = &self.embed[t as usize * d..(t as usize + 1) * d];
            for (m, &x) in mean.iter_mut().zip(e) {
                *m += x;
            }
        }
        let n = window.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        mean
    }

    fn embed_row(&self, t: Token) -> &[f64] {
        let d = self.hidden_dim;
        &self.embed[t as usize * d..(t as usize + 1) * d]
    }

    fn forward_trace(&self, context: &[Token], shifts: &[Token]) -> ForwardTrace {
        assert!(!context.is_empty(), "context must be non-empty");
        let d = self.hidden_dim;
        let m = shifts.len().min(self.num_branches);
        let context_mean = self.context_mean(context);
        let h0 = matvec(&self.backbone, d, d, &context_mean);
        let mut hiddens = vec![h0];
        let mut norm_pairs = Vec::with_capacity(m);
        let mut shift_embeds = Vec::with_capacity(m);
        for (i, &s) in shifts.iter().take(m).enumerate() {
            let a = unit_normalize(&hiddens[i]);
            let se = self.embed_row(s).to_vec();
            let b = unit_normalize(&se);
            let mut z = a.clone();
            z.extend_from_slice(&b);
            let h = matvec(&self.branch_proj[i], d, 2 * d, &z);
            hiddens.push(h);
            norm_pairs.push((a, b));
            shift_embeds.push(se);
        }
        let probs = hiddens
            .iter()
            .map(|h| {
                let logits = matvec(&self.head, self.vocab_size, d, h);
                softmax(&logits)
            })
            .collect();
        ForwardTrace {
            context_mean,
            hiddens,
            norm_pairs,
            shift_embeds,
            probs,
        }
    }

    /// Teacher-forced forward pass. `shifts[i]` is the token fed to branch
    /// i+1 (ground truth in training, previously proposed token at
    /// inference). Branches beyond the available shifts are omitted.
    pub fn forward(&self, context: &[Token], shifts: &[Token]) -> ModelStepOutput {
        let trace = self.forward_trace(context, shifts);
        let mut dists = trace
            .probs
            .into_iter()
            .map(|p| Distribution::new(renormalize(p)).expect("softmax output is a distribution"));
        let main = dists.next().unwrap();
        ModelStepOutput {
            main,
            branches: dists.collect(),
        }
    }

    /// Inference-time step: the shift for branch 1 is the greedy main
    /// token, the shift for branch h is the greedy token of branch h-1.
    pub fn infer_step(&self, context: &[Token]) -> ModelStepOutput {
        let d = self.hidden_dim;
        let mean = self.context_mean(context);
        let mut hidden = matvec(&self.backbone, d, d, &mean);
        let logits = matvec(&self.head, self.vocab_size, d, &hidden);
        let main = Distribution::new(renormalize(softmax(&logits))).unwrap();
        let mut shift = crate::decoder::greedy_pick(&main);
        let mut branches = Vec::with_capacity(self.num_branches);
        for h in 0..self.num_branches {
            let a = unit_normalize(&hidden);
            let b = unit_normalize(self.embed_row(shift));
            let mut z = a;
            z.extend_from_slice(&b);
            hidden = matvec(&self.branch_proj[h], d, 2 * d, &z);
            let logits = matvec(&self.head, self.vocab_size, d, &hidden);
            let dist = Distribution::new(renormalize(softmax(&logits))).unwrap();
            shift = crate::decoder::greedy_pick(&dist);
            branches.push(dist);
        }
        ModelStepOutput {
            main: main.clone(),
            branches,
        }
    }

    /// Teacher-forced loss over one sequence: mean over positions of the
    /// combined next-token + branch loss, with the trainer's probability
    /// floor applied.
    pub fn sequence_loss(&self, tokens: &[Token], config: MtpConfig) -> f64 {
        let weights = branch_weights(config);
        let mut total = 0.0;
        let positions = tokens.len().saturating_sub(1);
        assert!(positions > 0, "sequence has no trainable positions");
        for t in 0..positions {
            total += self.position_loss(tokens, t, config, &weights).0;
        }
        total / positions as f64
    }

    fn position_loss(
        &self,
        tokens: &[Token],
        t: usize,
        config: MtpConfig,
        weights: &LossWeights,
    ) -> (f64, ForwardTrace, PositionTargets) {
        let targets = PositionTargets::at(tokens, t, config.num_branches);
        let shifts: Vec<Token> = (1..=targets.future_tokens.len())
            .map(|h| tokens[t + h])
            .collect();
        let trace = self.forward_trace(&tokens[..=t], &shifts);
        let mut loss = floored_nll(&trace.probs[0], targets.next_token);
        for (h, &target) in targets.future_tokens.iter().enumerate() {
            loss += weights.get(h) * floored_nll(&trace.probs[h + 1], target);
        }
        (loss, trace, targets)
    }

    /// Mean loss and exact analytic gradients over a batch of sequences.
    /// The loss is the mean over sequences of the per-sequence mean
    /// position loss; gradients are of exactly that scalar.
    pub fn loss_and_gradients(
        &self,
        batch: &[Vec<Token>],
        config: MtpConfig,
    ) -> Result<(f64, Gradients), TrainError> {
        if batch.is_empty() || batch.iter().all(|s| s.len() < 2) {
            return Err(TrainError::EmptyBatch);
        }
        let d = self.hidden_dim;
        let weights = branch_weights(config);
        let mut grads = Gradients {
            embed: vec![0.0; self.embed.len()],
            backbone: vec![0.0; self.backbone.len()],
            branch_proj: self.branch_proj.iter().map(|g| vec![0.0; g.len()]).collect(),
            head: vec![0.0; self.head.len()],
        };
        let n_seq = batch.iter().filter(|s| s.len() >= 2).count() as f64;
        let mut total_loss = 0.0;

        for seq in batch.iter().filter(|s| s.len() >= 2) {
            let positions = seq.len() - 1;
            let scale = 1.0 / (n_seq * positions as f64);
            let mut seq_loss = 0.0;
            for t in 0..positions {
                let (loss, trace, targets) = self.position_loss(seq, t, config, &weights);
                seq_loss += loss;
                self.backward_position(&trace, &targets, &weights, scale, seq, t, d, &mut grads);
            }
            total_loss += seq_loss / positions as f64;
        }
        Ok((total_loss / n_seq, grads))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_position(
        &self,
        trace: &ForwardTrace,
        targets: &PositionTargets,
        weights: &LossWeights,
        scale: f64,
        seq: &[Token],
        t: usize,
        d: usize,
        grads: &mut Gradients,
    ) {
        let m = targets.future_tokens.len();
        // dLogits for levels 0..=m. Level 0 is the main head (weight 1),
        // level h is branch h with weight w_h. The floor zeroes the
        // gradient when it is active.
        let mut dlogits: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        for level in 0..=m {
            let target = if level == 0 {
                targets.next_token
            } else {
                targets.future_tokens[level - 1]
            };
            let w = if level == 0 { 1.0 } else { weights.get(level - 1) };
            let p = &trace.probs[level];
            let mut dl = vec![0.0; self.vocab_size];
            if p[target as usize] > TRAIN_PROB_FLOOR {
                for (v, x) in dl.iter_mut().enumerate() {
                    *x = scale * w * (p[v] - if v == target as usize { 1.0 } else { 0.0 });
                }
            }
            dlogits.push(dl);
        }

        // Head gradient accumulates over every level; hidden gradients
        // chain from the deepest branch back to the backbone.
        for (level, dl) in dlogits.iter().enumerate() {
            add_outer(&mut grads.head, dl, &trace.hiddens[level]);
        }
        let mut dh = matvec_t(&self.head, self.vocab_size, d, &dlogits[m]);
        for level in (1..=m).rev() {
            let (a, b) = &trace.norm_pairs[level - 1];
            let mut z = a.clone();
            z.extend_from_slice(b);
            add_outer(&mut grads.branch_proj[level - 1], &dh, &z);
            let dz = matvec_t(&self.branch_proj[level - 1], d, 2 * d, &dh);
            let da = &dz[..d];
            let db = &dz[d..];
            // Shift embedding gradient through its normalization.
            let dse = unit_normalize_backward(&trace.shift_embeds[level - 1], b, db);
            let shift_tok = seq[t + level] as usize;
            for (c, g) in dse.iter().enumerate() {
                grads.embed[shift_tok * d + c] += g;
            }
            // Previous hidden: normalization path plus its own logits.
            let mut dprev = unit_normalize_backward(&trace.hiddens[level - 1], a, da);
            let from_logits = matvec_t(&self.head, self.vocab_size, d, &dlogits[level - 1]);
            for (x, y) in dprev.iter_mut().zip(from_logits) {
                *x += y;
            }
            dh = dprev;
        }
        // Backbone and context embeddings.
        add_outer(&mut grads.backbone, &dh, &trace.context_mean);
        let dc = matvec_t(&self.backbone, d, d, &dh);
        let context = &seq[..=t];
        let window = if context.len() > self.context_window {
            &context[context.len() - self.context_window..]
        } else {
            context
        };
        let inv = 1.0 / window.len() as f64;
        for &tok in window {
            for (c, g) in dc.iter().enumerate() {
                grads.embed[tok as usize * d + c] += g * inv;
            }
        }
    }

    /// Apply one SGD step. In the frozen stage only the branch projections
    /// move; embeddings, backbone, and head are left untouched.
    fn apply_gradients(&mut self, grads: &Gradients, lr: f64, stage: TrainStage) {
        for (g, gr) in self.branch_proj.iter_mut().zip(&grads.branch_proj) {
            for (p, d) in g.iter_mut().zip(gr) {
                *p -= lr * d;
            }
        }
        if stage == TrainStage::JointCalibration {
            for (p, d) in self.embed.iter_mut().zip(&grads.embed) {
                *p -= lr * d;
            }
            for (p, d) in self.backbone.iter_mut().zip(&grads.backbone) {
                *p -= lr * d;
            }
            for (p, d) in self.head.iter_mut().zip(&grads.head) {
                *p -= lr * d;
            }
        }
    }
}

impl StepModel for LinearMtpModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn num_branches(&self) -> usize {
        self.num_branches
    }

    fn step(&self, context: &[Token]) -> ModelStepOutput {
        self.infer_step(context)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Exact renormalization so accumulated rounding cannot trip the
/// distribution sum check.
fn renormalize(mut p: Vec<f64>) -> Vec<f64> {
    let sum: f64 = p.iter().sum();
    for x in &mut p {
        *x /= sum;
    }
    p
}

fn floored_nll(probs: &[f64], target: Token) -> f64 {
    let p = probs[target as usize];
    if !p.is_finite() {
        // Propagate numerical blowup so the trainer can detect divergence;
        // the floor must not mask NaN.
        return f64::NAN;
    }
    -p.max(TRAIN_PROB_FLOOR).ln()
}

/// Result of a training stage: the updated model and the per-step loss
/// trajectory.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LinearMtpModel,
    pub losses: Vec<f64>,
}

/// Run one training stage with plain full-batch gradient descent.
pub fn train_stage(
    model: LinearMtpModel,
    data: &[Vec<Token>],
    stage: TrainStageConfig,
    mtp: MtpConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut model = model;
    let mut losses = Vec::with_capacity(stage.steps);
    for step in 0..stage.steps {
        let (loss, grads) = model.loss_and_gradients(data, mtp)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        model.apply_gradients(&grads, stage.learning_rate, stage.stage);
        losses.push(loss);
    }
    Ok(TrainOutcome { model, losses })
}

/// Run frozen-branch alignment followed by joint calibration.
pub fn train_two_stage(
    model: LinearMtpModel,
    data: &[Vec<Token>],
    stage1: TrainStageConfig,
    stage2: TrainStageConfig,
    mtp: MtpConfig,
) -> Result<TrainOutcome, TrainError> {
    let first = train_stage(model, data, stage1, mtp)?;
    let mut second = train_stage(first.model, data, stage2, mtp)?;
    let mut losses = first.losses;
    losses.append(&mut second.losses);
    Ok(TrainOutcome {
        model: second.model,
        losses,
    })
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

/// Version tag written at the head of every model file.
pub const MODEL_FORMAT_TAG: &str = "mtp-linear-model v1";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("version tag mismatch: expected {expected:?}, found {found:?}")]
    VersionMismatch { expected: String, found: String },
    #[error("truncated model file: {0}")]
    Truncated(String),
    #[error("malformed model file: {0}")]
    Malformed(String),
}

impl LinearMtpModel {
    /// Text serialization: version tag, shape header, then the parameter
    /// blocks row-major, one block per line. Floats use Rust's shortest
    /// round-trip formatting, so write/read is lossless.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), ModelIoError> {
        writeln!(w, "{MODEL_FORMAT_TAG}")?;
        writeln!(
            w,
            "vocab {} hidden {} branches {} window {}",
            self.vocab_size, self.hidden_dim, self.num_branches, self.context_window
        )?;
        let write_block = |w: &mut W, name: &str, data: &[f64]| -> Result<(), ModelIoError> {
            write!(w, "{name}")?;
            for x in data {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
            Ok(())
        };
        write_block(&mut w, "embed", &self.embed)?;
        write_block(&mut w, "backbone", &self.backbone)?;
        for (i, g) in self.branch_proj.iter().enumerate() {
            write_block(&mut w, &format!("branch{i}"), g)?;
        }
        write_block(&mut w, "head", &self.head)?;
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, ModelIoError> {
        let mut lines = r.lines();
        let tag = lines
            .next()
            .ok_or_else(|| ModelIoError::Truncated("missing version tag".into()))??;
        if tag.trim() != MODEL_FORMAT_TAG {
            return Err(ModelIoError::VersionMismatch {
                expected: MODEL_FORMAT_TAG.into(),
                found: tag,
            });
        }
        let header = lines
            .next()
            .ok_or_else(|| ModelIoError::Truncated("missing shape header".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 8
            || parts[0] != "vocab"
            || parts[2] != "hidden"
            || parts[4] != "branches"
            || parts[6] != "window"
        {
            return Err(ModelIoError::Malformed(format!("bad shape header: {header}")));
        }
        let parse_dim = |s: &str| -> Result<usize, ModelIoError> {
            s.parse()
                .map_err(|_| ModelIoError::Malformed(format!("bad dimension {s}")))
        };
        let vocab = parse_dim(parts[1])?;
        let hidden = parse_dim(parts[3])?;
        let branches = parse_dim(parts[5])?;
        let window = parse_dim(parts[7])?;
        if vocab == 0 || hidden == 0 || branches == 0 || window == 0 {
            return Err(ModelIoError::Malformed("zero dimension in header".into()));
        }

        let mut read_block = |name: &str, len: usize| -> Result<Vec<f64>, ModelIoError> {
            let line = lines
                .next()
                .ok_or_else(|| ModelIoError::Truncated(format!("missing block {name}")))??;
            let mut it = line.split_whitespace();
            let label = it
                .next()
                .ok_or_else(|| ModelIoError::Truncated(format!("empty block line for {name}")))?;
            if label != name {
                return Err(ModelIoError::Malformed(format!(
                    "expected block {name}, found {label}"
                )));
            }
            let data: Result<Vec<f64>, _> = it.map(|s| s.parse::<f64>()).collect();
            let data =
                data.map_err(|e| ModelIoError::Malformed(format!("bad float in {name}: {e}")))?;
            if data.len() != len {
                return Err(ModelIoError::Truncated(format!(
                    "block {name}: expected {len} values, found {}",
                    data.len()
                )));
            }
            Ok(data)
        };

        let embed = read_block("embed", vocab * hidden)?;
        let backbone = read_block("backbone", hidden * hidden)?;
        let mut branch_proj = Vec::with_capacity(branches);
        for i in 0..branches {
            branch_proj.push(read_block(&format!("branch{i}"), hidden * 2 * hidden)?);
        }
        let head = read_block("head", vocab * hidden)?;
        Ok(Self {
            vocab_size: vocab,
            hidden_dim: hidden,
            num_branches: branches,
            context_window: window,
            embed,
            backbone,
            branch_proj,
            head,
        })
    }
}
