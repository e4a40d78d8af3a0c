//! Multi-token prediction (MTP) speculative decoding at desk scale.
//!
//! The crate is organized around five subsystems:
//!
//! - [`mtp`] — branch weighting and the combined training loss for a model
//!   that predicts H future tokens alongside the usual next token.
//! - [`model`] — two step models: a deterministic table model for decoder
//!   testing and a trainable linear MTP model with hand-written gradients,
//!   plus the two-stage training recipe (frozen-branch alignment, then
//!   joint calibration).
//! - [`decoder`] — the verify-and-commit decode loop. Proposals from the
//!   MTP branches are accepted only as a prefix that matches the greedy
//!   path, so the output is token-for-token identical to plain
//!   autoregressive decoding; the win is fewer forward passes.
//! - [`rover`] — ROVER-style fusion of three ASR hypotheses into a word
//!   transition network, token-level voting, disagreement-rate filtering,
//!   and concatenation into long-form samples.
//! - [`metrics`] — edit-distance error rates (WER/CER) and real-time
//!   factor arithmetic.

pub mod cli;
pub mod decoder;
pub mod metrics;
pub mod model;
pub mod mtp;
pub mod rover;

pub use mtp::Token;
