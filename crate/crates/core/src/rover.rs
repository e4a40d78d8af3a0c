//! Three-system hypothesis fusion for long-form pseudo-labeling.
//!
//! Pipeline per clip: normalize the three raw transcripts, align them into
//! a word transition network (hypothesis 1 seeds it, 2 and 3 fold in by
//! minimum-edit alignment), vote per slot at token level, compute the
//! disagreement rate, and keep the clip only when the rate is at or below
//! the threshold. Kept neighbor clips concatenate into long-form samples
//! under a duration budget; a pluggable refinement hook post-processes
//! each sample (identity by default).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Disagreement-rate discard threshold: clips with a rate strictly above
/// this are dropped.
pub const DEFAULT_DISAGREEMENT_THRESHOLD: f64 = 0.05;

/// Segmentation bound on clip duration, seconds.
pub const MAX_CLIP_DURATION_SECS: f64 = 30.0;

pub const NUM_SYSTEMS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("invalid clip {clip_id}: {reason}")]
    InvalidClip { clip_id: String, reason: String },
}

/// One pre-segmented clip with its three system hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub start: f64,
    pub end: f64,
    pub hyps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
}

impl ClipRecord {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let fail = |reason: String| FusionError::InvalidClip {
            clip_id: self.clip_id.clone(),
            reason,
        };
        if !(self.end > self.start) {
            return Err(fail(format!("end {} must be > start {}", self.end, self.start)));
        }
        if self.duration() > MAX_CLIP_DURATION_SECS {
            return Err(fail(format!(
                "duration {:.3}s exceeds the {MAX_CLIP_DURATION_SECS}s segmentation bound",
                self.duration()
            )));
        }
        if self.hyps.len() != NUM_SYSTEMS {
            return Err(fail(format!(
                "expected exactly {NUM_SYSTEMS} hypotheses, got {}",
                self.hyps.len()
            )));
        }
        Ok(())
    }
}

/// One slot of the word transition network: one arc per system, NULL
/// (`None`) meaning the system has no token at this slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub arcs: [Option<String>; NUM_SYSTEMS],
}

/// Slot-ordered lattice built by folding the three hypotheses together.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WordTransitionNetwork {
    pub slots: Vec<Slot>,
}

/// Verdict attached to a fused clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVerdict {
    Kept,
    HighDisagreement,
    /// At least one hypothesis was empty after normalization; rejected
    /// before any voting happened.
    EmptyHypothesis,
}

/// Voting outcome for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub fused_tokens: Vec<String>,
    pub disagreed_positions: usize,
    pub text_units: usize,
    pub e_hat: f64,
    pub kept: bool,
    pub verdict: FusionVerdict,
}

/// Concatenation of consecutive kept clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongFormSample {
    pub sample_id: String,
    pub clip_ids: Vec<String>,
    pub text: String,
    pub total_duration: f64,
    /// False when a registered refinement hook failed on this sample.
    pub refined: bool,
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

fn fold_width(c: char) -> char {
    match c {
        // Fullwidth ASCII block maps down by 0xFEE0.
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap(),
        '\u{3000}' => ' ', // ideographic space
        _ => c,
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{4E00}'..='\u{9FFF}'   // CJK unified
        | '\u{3400}'..='\u{4DBF}' // CJK extension A
        | '\u{F900}'..='\u{FAFF}' // compatibility ideographs
        | '\u{3040}'..='\u{30FF}' // hiragana + katakana
        | '\u{AC00}'..='\u{D7AF}' // hangul syllables
    )
}

/// Stripped punctuation: ASCII punctuation plus common CJK marks. Digits
/// and word characters pass through untouched.
fn is_strippable_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{3001}' | '\u{3002}' // 、 。
            | '\u{FF61}'..='\u{FF65}' // halfwidth CJK punctuation
            | '\u{2018}'..='\u{201F}' // curly quotes
            | '\u{2026}' | '\u{2014}' | '\u{2013}' // … — –
            | '\u{00B7}' | '\u{2027}' // middle dots
            | '\u{300A}'..='\u{300F}' // 《》「」『』
            | '\u{3008}' | '\u{3009}' | '\u{3010}' | '\u{3011}' // 〈〉【】
        )
}

/// Surface-form normalization: width folding, case folding, punctuation
/// stripping, whitespace collapsing. Space-delimited script runs tokenize
/// on whitespace; CJK codepoints become single-character tokens. The
/// `language_hint` is accepted for interface compatibility; tokenization
/// is decided per codepoint.
pub fn normalize_text(raw: &str, _language_hint: Option<&str>) -> Vec<String> {
    let mut tokens: Vec<String> = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() {
            tokens.push(std::mem::take(current));
        }
    };
    for c in raw.chars() {
        let c = fold_width(c);
        if c.is_whitespace() || is_strippable_punct(c) {
            flush(&mut current, &mut tokens);
            continue;
        }
        if is_cjk(c) {
            flush(&mut current, &mut tokens);
            tokens.push(c.to_string());
            continue;
        }
        for lc in c.to_lowercase() {
            current.push(lc);
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

// ---------------------------------------------------------------------------
// WTN construction
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum AlignOp {
    /// Token aligned to an existing slot (match or substitution).
    Diagonal,
    /// Existing slot gets a NULL arc for this system.
    Deletion,
    /// New slot created for this system's token.
    Insertion,
}

fn slot_matches(slot: &Slot, token: &str, folded: usize) -> bool {
    slot.arcs[..folded]
        .iter()
        .any(|arc| arc.as_deref() == Some(token))
}

/// Fold one hypothesis into the WTN by minimum-edit alignment. `system` is
/// the index being folded; systems `0..system` are already present.
fn fold_in(wtn: &mut WordTransitionNetwork, hyp: &[String], system: usize) {
    let m = wtn.slots.len();
    let n = hyp.len();
    // d[i][j]: min cost aligning the first i slots with the first j tokens.
    let mut d = vec![vec![0u32; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i as u32;
    }
    for j in 0..=n {
        d[0][j] = j as u32;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = if slot_matches(&wtn.slots[i - 1], &hyp[j - 1], system) {
                0
            } else {
                1
            };
            d[i][j] = (d[i - 1][j - 1] + sub)
                .min(d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1);
        }
    }
    // Backtrace with the fixed preference match > substitution > deletion
    // > insertion.
    let mut ops: Vec<AlignOp> = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let cur = d[i][j];
        if i > 0 && j > 0 && slot_matches(&wtn.slots[i - 1], &hyp[j - 1], system) && d[i - 1][j - 1] == cur
        {
            ops.push(AlignOp::Diagonal);
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i - 1][j - 1] + 1 == cur {
            ops.push(AlignOp::Diagonal);
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i - 1][j] + 1 == cur {
            ops.push(AlignOp::Deletion);
            i -= 1;
        } else {
            debug_assert!(j > 0 && d[i][j - 1] + 1 == cur);
            ops.push(AlignOp::Insertion);
            j -= 1;
        }
    }
    ops.reverse();

    let old_slots = std::mem::take(&mut wtn.slots);
    let mut slot_iter = old_slots.into_iter();
    let mut tok_iter = hyp.iter();
    for op in ops {
        match op {
            AlignOp::Diagonal => {
                let mut slot = slot_iter.next().unwrap();
                slot.arcs[system] = Some(tok_iter.next().unwrap().clone());
                wtn.slots.push(slot);
            }
            AlignOp::Deletion => {
                let mut slot = slot_iter.next().unwrap();
                slot.arcs[system] = None;
                wtn.slots.push(slot);
            }
            AlignOp::Insertion => {
                let mut slot = Slot {
                    arcs: [None, None, None],
                };
                slot.arcs[system] = Some(tok_iter.next().unwrap().clone());
                wtn.slots.push(slot);
            }
        }
    }
}

/// Align three normalized hypotheses into a WTN. Hypothesis 1 seeds a
/// linear network; 2 and 3 fold in, in that fixed order.
pub fn build_wtn(hyps: &[Vec<String>; NUM_SYSTEMS]) -> WordTransitionNetwork {
    let mut wtn = WordTransitionNetwork {
        slots: hyps[0]
            .iter()
            .map(|t| Slot {
                arcs: [Some(t.clone()), None, None],
            })
            .collect(),
    };
    fold_in(&mut wtn, &hyps[1], 1);
    fold_in(&mut wtn, &hyps[2], 2);
    wtn
}

// ---------------------------------------------------------------------------
// Voting
// ---------------------------------------------------------------------------

/// Token-level majority vote over the WTN. A value (token or NULL) with at
/// least two of three votes wins; a winning token is emitted, a winning
/// NULL emits nothing and still counts as consensus. A 1-1-1 slot is a
/// disagreement and emits nothing. Text units are the slots.
pub fn vote_wtn(wtn: &WordTransitionNetwork) -> FusionResult {
    let mut fused: Vec<String> = Vec::new();
    let mut disagreed = 0usize;
    for slot in &wtn.slots {
        let mut winner: Option<&Option<String>> = None;
        for arc in &slot.arcs {
            let votes = slot.arcs.iter().filter(|a| *a == arc).count();
            if votes >= 2 {
                winner = Some(arc);
                break;
            }
        }
        match winner {
            Some(Some(token)) => fused.push(token.clone()),
            Some(None) => {} // consensus on NULL
            None => disagreed += 1,
        }
    }
    let text_units = wtn.slots.len();
    let e_hat = if text_units == 0 {
        0.0
    } else {
        disagreed as f64 / text_units as f64
    };
    let kept = e_hat <= DEFAULT_DISAGREEMENT_THRESHOLD;
    FusionResult {
        fused_tokens: fused,
        disagreed_positions: disagreed,
        text_units,
        e_hat,
        kept,
        verdict: if kept {
            FusionVerdict::Kept
        } else {
            FusionVerdict::HighDisagreement
        },
    }
}

/// Normalize, align, and vote one clip. The discard rule is strictly
/// greater: a rate exactly equal to `threshold` is kept. A hypothesis
/// that is empty after normalization rejects the clip outright with a
/// verdict distinct from rate-based rejection.
pub fn fuse_clip(clip: &ClipRecord, threshold: f64) -> Result<FusionResult, FusionError> {
    clip.validate()?;
    let normalized: Vec<Vec<String>> = clip
        .hyps
        .iter()
        .map(|h| normalize_text(h, clip.lang.as_deref()))
        .collect();
    if normalized.iter().any(|h| h.is_empty()) {
        return Ok(FusionResult {
            fused_tokens: Vec::new(),
            disagreed_positions: 0,
            text_units: 0,
            e_hat: 1.0,
            kept: false,
            verdict: FusionVerdict::EmptyHypothesis,
        });
    }
    let hyps: [Vec<String>; NUM_SYSTEMS] = [
        normalized[0].clone(),
        normalized[1].clone(),
        normalized[2].clone(),
    ];
    let wtn = build_wtn(&hyps);
    let mut result = vote_wtn(&wtn);
    result.kept = result.e_hat <= threshold;
    result.verdict = if result.kept {
        FusionVerdict::Kept
    } else {
        FusionVerdict::HighDisagreement
    };
    Ok(result)
}

// ---------------------------------------------------------------------------
// Concatenation and refinement
// ---------------------------------------------------------------------------

/// Greedy left-to-right grouping of consecutive kept clips. A discarded
/// clip breaks the chain; a group closes when adding the next clip would
/// exceed `max_duration`. Clips must be ordered by start time.
pub fn concatenate_segments(
    clips: &[(ClipRecord, FusionResult)],
    max_duration: f64,
) -> Vec<LongFormSample> {
    let mut samples: Vec<LongFormSample> = Vec::new();
    let mut current: Vec<&(ClipRecord, FusionResult)> = Vec::new();
    let mut current_duration = 0.0;

    let close = |group: &mut Vec<&(ClipRecord, FusionResult)>,
                     duration: &mut f64,
                     samples: &mut Vec<LongFormSample>| {
        if group.is_empty() {
            return;
        }
        let text = group
            .iter()
            .flat_map(|(_, f)| f.fused_tokens.iter().cloned())
            .collect::<Vec<_>>()
            .join(" ");
        samples.push(LongFormSample {
            sample_id: format!("sample-{:05}", samples.len()),
            clip_ids: group.iter().map(|(c, _)| c.clip_id.clone()).collect(),
            text,
            total_duration: *duration,
            refined: true,
        });
        group.clear();
        *duration = 0.0;
    };

    for entry in clips {
        let (clip, fusion) = entry;
        if !fusion.kept {
            close(&mut current, &mut current_duration, &mut samples);
            continue;
        }
        if !current.is_empty() && current_duration + clip.duration() > max_duration {
            close(&mut current, &mut current_duration, &mut samples);
        }
        current.push(entry);
        current_duration += clip.duration();
    }
    close(&mut current, &mut current_duration, &mut samples);
    samples
}

/// Post-processing boundary for fused samples. The real refinement model
/// lives elsewhere; the default hook is the identity.
pub trait RefineHook {
    fn refine(&self, sample: LongFormSample) -> Result<LongFormSample, String>;
}

/// Identity refinement.
pub struct IdentityRefiner;

impl RefineHook for IdentityRefiner {
    fn refine(&self, sample: LongFormSample) -> Result<LongFormSample, String> {
        Ok(sample)
    }
}

/// Run a hook over a sample. A hook failure marks the sample unrefined
/// instead of dropping it; only the flag changes, content and metadata
/// stay as produced by concatenation.
pub fn refine_sample<H: RefineHook>(hook: &H, sample: LongFormSample) -> LongFormSample {
    let fallback = sample.clone();
    match hook.refine(sample) {
        Ok(refined) => refined,
        Err(_) => LongFormSample {
            refined: false,
            ..fallback
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    fn clip(id: &str, dur: f64, hyps: [&str; 3]) -> ClipRecord {
        ClipRecord {
            clip_id: id.into(),
            start: 0.0,
            end: dur,
            hyps: hyps.iter().map(|h| h.to_string()).collect(),
            lang: None,
        }
    }

    #[test]
    fn normalize_casing_and_punctuation() {
        assert_eq!(normalize_text("Hello, WORLD!", None), toks(&["hello", "world"]));
    }

    #[test]
    fn normalize_cjk_per_character() {
        assert_eq!(
            normalize_text("你好，世界", None),
            toks(&["你", "好", "世", "界"])
        );
    }

    #[test]
    fn normalize_width_folding() {
        assert_eq!(normalize_text("ＡＢＣ\u{3000}ok.", None), toks(&["abc", "ok"]));
    }

    #[test]
    fn normalize_empty_input() {
        assert!(normalize_text("", None).is_empty());
        assert!(normalize_text("  ... !!", None).is_empty());
    }

    #[test]
    fn normalize_digits_pass_through() {
        assert_eq!(normalize_text("room 42", None), toks(&["room", "42"]));
    }

    #[test]
    fn wtn_identical_hypotheses() {
        let h = toks(&["a", "b", "c"]);
        let wtn = build_wtn(&[h.clone(), h.clone(), h]);
        assert_eq!(wtn.slots.len(), 3);
        for (i, name) in ["a", "b", "c"].iter().enumerate() {
            for arc in &wtn.slots[i].arcs {
                assert_eq!(arc.as_deref(), Some(*name));
            }
        }
    }

    #[test]
    fn wtn_substitution_in_third_system() {
        let wtn = build_wtn(&[toks(&["a", "b", "c"]), toks(&["a", "b", "c"]), toks(&["a", "x", "c"])]);
        assert_eq!(wtn.slots.len(), 3);
        let middle = &wtn.slots[1].arcs;
        assert_eq!(middle[0].as_deref(), Some("b"));
        assert_eq!(middle[1].as_deref(), Some("b"));
        assert_eq!(middle[2].as_deref(), Some("x"));
    }

    #[test]
    fn wtn_deletion_in_first_system() {
        let wtn = build_wtn(&[toks(&["a", "c"]), toks(&["a", "b", "c"]), toks(&["a", "b", "c"])]);
        assert_eq!(wtn.slots.len(), 3);
        let middle = &wtn.slots[1].arcs;
        assert_eq!(middle[0], None);
        assert_eq!(middle[1].as_deref(), Some("b"));
        assert_eq!(middle[2].as_deref(), Some("b"));
    }

    #[test]
    fn vote_all_identical_keeps_everything() {
        let h: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let wtn = build_wtn(&[h.clone(), h.clone(), h.clone()]);
        let r = vote_wtn(&wtn);
        assert_eq!(r.fused_tokens, h);
        assert_eq!(r.e_hat, 0.0);
        assert!(r.kept);
    }

    #[test]
    fn vote_boundary_is_inclusive() {
        // One 1-1-1 slot out of 20: rate exactly 0.05, kept.
        let mut a: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        let mut b = a.clone();
        let c = a.clone();
        a[7] = "xa".into();
        b[7] = "xb".into();
        let wtn = build_wtn(&[a, b, c]);
        let r = vote_wtn(&wtn);
        assert_eq!(r.text_units, 20);
        assert_eq!(r.disagreed_positions, 1);
        assert!((r.e_hat - 0.05).abs() < 1e-12);
        assert!(r.kept);
    }

    #[test]
    fn vote_above_threshold_discards() {
        let mut a: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let mut b = a.clone();
        let c = a.clone();
        a[4] = "xa".into();
        b[4] = "xb".into();
        let wtn = build_wtn(&[a, b, c]);
        let r = vote_wtn(&wtn);
        assert!((r.e_hat - 0.10).abs() < 1e-12);
        assert!(!r.kept);
        assert_eq!(r.verdict, FusionVerdict::HighDisagreement);
    }

    #[test]
    fn vote_null_majority_is_consensus() {
        // Two systems drop the middle token: NULL wins, nothing emitted,
        // no disagreement.
        let wtn = build_wtn(&[toks(&["a", "c"]), toks(&["a", "c"]), toks(&["a", "b", "c"])]);
        let r = vote_wtn(&wtn);
        assert_eq!(r.fused_tokens, toks(&["a", "c"]));
        assert_eq!(r.disagreed_positions, 0);
    }

    #[test]
    fn fuse_clip_ignores_case_and_punctuation_differences() {
        let c = clip("c1", 5.0, ["Hello, world!", "hello WORLD", "hello world."]);
        let r = fuse_clip(&c, DEFAULT_DISAGREEMENT_THRESHOLD).unwrap();
        assert_eq!(r.e_hat, 0.0);
        assert!(r.kept);
        assert_eq!(r.fused_tokens, toks(&["hello", "world"]));
    }

    #[test]
    fn fuse_clip_total_disagreement() {
        let c = clip("c1", 5.0, ["aa bb cc", "dd ee ff", "gg hh ii"]);
        let r = fuse_clip(&c, DEFAULT_DISAGREEMENT_THRESHOLD).unwrap();
        assert_eq!(r.e_hat, 1.0);
        assert!(!r.kept);
        assert!(r.fused_tokens.is_empty());
    }

    #[test]
    fn fuse_clip_empty_hypothesis_has_distinct_verdict() {
        let c = clip("c1", 5.0, ["hello", "...", "hello"]);
        let r = fuse_clip(&c, DEFAULT_DISAGREEMENT_THRESHOLD).unwrap();
        assert!(!r.kept);
        assert_eq!(r.verdict, FusionVerdict::EmptyHypothesis);
    }

    #[test]
    fn fuse_clip_rejects_invalid_records() {
        let mut c = clip("c1", 5.0, ["a", "a", "a"]);
        c.end = c.start; // zero duration
        assert!(fuse_clip(&c, 0.05).is_err());
        let mut c = clip("c2", 40.0, ["a", "a", "a"]);
        c.end = 40.0;
        assert!(fuse_clip(&c, 0.05).is_err());
        let mut c = clip("c3", 5.0, ["a", "a", "a"]);
        c.hyps.pop();
        assert!(fuse_clip(&c, 0.05).is_err());
    }

    fn kept_fusion(tokens: &[&str]) -> FusionResult {
        FusionResult {
            fused_tokens: toks(tokens),
            disagreed_positions: 0,
            text_units: tokens.len(),
            e_hat: 0.0,
            kept: true,
            verdict: FusionVerdict::Kept,
        }
    }

    fn discarded_fusion() -> FusionResult {
        FusionResult {
            fused_tokens: vec![],
            disagreed_positions: 1,
            text_units: 1,
            e_hat: 1.0,
            kept: false,
            verdict: FusionVerdict::HighDisagreement,
        }
    }

    #[test]
    fn concatenation_breaks_at_discarded_clip() {
        let clips = vec![
            (clip("a", 10.0, ["x", "x", "x"]), kept_fusion(&["x"])),
            (clip("b", 10.0, ["y", "y", "y"]), kept_fusion(&["y"])),
            (clip("c", 10.0, ["z", "z", "z"]), discarded_fusion()),
            (clip("d", 10.0, ["w", "w", "w"]), kept_fusion(&["w"])),
        ];
        let samples = concatenate_segments(&clips, 60.0);
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].clip_ids, vec!["a", "b"]);
        assert_eq!(samples[1].clip_ids, vec!["d"]);
        assert_eq!(samples[0].text, "x y");
    }

    #[test]
    fn concatenation_respects_duration_budget() {
        let clips: Vec<_> = (0..5)
            .map(|i| {
                (
                    clip(&format!("c{i}"), 20.0, ["x", "x", "x"]),
                    kept_fusion(&["x"]),
                )
            })
            .collect();
        let samples = concatenate_segments(&clips, 60.0);
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].clip_ids, vec!["c0", "c1", "c2"]);
        assert_eq!(samples[1].clip_ids, vec!["c3", "c4"]);
        assert!((samples[0].total_duration - 60.0).abs() < 1e-9);
    }

    #[test]
    fn concatenation_empty_input() {
        assert!(concatenate_segments(&[], 60.0).is_empty());
    }

    #[test]
    fn refine_default_is_identity() {
        let sample = LongFormSample {
            sample_id: "s".into(),
            clip_ids: vec!["a".into()],
            text: "hello".into(),
            total_duration: 5.0,
            refined: true,
        };
        let out = refine_sample(&IdentityRefiner, sample.clone());
        assert_eq!(out, sample);
    }

    #[test]
    fn refine_hook_transforms_text() {
        struct Upper;
        impl RefineHook for Upper {
            fn refine(&self, mut s: LongFormSample) -> Result<LongFormSample, String> {
                s.text = s.text.to_uppercase();
                Ok(s)
            }
        }
        let sample = LongFormSample {
            sample_id: "s".into(),
            clip_ids: vec!["a".into()],
            text: "hello".into(),
            total_duration: 5.0,
            refined: true,
        };
        let out = refine_sample(&Upper, sample.clone());
        assert_eq!(out.text, "HELLO");
        assert_eq!(out.clip_ids, sample.clip_ids);
    }

    #[test]
    fn refine_hook_failure_marks_unrefined() {
        struct Failing;
        impl RefineHook for Failing {
            fn refine(&self, _s: LongFormSample) -> Result<LongFormSample, String> {
                Err("backend unavailable".into())
            }
        }
        let sample = LongFormSample {
            sample_id: "s".into(),
            clip_ids: vec!["a".into()],
            text: "hello".into(),
            total_duration: 5.0,
            refined: true,
        };
        let out = refine_sample(&Failing, sample);
        assert!(!out.refined);
        assert_eq!(out.text, "hello");
    }

    #[test]
    fn permuting_hypotheses_preserves_rate_on_unanimous_or_split_slots() {
        // Every slot either 3-0 or 1-1-1: the verdict is order-insensitive.
        let a = toks(&["p", "q", "r", "s"]);
        let mut b = a.clone();
        let mut c = a.clone();
        b[2] = "x".into();
        c[2] = "y".into();
        let base = vote_wtn(&build_wtn(&[a.clone(), b.clone(), c.clone()])).e_hat;
        let perms: [[&Vec<String>; 3]; 5] = [
            [&a, &c, &b],
            [&b, &a, &c],
            [&b, &c, &a],
            [&c, &a, &b],
            [&c, &b, &a],
        ];
        for p in perms {
            let e = vote_wtn(&build_wtn(&[p[0].clone(), p[1].clone(), p[2].clone()])).e_hat;
            assert_eq!(e, base);
        }
    }
}
