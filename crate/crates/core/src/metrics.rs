//! Edit-distance error rates and real-time-factor arithmetic.
//!
//! One error-rate operation serves both WER and CER; the script-dependent
//! tokenization comes from [`crate::rover::normalize_text`], which emits
//! word tokens for space-delimited scripts and per-character tokens for
//! CJK. The normalization policy is this repo's own, documented in the
//! README.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty reference")]
    EmptyReference,
    #[error("audio duration must be positive, got {0}")]
    NonPositiveAudio(f64),
    #[error("processing time must be positive, got {0}")]
    NonPositiveProcessing(f64),
}

/// Minimum-edit alignment counts against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl EditCounts {
    pub fn total_edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost minimum-edit alignment between reference and hypothesis.
///
/// Deterministic tie-break: substitution (diagonal) is preferred over a
/// deletion, which is preferred over an insertion, so a mismatch never
/// decomposes into an insertion+deletion pair when a substitution costs
/// the same.
pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let m = reference.len();
    let n = hypothesis.len();
    // Cell = (distance, subs, dels, ins); the tie-break picks which
    // predecessor the counts come from.
    let mut dp = vec![vec![(0u32, 0u32, 0u32, 0u32); n + 1]; m + 1];
    for i in 1..=m {
        dp[i][0] = (i as u32, 0, i as u32, 0);
    }
    for j in 1..=n {
        dp[0][j] = (j as u32, 0, 0, j as u32);
    }
    for i in 1..=m {
        for j in 1..=n {
            let matched = reference[i - 1] == hypothesis[j - 1];
            let diag = dp[i - 1][j - 1];
            let up = dp[i - 1][j];
            let left = dp[i][j - 1];
            let diag_cost = diag.0 + if matched { 0 } else { 1 };
            let del_cost = up.0 + 1;
            let ins_cost = left.0 + 1;
            let best = diag_cost.min(del_cost).min(ins_cost);
            dp[i][j] = if diag_cost == best {
                (
                    best,
                    diag.1 + if matched { 0 } else { 1 },
                    diag.2,
                    diag.3,
                )
            } else if del_cost == best {
                (best, up.1, up.2 + 1, up.3)
            } else {
                (best, left.1, left.2, left.3 + 1)
            };
        }
    }
    let (_, s, d, i) = dp[m][n];
    EditCounts {
        substitutions: s as usize,
        deletions: d as usize,
        insertions: i as usize,
        reference_length: m,
    }
}

/// `(S + D + I) / reference_length`. May exceed 1 through insertions.
pub fn error_rate(counts: &EditCounts) -> Result<f64, MetricsError> {
    if counts.reference_length == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(counts.total_edits() as f64 / counts.reference_length as f64)
}

/// One timing measurement for real-time-factor computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtfMeasurement {
    pub processing_seconds: f64,
    pub audio_seconds: f64,
}

impl RtfMeasurement {
    pub fn new(processing_seconds: f64, audio_seconds: f64) -> Result<Self, MetricsError> {
        if !(processing_seconds > 0.0) {
            return Err(MetricsError::NonPositiveProcessing(processing_seconds));
        }
        if !(audio_seconds > 0.0) {
            return Err(MetricsError::NonPositiveAudio(audio_seconds));
        }
        Ok(Self {
            processing_seconds,
            audio_seconds,
        })
    }
}

/// Real-time factor: processing time over audio duration; below 1 is
/// faster than real time.
pub fn rtf(m: &RtfMeasurement) -> f64 {
    m.processing_seconds / m.audio_seconds
}

/// Per-utterance scoring entry in the flat report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub index: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
    pub error_rate: f64,
}

/// Corpus scoring report: per-utterance rates plus the aggregate rate
/// (total edits over total reference length).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub utterances: Vec<UtteranceScore>,
    pub total_edits: usize,
    pub total_reference_length: usize,
    pub aggregate_error_rate: f64,
}

/// Score paired reference/hypothesis token sequences.
pub fn score_corpus(pairs: &[(Vec<String>, Vec<String>)]) -> Result<ScoreReport, MetricsError> {
    let mut utterances = Vec::with_capacity(pairs.len());
    let mut total_edits = 0usize;
    let mut total_ref = 0usize;
    for (index, (reference, hypothesis)) in pairs.iter().enumerate() {
        let counts = edit_counts(reference, hypothesis);
        let rate = error_rate(&counts)?;
        total_edits += counts.total_edits();
        total_ref += counts.reference_length;
        utterances.push(UtteranceScore {
            index,
            substitutions: counts.substitutions,
            deletions: counts.deletions,
            insertions: counts.insertions,
            reference_length: counts.reference_length,
            error_rate: rate,
        });
    }
    if total_ref == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(ScoreReport {
        utterances,
        total_edits,
        total_reference_length: total_ref,
        aggregate_error_rate: total_edits as f64 / total_ref as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn identical_sequences_have_no_edits() {
        let a = toks(&["x", "y", "z"]);
        let c = edit_counts(&a, &a);
        assert_eq!(
            c,
            EditCounts {
                substitutions: 0,
                deletions: 0,
                insertions: 0,
                reference_length: 3
            }
        );
        assert_eq!(error_rate(&c).unwrap(), 0.0);
    }

    #[test]
    fn single_substitution() {
        let c = edit_counts(&toks(&["a", "b", "c"]), &toks(&["a", "x", "c"]));
        assert_eq!(c.substitutions, 1);
        assert_eq!(c.deletions, 0);
        assert_eq!(c.insertions, 0);
        assert!((error_rate(&c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pure_insertions_can_exceed_one() {
        let reference = toks(&["a", "b", "c", "d"]);
        let hypothesis = toks(&["a", "b", "c", "d", "1", "2", "3", "4", "5"]);
        let c = edit_counts(&reference, &hypothesis);
        assert_eq!(c.insertions, 5);
        assert!((error_rate(&c).unwrap() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn empty_reference_is_an_error() {
        let c = edit_counts::<String>(&[], &toks(&["a"]));
        assert_eq!(error_rate(&c), Err(MetricsError::EmptyReference));
    }

    #[test]
    fn arithmetic_example() {
        let c = EditCounts {
            substitutions: 1,
            deletions: 1,
            insertions: 1,
            reference_length: 10,
        };
        assert!((error_rate(&c).unwrap() - 0.3).abs() < 1e-12);
    }

    /// Independent exponential-recursion oracle (memoized on a small
    /// array, no tie-break policy, distance only).
    pub(crate) fn brute_force_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
        fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut [Vec<Option<usize>>]) -> usize {
            if i == 0 {
                return j;
            }
            if j == 0 {
                return i;
            }
            if let Some(v) = memo[i][j] {
                return v;
            }
            let sub = go(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
            let del = go(a, b, i - 1, j, memo) + 1;
            let ins = go(a, b, i, j - 1, memo) + 1;
            let v = sub.min(del).min(ins);
            memo[i][j] = Some(v);
            v
        }
        let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
        go(a, b, a.len(), b.len(), &mut memo)
    }

    #[test]
    fn dp_matches_brute_force_on_random_short_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let la = rng.gen_range(0..=6);
            let lb = rng.gen_range(0..=6);
            let a: Vec<u8> = (0..la).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.gen_range(0..3)).collect();
            let c = edit_counts(&a, &b);
            assert_eq!(c.total_edits(), brute_force_distance(&a, &b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn distance_is_symmetric_with_d_i_swapped() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let la = rng.gen_range(0..=6);
            let lb = rng.gen_range(0..=6);
            let a: Vec<u8> = (0..la).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.gen_range(0..3)).collect();
            let fwd = edit_counts(&a, &b);
            let rev = edit_counts(&b, &a);
            assert_eq!(fwd.total_edits(), rev.total_edits());
            assert_eq!(fwd.deletions, rev.insertions);
            assert_eq!(fwd.insertions, rev.deletions);
        }
    }

    #[test]
    fn triangle_inequality_on_random_triples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> {
                let l = rng.gen_range(0..=5);
                (0..l).map(|_| rng.gen_range(0..3)).collect()
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let ab = edit_counts(&a, &b).total_edits();
            let bc = edit_counts(&b, &c).total_edits();
            let ac = edit_counts(&a, &c).total_edits();
            assert!(ac <= ab + bc);
        }
    }

    #[test]
    fn cer_equals_wer_under_character_tokenization() {
        // Tokenizing the same strings per character makes the word-level
        // machinery compute a character error rate.
        let reference: Vec<char> = "kitten".chars().collect();
        let hypothesis: Vec<char> = "sitting".chars().collect();
        let c = edit_counts(&reference, &hypothesis);
        assert_eq!(c.total_edits(), 3);
    }

    #[test]
    fn rtf_examples() {
        let m = RtfMeasurement::new(0.159, 30.0).unwrap();
        assert!((rtf(&m) - 0.0053).abs() < 1e-12);
        assert_eq!(rtf(&RtfMeasurement::new(5.0, 5.0).unwrap()), 1.0);
        assert_eq!(rtf(&RtfMeasurement::new(15.0, 30.0).unwrap()), 0.5);
        assert!(RtfMeasurement::new(1.0, 0.0).is_err());
        assert!(RtfMeasurement::new(0.0, 1.0).is_err());
    }

    #[test]
    fn corpus_scoring_aggregates_edits() {
        let pairs = vec![
            (toks(&["a", "b"]), toks(&["a", "b"])),
            (toks(&["a", "b", "c", "d"]), toks(&["a", "x", "c"])),
        ];
        let report = score_corpus(&pairs).unwrap();
        assert_eq!(report.utterances.len(), 2);
        assert_eq!(report.total_edits, 2);
        assert_eq!(report.total_reference_length, 6);
        assert!((report.aggregate_error_rate - 2.0 / 6.0).abs() < 1e-12);
    }
}
