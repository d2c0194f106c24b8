//! Sequence-level scorers over token sequences.
//!
//! [`seq_score`] is a normalised edit similarity used as the higher-is-better
//! quality score; [`error_rate`] is the per-sample, lower-is-better
//! counterpart of [`wer`]. Both are exposed through the [`Scorer`] trait so
//! the perturbation code never has to guess a score's polarity.

use serde::{Deserialize, Serialize};

use crate::error::MetricError;

pub type Token = u32;

/// Edit operations turning `reference` into `hypothesis`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditAlignment {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditAlignment {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimal unit-cost alignment. When several alignments tie on cost, the
/// backtrace prefers a substitution (or match), then a deletion, then an
/// insertion, so the S/I/D split is deterministic.
pub fn levenshtein_align(reference: &[Token], hypothesis: &[Token]) -> EditAlignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[i * w + j] = (dp[(i - 1) * w + j - 1] + cost)
                .min(dp[(i - 1) * w + j] + 1)
                .min(dp[i * w + j - 1] + 1);
        }
    }

    let mut out = EditAlignment::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[(i - 1) * w + j - 1] + cost == here {
                out.substitutions += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// Corpus word error rate: total edits over total reference length.
pub fn wer<R, H>(refs: &[R], hyps: &[H]) -> Result<f64, MetricError>
where
    R: AsRef<[Token]>,
    H: AsRef<[Token]>,
{
    if refs.len() != hyps.len() {
        return Err(MetricError::CountMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let total: usize = refs.iter().map(|r| r.as_ref().len()).sum();
    if total == 0 {
        return Err(MetricError::ZeroReferenceLength);
    }
    let edits: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| levenshtein_align(r.as_ref(), h.as_ref()).distance())
        .sum();
    Ok(edits as f64 / total as f64)
}

/// Per-sample error rate, `distance / |ref|`. May exceed 1.
pub fn error_rate(reference: &[Token], hypothesis: &[Token]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(levenshtein_align(reference, hypothesis).distance() as f64 / reference.len() as f64)
}

/// `1 - distance / max(|ref|, |hyp|)`, in `[0, 1]`, equal to 1 iff the
/// sequences match.
pub fn seq_score(reference: &[Token], hypothesis: &[Token]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let d = levenshtein_align(reference, hypothesis).distance();
    let longest = reference.len().max(hypothesis.len());
    Ok(1.0 - d as f64 / longest as f64)
}

/// Clipped n-gram precision of `hypothesis` against `reference`. Reported
/// alongside the optimised score, never optimised itself.
pub fn ngram_precision(reference: &[Token], hypothesis: &[Token], n: usize) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::InvalidOrder);
    }
    if hypothesis.len() < n {
        return Ok(0.0);
    }
    let mut ref_counts: std::collections::HashMap<&[Token], usize> = Default::default();
    if reference.len() >= n {
        for g in reference.windows(n) {
            *ref_counts.entry(g).or_default() += 1;
        }
    }
    let total = hypothesis.len() + 1 - n;
    let mut matched = 0;
    for g in hypothesis.windows(n) {
        if let Some(c) = ref_counts.get_mut(g) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    Ok(matched as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    HigherIsBetter,
    LowerIsBetter,
}

impl Polarity {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Polarity::HigherIsBetter => a > b,
            Polarity::LowerIsBetter => a < b,
        }
    }
}

/// A sequence-level score `S(ref, hyp)` with its polarity.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn polarity(&self) -> Polarity;
    fn score(&self, reference: &[Token], hypothesis: &[Token]) -> Result<f64, MetricError>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SeqScore;

impl Scorer for SeqScore {
    fn name(&self) -> &str {
        "seq_score"
    }
    fn polarity(&self) -> Polarity {
        Polarity::HigherIsBetter
    }
    fn score(&self, reference: &[Token], hypothesis: &[Token]) -> Result<f64, MetricError> {
        seq_score(reference, hypothesis)
    }
}

/// Per-sample error count normalised by reference length.
#[derive(Clone, Copy, Debug, Default)]
pub struct ErrorRate;

impl Scorer for ErrorRate {
    fn name(&self) -> &str {
        "error_rate"
    }
    fn polarity(&self) -> Polarity {
        Polarity::LowerIsBetter
    }
    fn score(&self, reference: &[Token], hypothesis: &[Token]) -> Result<f64, MetricError> {
        error_rate(reference, hypothesis)
    }
}

pub fn scorer_by_name(name: &str) -> Result<Box<dyn Scorer>, MetricError> {
    match name {
        "seq_score" => Ok(Box::new(SeqScore)),
        "error_rate" | "wer" => Ok(Box::new(ErrorRate)),
        other => Err(MetricError::UnknownScorer(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alignment_examples() {
        assert_eq!(levenshtein_align(&[1, 2, 3], &[1, 2, 3]), EditAlignment::default());
        let a = levenshtein_align(&[1, 2, 3], &[]);
        assert_eq!((a.substitutions, a.insertions, a.deletions), (0, 0, 3));
        let a = levenshtein_align(&[], &[4, 5]);
        assert_eq!((a.substitutions, a.insertions, a.deletions), (0, 2, 0));
        // [1,2] -> [2,1]: one sub + ... cost 2; substitution preferred on ties.
        let a = levenshtein_align(&[1, 2], &[2, 1]);
        assert_eq!((a.substitutions, a.insertions, a.deletions), (2, 0, 0));
        let a = levenshtein_align(&[1, 2, 3], &[1, 3]);
        assert_eq!((a.substitutions, a.insertions, a.deletions), (0, 0, 1));
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&[vec![1, 2], vec![3]], &[vec![1, 2], vec![3]]).unwrap(), 0.0);
        assert_eq!(wer(&[vec![1, 2]], &[vec![1, 3]]).unwrap(), 0.5);
        assert_eq!(
            wer(&[Vec::<u32>::new()], &[vec![1]]),
            Err(MetricError::ZeroReferenceLength)
        );
        assert!(matches!(
            wer(&[vec![1]], &Vec::<Vec<u32>>::new()),
            Err(MetricError::CountMismatch { .. })
        ));
    }

    #[test]
    fn corpus_wer_is_length_weighted_mean_of_sample_rates() {
        let refs = vec![vec![1, 2, 3, 4], vec![5, 6], vec![7, 8, 9]];
        let hyps = vec![vec![1, 2], vec![6, 5, 5], vec![7, 8, 9]];
        let total: usize = refs.iter().map(Vec::len).sum();
        let weighted: f64 = refs
            .iter()
            .zip(&hyps)
            .map(|(r, h)| error_rate(r, h).unwrap() * r.len() as f64 / total as f64)
            .sum();
        assert!((wer(&refs, &hyps).unwrap() - weighted).abs() < 1e-15);
    }

    #[test]
    fn seq_score_examples() {
        assert_eq!(seq_score(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(seq_score(&[1, 2, 3, 4], &[9, 9, 9, 9]).unwrap(), 0.0);
        assert_eq!(seq_score(&[1, 2, 3, 4], &[1, 2, 3]).unwrap(), 0.75);
        assert_eq!(seq_score(&[], &[1]), Err(MetricError::EmptyReference));
    }

    #[test]
    fn ngram_examples() {
        assert_eq!(ngram_precision(&[1, 2, 3], &[1, 2, 3], 2).unwrap(), 1.0);
        assert_eq!(ngram_precision(&[1, 2, 3], &[1], 2).unwrap(), 0.0);
        assert_eq!(ngram_precision(&[1, 2, 3], &[1, 2, 9], 2).unwrap(), 0.5);
        // Clipping: the ref has one "1"; the hypothesis repeats it.
        assert_eq!(ngram_precision(&[1, 2], &[1, 1, 1], 1).unwrap(), 1.0 / 3.0);
        assert_eq!(ngram_precision(&[1], &[1], 0), Err(MetricError::InvalidOrder));
    }

    #[test]
    fn scorers_carry_polarity() {
        assert_eq!(
            scorer_by_name("seq_score").unwrap().polarity(),
            Polarity::HigherIsBetter
        );
        assert_eq!(
            scorer_by_name("error_rate").unwrap().polarity(),
            Polarity::LowerIsBetter
        );
        assert!(scorer_by_name("comet").is_err());
    }

    fn seq() -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(0u32..4, 0..9)
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_with_roles_swapped(a in seq(), b in seq()) {
            let ab = levenshtein_align(&a, &b);
            let ba = levenshtein_align(&b, &a);
            prop_assert_eq!(ab.distance(), ba.distance());
        }

        #[test]
        fn triangle_inequality(a in seq(), b in seq(), c in seq()) {
            let d = |x: &[u32], y: &[u32]| levenshtein_align(x, y).distance();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }

        #[test]
        fn alignment_bounds(a in seq(), b in seq()) {
            let al = levenshtein_align(&a, &b);
            prop_assert!(al.distance() <= a.len().max(b.len()));
            prop_assert_eq!(al.distance() == 0, a == b);
            // Deletions minus insertions account for the length difference.
            prop_assert_eq!(a.len() + al.insertions, b.len() + al.deletions);
        }

        #[test]
        fn seq_score_in_unit_interval(a in prop::collection::vec(0u32..4, 1..9), b in seq()) {
            let s = seq_score(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s == 1.0, a == b);
        }

        #[test]
        fn wer_ignores_sample_order(pairs in prop::collection::vec((prop::collection::vec(0u32..4, 1..6), seq()), 1..8)) {
            let (refs, hyps): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let (rr, hr): (Vec<_>, Vec<_>) = pairs.iter().rev().cloned().unzip();
            prop_assert_eq!(wer(&refs, &hyps).unwrap(), wer(&rr, &hr).unwrap());
        }
    }
}
