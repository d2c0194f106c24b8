//! Greedy and beam search over any next-token model.
//!
//! Hypotheses are ranked by total log-probability (no length
//! normalisation), then by shorter length, then by lexicographic token
//! order. A hypothesis finishes when it emits EOS (which is scored but
//! not included in the output) or when it reaches `max_len` tokens.

use std::cmp::Ordering;

use crate::error::ModelError;
use crate::metrics::Token;
use crate::vocab::EOS;

/// Anything that maps a generated prefix to next-token log-probabilities.
/// Tokens that may never be generated carry `-inf`.
pub trait StepModel {
    fn next_log_probs(&self, prefix: &[Token]) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<Token>,
    pub log_prob: f64,
}

/// Total order used for both pruning and the final choice.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_search(model: &impl StepModel, max_len: usize) -> Hypothesis {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < max_len {
        let lp = model.next_log_probs(&tokens);
        let mut best = 0;
        for (t, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = t;
            }
        }
        log_prob += lp[best];
        if best as Token == EOS {
            break;
        }
        tokens.push(best as Token);
    }
    Hypothesis { tokens, log_prob }
}

/// Beam search keeping the `beam` best candidates (finished or not) at
/// every step. With `beam == 1` this is exactly [`greedy_search`].
pub fn beam_search(model: &impl StepModel, beam: usize, max_len: usize) -> Result<Hypothesis, ModelError> {
    if beam < 1 {
        return Err(ModelError::InvalidBeam);
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    if max_len == 0 {
        finished.append(&mut live);
    }
    for step in 0..max_len {
        let mut candidates: Vec<(Hypothesis, bool)> = Vec::new();
        for h in &live {
            let lp = model.next_log_probs(&h.tokens);
            for (t, &v) in lp.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let t = t as Token;
                let mut tokens = h.tokens.clone();
                if t != EOS {
                    tokens.push(t);
                }
                candidates.push((
                    Hypothesis {
                        tokens,
                        log_prob: h.log_prob + v,
                    },
                    t == EOS,
                ));
            }
        }
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        candidates.truncate(beam);
        live.clear();
        for (h, done) in candidates {
            if done {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
        if step + 1 == max_len {
            finished.append(&mut live);
        }
        if live.is_empty() {
            break;
        }
    }
    finished.sort_by(rank);
    Ok(finished.into_iter().next().expect("at least one hypothesis finishes"))
}
