//! Synthetic sequence tasks and the greedy decode-then-score pipeline.
//!
//! Content tokens are split into a base half and a "shadow" half. A clean
//! sequence is drawn from the base half; corruption replaces a base token
//! `t` by its shadow `t + K`, so the source still carries the identity of
//! the token but in a form the model has to learn to undo. Each row draws
//! its own corruption probability uniformly from `[0, noise_rate]`, which
//! spreads the difficulty (and hence the scores) across rows.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::TaskError;
use crate::metrics::{Scorer, Token};
use crate::nap::ScoredSample;
use crate::seq2seq::Seq2Seq;
use crate::vocab::{FIRST_CONTENT, FIRST_TAG, NUM_TAGS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NoisyCopy,
    Reversal,
    /// Fixed random substitution of base tokens, drawn from `TaskSpec::seed`.
    Cipher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Task tag index; when set, sources start with that tag token.
    #[serde(default)]
    pub tag: Option<u32>,
    /// Rows whose drawn corruption probability exceeds this value keep the
    /// shadow tokens in their reference instead of the base tokens, like a
    /// corpus where only lightly corrupted rows were cleaned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_noise_above: Option<f64>,
}

impl TaskSpec {
    /// Base tokens available to clean sequences.
    pub fn num_base(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT as usize) / 2
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::InvalidSpec(m));
        if self.min_len < 1 || self.min_len > self.max_len {
            return bad(format!(
                "length range [{}, {}] is empty or starts below 1",
                self.min_len, self.max_len
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        if self.tag.is_some_and(|t| t >= NUM_TAGS) {
            return bad(format!("tag must be below {NUM_TAGS}"));
        }
        let k = self.num_base();
        if self.kind == TaskKind::Cipher && k < 2 {
            return Err(TaskError::VocabTooSmall { content: k });
        }
        if k < 1 {
            return bad("vocab_size leaves no content tokens".into());
        }
        Ok(())
    }

    /// Longest source these settings produce (including a tag).
    pub fn max_source_len(&self) -> usize {
        self.max_len + usize::from(self.tag.is_some())
    }

    /// Model `max_len` needed to hold every source and reference.
    pub fn required_model_len(&self) -> usize {
        self.max_source_len().max(self.max_len) + 2
    }

    pub fn shadow(&self, t: Token) -> Token {
        t + self.num_base() as Token
    }

    /// The cipher bijection over base tokens (identity for other kinds).
    pub fn substitution(&self) -> Vec<Token> {
        let base: Vec<Token> = (0..self.num_base() as Token).map(|i| FIRST_CONTENT + i).collect();
        if self.kind != TaskKind::Cipher {
            return base;
        }
        let mut perm = base;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c1f3);
        perm.shuffle(&mut rng);
        perm
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub src: Vec<Token>,
    #[serde(rename = "ref")]
    pub reference: Vec<Token>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn pairs(&self, s: Split) -> Vec<(Vec<Token>, Vec<Token>)> {
        self.split(s)
            .iter()
            .map(|r| (r.src.clone(), r.reference.clone()))
            .collect()
    }

    /// Writes `<dir>/<prefix>train.jsonl` and friends.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<(), TaskError> {
        for s in Split::ALL {
            write_jsonl(&dir.join(format!("{prefix}{}.jsonl", s.name())), self.split(s))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, prefix: &str) -> Result<Self, TaskError> {
        let read = |s: Split| read_jsonl(&dir.join(format!("{prefix}{}.jsonl", s.name())));
        Ok(Dataset {
            train: read(Split::Train)?,
            valid: read(Split::Valid)?,
            test: read(Split::Test)?,
        })
    }
}

fn draw(spec: &TaskSpec, subst: &[Token], rng: &mut ChaCha8Rng) -> (Vec<Token>, Vec<Token>) {
    let k = spec.num_base() as Token;
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let clean: Vec<Token> = (0..len).map(|_| FIRST_CONTENT + rng.random_range(0..k)).collect();
    let rate = if spec.noise_rate > 0.0 {
        rng.random_range(0.0..spec.noise_rate)
    } else {
        0.0
    };
    let mut src = Vec::with_capacity(len + 1);
    if let Some(t) = spec.tag {
        src.push(FIRST_TAG + t);
    }
    let keep = spec.keep_noise_above.is_some_and(|th| rate > th);
    let mut kept = Vec::with_capacity(len);
    for &t in &clean {
        let corrupt = rate > 0.0 && rng.random_bool(rate);
        let s = if corrupt { spec.shadow(t) } else { t };
        src.push(s);
        kept.push(if keep { s } else { t });
    }
    let reference = match spec.kind {
        TaskKind::NoisyCopy => kept,
        TaskKind::Reversal => kept.into_iter().rev().collect(),
        TaskKind::Cipher => kept
            .iter()
            .map(|&t| subst.get((t - FIRST_CONTENT) as usize).copied().unwrap_or(t))
            .collect(),
    };
    (src, reference)
}

/// `n` pairwise-distinct rows drawn from `spec`, with ids `0..n`.
/// Deterministic in `(spec, seed)`.
pub fn gen_rows(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<Sample>, TaskError> {
    spec.validate()?;
    let subst = spec.substitution();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let max_attempts = 100 * n + 1000;
    let mut attempts = 0;
    let mut rows = Vec::with_capacity(n);
    while rows.len() < n {
        if attempts == max_attempts {
            return Err(TaskError::Exhausted { wanted: n, attempts });
        }
        attempts += 1;
        let pair = draw(spec, &subst, &mut rng);
        if seen.insert(pair.clone()) {
            let (src, reference) = pair;
            rows.push(Sample {
                id: rows.len() as u64,
                src,
                reference,
            });
        }
    }
    Ok(rows)
}

/// Draws `sizes = (train, valid, test)` rows with pairwise-distinct
/// `(src, ref)` pairs across all splits. Deterministic in `(spec, seed)`.
pub fn gen_dataset(spec: &TaskSpec, sizes: (usize, usize, usize), seed: u64) -> Result<Dataset, TaskError> {
    if sizes.0 < 1 || sizes.1 < 1 || sizes.2 < 1 {
        spec.validate()?;
        return Err(TaskError::InvalidSpec("every split needs at least one row".into()));
    }
    let mut rows = gen_rows(spec, sizes.0 + sizes.1 + sizes.2, seed)?.into_iter();
    let mut take = |n: usize| -> Vec<Sample> {
        (0..n as u64)
            .map(|id| Sample {
                id,
                ..rows.next().expect("enough rows")
            })
            .collect()
    };
    Ok(Dataset {
        train: take(sizes.0),
        valid: take(sizes.1),
        test: take(sizes.2),
    })
}

/// Greedy-decodes every row and scores it. Rows whose decoding or scoring
/// fails are kept with `err` set and a zero score.
pub fn decode_and_score(model: &Seq2Seq, rows: &[Sample], scorer: &dyn Scorer, max_len: usize) -> Vec<ScoredSample> {
    rows.iter()
        .map(|r| {
            let out = model
                .encode(&r.src)
                .and_then(|e| model.decode_greedy(&e, max_len))
                .map_err(|e| e.to_string())
                .and_then(|hyp| {
                    scorer
                        .score(&r.reference, &hyp)
                        .map(|s| (hyp, s))
                        .map_err(|e| e.to_string())
                });
            let (hyp, score, err) = match out {
                Ok((h, s)) => (h, s, None),
                Err(e) => {
                    log::warn!("row {}: {e}", r.id);
                    (Vec::new(), 0.0, Some(e))
                }
            };
            ScoredSample {
                id: r.id,
                src: r.src.clone(),
                reference: r.reference.clone(),
                hyp,
                score,
                err,
            }
        })
        .collect()
}

/// Population variance of the error-free scores; rejects near-constant
/// score sets that would make correlation training degenerate.
pub fn check_score_variance(rows: &[ScoredSample]) -> Result<f64, TaskError> {
    let s: Vec<f64> = rows.iter().filter(|r| r.err.is_none()).map(|r| r.score).collect();
    let variance = if s.is_empty() {
        0.0
    } else {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s.len() as f64
    };
    if variance < 1e-6 {
        return Err(TaskError::DegenerateScores { variance });
    }
    Ok(variance)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), TaskError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, TaskError> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| TaskError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}
