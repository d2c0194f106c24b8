//! Norm-matched gradient steps on encoder states and the α-sweep protocol.
//!
//! For every position `i` the step is
//! `δ_i = sign · α · |e_i| · g_i / |g_i|`, with `g_i` the proxy gradient at
//! that position and `|·|` the L2 norm of one position's vector. Positions
//! whose gradient norm is below `epsilon` are left untouched.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::PerturbError;
use crate::metrics::{Polarity, Scorer, Token};
use crate::nap::Nap;
use crate::seq2seq::{EncoderOutput, Seq2Seq};
use crate::tasks::Sample;
use crate::tensor::{l2_norm, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ascend,
    Descend,
}

impl Direction {
    pub fn for_polarity(p: Polarity) -> Self {
        match p {
            Polarity::HigherIsBetter => Direction::Ascend,
            Polarity::LowerIsBetter => Direction::Descend,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub alpha: f64,
    pub direction: Direction,
    pub epsilon: f64,
}

impl PerturbationConfig {
    pub fn new(alpha: f64, direction: Direction) -> Self {
        PerturbationConfig {
            alpha,
            direction,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(PerturbError::InvalidConfig(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(PerturbError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one perturbation step.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub states: Tensor,
    /// Positions left unchanged because their gradient norm was below epsilon.
    pub zero_gradient_positions: usize,
}

/// Applies the norm-matched step to `states` given the proxy gradient
/// `grad` (same shape). `α = 0` returns the states bit for bit.
pub fn apply_step(states: &Tensor, grad: &Tensor, cfg: &PerturbationConfig) -> Result<Perturbed, PerturbError> {
    cfg.validate()?;
    if states.shape() != grad.shape() || states.shape().len() != 2 {
        return Err(PerturbError::InvalidConfig(format!(
            "gradient shape {:?} does not match states {:?}",
            grad.shape(),
            states.shape()
        )));
    }
    for i in 0..grad.rows() {
        if !grad.row(i).iter().all(|v| v.is_finite()) {
            return Err(PerturbError::NonFiniteGradient { position: i });
        }
    }
    let mut out = states.clone();
    let mut zero = 0;
    for i in 0..states.rows() {
        let g = grad.row(i);
        let gn = l2_norm(g);
        if gn < cfg.epsilon {
            zero += 1;
            continue;
        }
        if cfg.alpha == 0.0 {
            continue;
        }
        let scale = cfg.direction.sign() * cfg.alpha * l2_norm(states.row(i)) / gn;
        for (e, gv) in out.row_mut(i).iter_mut().zip(g) {
            *e += scale * gv;
        }
    }
    Ok(Perturbed {
        states: out,
        zero_gradient_positions: zero,
    })
}

/// One proxy-guided step on `enc`. The input is not modified.
pub fn perturb(
    enc: &EncoderOutput,
    nap: &Nap,
    cfg: &PerturbationConfig,
) -> Result<(EncoderOutput, usize), PerturbError> {
    let (_, grad) = nap.score_and_grad(enc)?;
    let p = apply_step(enc.states(), &grad, cfg)?;
    Ok((EncoderOutput::new(p.states), p.zero_gradient_positions))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: String,
    pub split: String,
    pub alpha: f64,
    pub seed: u64,
    pub beam: usize,
    pub n_samples: usize,
    pub mean_score: f64,
    /// Sample standard deviation of the per-sample scores.
    pub std_score: f64,
    pub mean_runtime_ms: f64,
    pub skipped: usize,
}

/// Per-α summary across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub mean_score: f64,
    /// Sample standard deviation over seeds; absent with a single seed.
    pub std_score: Option<f64>,
    pub n_seeds: usize,
    pub mean_runtime_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub selected_alpha: Option<f64>,
}

pub const CSV_HEADER: &str = "task,split,alpha,seed,beam,n_samples,mean_score,std_score,mean_runtime_ms,skipped";

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl SweepResult {
    pub fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.seed.cmp(&b.seed)));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.6},{},{},{},{:.6},{:.6},{:.6},{}",
                r.task,
                r.split,
                r.alpha,
                r.seed,
                r.beam,
                r.n_samples,
                r.mean_score,
                r.std_score,
                r.mean_runtime_ms,
                r.skipped
            )
            .expect("writing to a string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PerturbError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Rows grouped by α in ascending order.
    pub fn aggregate(&self) -> Vec<AlphaSummary> {
        let mut alphas: Vec<f64> = self.rows.iter().map(|r| r.alpha).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        alphas
            .into_iter()
            .map(|alpha| {
                let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.alpha == alpha).collect();
                let scores: Vec<f64> = rows.iter().map(|r| r.mean_score).collect();
                let times: Vec<f64> = rows.iter().map(|r| r.mean_runtime_ms).collect();
                AlphaSummary {
                    alpha,
                    mean_score: mean(&scores),
                    std_score: (scores.len() >= 2).then(|| sample_std(&scores)),
                    n_seeds: scores.len(),
                    mean_runtime_ms: mean(&times),
                }
            })
            .collect()
    }
}

/// Picks the α with the best mean validation score. Ties go to the
/// smaller α.
pub fn select_alpha(summary: &[AlphaSummary], polarity: Polarity) -> Result<f64, PerturbError> {
    if summary.len() < 2 {
        return Err(PerturbError::InvalidSweep(format!(
            "need at least two alphas to select from, got {}",
            summary.len()
        )));
    }
    let mut sorted: Vec<&AlphaSummary> = summary.iter().collect();
    sorted.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let mut best = sorted[0];
    for s in &sorted[1..] {
        if polarity.better(s.mean_score, best.mean_score) {
            best = s;
        }
    }
    Ok(best.alpha)
}

pub struct SweepSpec<'a> {
    pub task: &'a str,
    pub split: &'a str,
    pub alphas: &'a [f64],
    pub beam: usize,
    pub max_len: usize,
    pub epsilon: f64,
}

/// Scores and timing of one decoding pass over the rows.
struct Pass {
    scores: Vec<f64>,
    times_ms: Vec<f64>,
    skipped: usize,
}

fn decode_pass(
    model: &Seq2Seq,
    rows: &[Sample],
    encs: &[(EncoderOutput, f64)],
    states: impl Fn(usize) -> Result<(Option<EncoderOutput>, f64), PerturbError>,
    spec: &SweepSpec<'_>,
    scorer: &dyn Scorer,
) -> Result<Pass, PerturbError> {
    let mut pass = Pass {
        scores: Vec::with_capacity(rows.len()),
        times_ms: Vec::with_capacity(rows.len()),
        skipped: 0,
    };
    for (i, row) in rows.iter().enumerate() {
        let (perturbed, extra_ms) = states(i)?;
        let enc = perturbed.as_ref().unwrap_or(&encs[i].0);
        let t = Instant::now();
        let hyp: Result<Vec<Token>, _> = model.decode_beam(enc, spec.beam, spec.max_len);
        let decode_ms = t.elapsed().as_secs_f64() * 1e3;
        match hyp
            .map_err(|e| e.to_string())
            .and_then(|h| scorer.score(&row.reference, &h).map_err(|e| e.to_string()))
        {
            Ok(s) => pass.scores.push(s),
            Err(e) => {
                log::warn!("{} {} row {}: skipped ({e})", spec.task, spec.split, row.id);
                pass.skipped += 1;
            }
        }
        pass.times_ms.push(encs[i].1 + extra_ms + decode_ms);
    }
    Ok(pass)
}

fn row_of(spec: &SweepSpec<'_>, alpha: f64, seed: u64, pass: &Pass) -> SweepRow {
    SweepRow {
        task: spec.task.to_string(),
        split: spec.split.to_string(),
        alpha,
        seed,
        beam: spec.beam,
        n_samples: pass.scores.len() + pass.skipped,
        mean_score: if pass.scores.is_empty() {
            f64::NAN
        } else {
            mean(&pass.scores)
        },
        std_score: sample_std(&pass.scores),
        mean_runtime_ms: mean(&pass.times_ms),
        skipped: pass.skipped,
    }
}

/// Decodes every row once per `(α, seed)` with encoder states perturbed by
/// that seed's proxy, and scores against the references. The encoder runs
/// once per row; `α = 0` decodes the unperturbed states without calling the
/// proxy. Runtimes include encoding, the proxy pass and decoding.
pub fn alpha_sweep(
    model: &Seq2Seq,
    naps: &[(u64, &Nap)],
    rows: &[Sample],
    spec: &SweepSpec<'_>,
    scorer: &dyn Scorer,
) -> Result<SweepResult, PerturbError> {
    if spec.alphas.is_empty() || !spec.alphas.contains(&0.0) {
        return Err(PerturbError::InvalidSweep("alpha grid must include 0".into()));
    }
    if naps.is_empty() {
        return Err(PerturbError::InvalidSweep("no seeds".into()));
    }
    if rows.is_empty() {
        return Err(PerturbError::InvalidSweep("no rows".into()));
    }
    let direction = Direction::for_polarity(scorer.polarity());
    for &alpha in spec.alphas {
        PerturbationConfig {
            alpha,
            direction,
            epsilon: spec.epsilon,
        }
        .validate()?;
    }
    let encs: Vec<(EncoderOutput, f64)> = rows
        .iter()
        .map(|r| {
            let t = Instant::now();
            let e = model.encode(&r.src)?;
            Ok((e, t.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<_, PerturbError>>()?;
    let baseline = decode_pass(model, rows, &encs, |_| Ok((None, 0.0)), spec, scorer)?;
    let mut out = SweepResult::default();
    for &(seed, nap) in naps {
        let grads: Vec<(Tensor, f64)> = encs
            .iter()
            .map(|(e, _)| {
                let t = Instant::now();
                let (_, g) = nap.score_and_grad(e)?;
                Ok((g, t.elapsed().as_secs_f64() * 1e3))
            })
            .collect::<Result<_, PerturbError>>()?;
        for &alpha in spec.alphas {
            if alpha == 0.0 {
                out.rows.push(row_of(spec, alpha, seed, &baseline));
                continue;
            }
            let cfg = PerturbationConfig {
                alpha,
                direction,
                epsilon: spec.epsilon,
            };
            let pass = decode_pass(
                model,
                rows,
                &encs,
                |i| {
                    let t = Instant::now();
                    let p = apply_step(encs[i].0.states(), &grads[i].0, &cfg)?;
                    let e = EncoderOutput::new(p.states);
                    Ok((Some(e), grads[i].1 + t.elapsed().as_secs_f64() * 1e3))
                },
                spec,
                scorer,
            )?;
            out.rows.push(row_of(spec, alpha, seed, &pass));
        }
    }
    out.sort();
    Ok(out)
}
