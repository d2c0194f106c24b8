//! Non-autoregressive proxy: predicts a sequence-level score directly from
//! encoder states.
//!
//! One trainable query attends over value-projected states (single head,
//! scale `1/sqrt(d_model)`), and the pooled vector goes through three linear
//! layers with tanh in between. Training minimises `1 - r`, the Pearson
//! correlation between predictions and targets over each batch.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{sha256_hex, Container};
use crate::error::{CheckpointError, NapError};
use crate::metrics::Token;
use crate::params::{Adam, Bound, ParamSet};
use crate::seq2seq::{EncoderOutput, Seq2Seq};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "nap";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Batches smaller than this are folded into the preceding batch.
pub const MIN_BATCH: usize = 8;

/// One proxy training row: a source, its reference, the frozen model's
/// greedy decoding and the score of that decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: u64,
    pub src: Vec<Token>,
    #[serde(rename = "ref")]
    pub reference: Vec<Token>,
    pub hyp: Vec<Token>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NapConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NapOpts {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Hidden width; defaults to the frozen model's `d_ffn`.
    pub d_ffn: Option<usize>,
}

impl Default for NapOpts {
    fn default() -> Self {
        NapOpts {
            lr: 1e-4,
            batch_size: 64,
            max_epochs: 50,
            patience: 1,
            seed: 0,
            d_ffn: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NapReport {
    pub train_loss: Vec<f64>,
    pub valid_r: Vec<f64>,
    /// Index into `valid_r` of the kept parameters; `None` means the
    /// initialisation was never beaten.
    pub best_epoch: Option<usize>,
    pub init_valid_r: f64,
    pub best_valid_r: f64,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nap {
    config: NapConfig,
    params: ParamSet,
    encoder_hash: Option<String>,
}

struct Handles<'a> {
    p: Bound<'a>,
}

impl Handles<'_> {
    /// Proxy outputs `[B, 1]` for the stacked states of `lens.len()` inputs.
    fn forward(&self, g: &mut Graph, states: Var, lens: &[usize], d: usize) -> Var {
        let b = lens.len();
        let q = g.embedding(self.p.var("query"), &vec![0; b]);
        let k = g.matmul(states, self.p.var("w_k"));
        let v = g.matmul(states, self.p.var("w_v"));
        let mask = if b > 1 {
            let n: usize = lens.iter().sum();
            let mut m = vec![f64::NEG_INFINITY; b * n];
            let mut off = 0;
            for (i, &l) in lens.iter().enumerate() {
                m[i * n + off..i * n + off + l].fill(0.0);
                off += l;
            }
            Some(g.leaf(Tensor::matrix(b, n, m).expect("positive mask shape")))
        } else {
            None
        };
        debug_assert_eq!(g.value(q).cols(), d);
        let pooled = g.attention(q, k, v, mask);
        let h = g.linear(pooled, self.p.var("l1.w"), self.p.var("l1.b"));
        let h = g.tanh(h);
        let h = g.linear(h, self.p.var("l2.w"), self.p.var("l2.b"));
        let h = g.tanh(h);
        g.linear(h, self.p.var("l3.w"), self.p.var("l3.b"))
    }
}

/// Builds `1 - r(preds, targets)` on the graph. `preds` has one entry per
/// target. Fails when either side has zero variance.
fn pearson_loss_var(g: &mut Graph, preds: Var, targets: &[f64]) -> Result<Var, NapError> {
    let n = targets.len();
    if n < 2 {
        return Err(NapError::TooFewSamples { needed: 2, got: n });
    }
    let p = g.reshape(preds, &[n]);
    let tm = targets.iter().sum::<f64>() / n as f64;
    let tc: Vec<f64> = targets.iter().map(|t| t - tm).collect();
    let t_norm = tc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if t_norm == 0.0 {
        return Err(NapError::Degenerate("targets are constant".into()));
    }
    let mean = g.mean(p);
    let pc = g.sub(p, mean);
    let pc_sq = g.mul(pc, pc);
    let ss = g.sum(pc_sq);
    if g.value(ss).item() == 0.0 {
        return Err(NapError::Degenerate("predictions are constant".into()));
    }
    let tcv = g.leaf(Tensor::vector(tc));
    let prod = g.mul(pc, tcv);
    let cov = g.sum(prod);
    let p_norm = g.sqrt(ss);
    let num = g.scale(cov, 1.0 / t_norm);
    let r = g.div(num, p_norm);
    let neg = g.scale(r, -1.0);
    let one = g.leaf(Tensor::scalar(1.0));
    Ok(g.add(neg, one))
}

/// `1 - r` with `r` the sample Pearson correlation.
pub fn pearson_loss(preds: &[f64], targets: &[f64]) -> Result<f64, NapError> {
    if preds.len() != targets.len() {
        return Err(NapError::DimMismatch {
            expected: targets.len(),
            got: preds.len(),
        });
    }
    let mut g = Graph::new();
    let p = g.leaf(Tensor::vector(preds.to_vec()));
    let l = pearson_loss_var(&mut g, p, targets)?;
    Ok(g.value(l).item())
}

/// Sample Pearson correlation (two-pass).
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64, NapError> {
    if a.len() != b.len() {
        return Err(NapError::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(NapError::TooFewSamples {
            needed: 2,
            got: a.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(NapError::Degenerate("zero variance".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

fn stack(states: &[&EncoderOutput]) -> (Tensor, Vec<usize>) {
    let d = states[0].d_model();
    let lens: Vec<usize> = states.iter().map(|e| e.source_len()).collect();
    let mut data = Vec::with_capacity(lens.iter().sum::<usize>() * d);
    for e in states {
        data.extend_from_slice(e.states().data());
    }
    let t = Tensor::matrix(lens.iter().sum(), d, data).expect("non-empty stack");
    (t, lens)
}

/// Splits `n` shuffled indices into batches, folding a short tail into the
/// batch before it.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < MIN_BATCH) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

impl Nap {
    pub fn init(config: NapConfig) -> Self {
        let (d, f) = (config.d_model, config.d_ffn);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        params.insert("query", Tensor::randn(&[1, d], 1.0, &mut rng));
        params.insert("w_k", Tensor::randn(&[d, d], fan(d), &mut rng));
        params.insert("w_v", Tensor::randn(&[d, d], fan(d), &mut rng));
        params.insert("l1.w", Tensor::randn(&[d, f], fan(d), &mut rng));
        params.insert("l1.b", Tensor::zeros(&[f]));
        params.insert("l2.w", Tensor::randn(&[f, f], fan(f), &mut rng));
        params.insert("l2.b", Tensor::zeros(&[f]));
        params.insert("l3.w", Tensor::randn(&[f, 1], fan(f), &mut rng));
        params.insert("l3.b", Tensor::zeros(&[1]));
        Nap {
            config,
            params,
            encoder_hash: None,
        }
    }

    pub fn config(&self) -> &NapConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// SHA-256 of the frozen checkpoint this proxy was trained against.
    pub fn encoder_hash(&self) -> Option<&str> {
        self.encoder_hash.as_deref()
    }

    fn check(&self, enc: &EncoderOutput) -> Result<(), NapError> {
        if enc.d_model() != self.config.d_model {
            return Err(NapError::DimMismatch {
                expected: self.config.d_model,
                got: enc.d_model(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, enc: &EncoderOutput) -> Result<f64, NapError> {
        Ok(self.forward_batch(&[enc])?[0])
    }

    /// Predictions for several inputs at once.
    pub fn forward_batch(&self, encs: &[&EncoderOutput]) -> Result<Vec<f64>, NapError> {
        if encs.is_empty() {
            return Ok(Vec::new());
        }
        for e in encs {
            self.check(e)?;
        }
        let (t, lens) = stack(encs);
        let mut g = Graph::new();
        let h = Handles {
            p: self.params.bind(&mut g),
        };
        let x = g.leaf(t);
        let out = h.forward(&mut g, x, &lens, self.config.d_model);
        Ok(g.value(out).data().to_vec())
    }

    /// Proxy score and its gradient with respect to the encoder states.
    pub fn score_and_grad(&self, enc: &EncoderOutput) -> Result<(f64, Tensor), NapError> {
        self.check(enc)?;
        let mut g = Graph::new();
        let h = Handles {
            p: self.params.bind(&mut g),
        };
        let x = g.leaf(enc.states().clone());
        let out = h.forward(&mut g, x, &[enc.source_len()], self.config.d_model);
        let s = g.sum(out);
        let grads = g.grad(s, &[x]).expect("scalar output");
        Ok((g.value(s).item(), grads.get(0).clone()))
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: CHECKPOINT_KIND.into(),
            format_version: CHECKPOINT_VERSION,
            meta: serde_json::json!({
                "config": self.config,
                "encoder_hash": self.encoder_hash,
            }),
            tensors: self.params.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self, NapError> {
        c.expect(CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
        let config: NapConfig = serde_json::from_value(c.meta["config"].clone()).map_err(CheckpointError::from)?;
        let encoder_hash: Option<String> =
            serde_json::from_value(c.meta["encoder_hash"].clone()).map_err(CheckpointError::from)?;
        let expected = Nap::init(config);
        for (name, t) in expected.params.iter() {
            match c.tensors.get(name) {
                Some(found) if found.shape() == t.shape() => {}
                Some(found) => {
                    return Err(CheckpointError::Malformed(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        found.shape(),
                        t.shape()
                    ))
                    .into())
                }
                None => return Err(CheckpointError::MissingTensor(name.into()).into()),
            }
        }
        if c.tensors.len() != expected.params.len() {
            return Err(CheckpointError::Malformed("unexpected extra tensors".into()).into());
        }
        Ok(Nap {
            config,
            params: c.tensors,
            encoder_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NapError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, NapError> {
        Self::from_container(Container::load(path)?)
    }
}

/// Pearson r between proxy outputs and `targets`.
pub fn evaluate_nap(nap: &Nap, encs: &[EncoderOutput], targets: &[f64]) -> Result<f64, NapError> {
    let refs: Vec<&EncoderOutput> = encs.iter().collect();
    let preds = nap.forward_batch(&refs)?;
    pearson_r(&preds, targets)
}

/// Trains a fresh proxy on precomputed encoder states. Early stopping keeps
/// the parameters with the best validation r.
pub fn train_nap_on_states(
    config: NapConfig,
    train: (&[EncoderOutput], &[f64]),
    valid: (&[EncoderOutput], &[f64]),
    opts: &NapOpts,
) -> Result<(Nap, NapReport), NapError> {
    let (tx, ty) = train;
    let (vx, vy) = valid;
    if tx.len() != ty.len() || vx.len() != vy.len() {
        return Err(NapError::DimMismatch {
            expected: tx.len(),
            got: ty.len(),
        });
    }
    if tx.len() < 2 {
        return Err(NapError::TooFewSamples {
            needed: 2,
            got: tx.len(),
        });
    }
    let valid_r = |nap: &Nap| evaluate_nap(nap, vx, vy).map_err(|e| NapError::UndefinedValidation(e.to_string()));
    let mut nap = Nap::init(config);
    let init_r = valid_r(&nap)?;
    let mut report = NapReport {
        init_valid_r: init_r,
        best_valid_r: init_r,
        ..NapReport::default()
    };
    let mut best = nap.params.clone();
    let mut opt = Adam::new(&nap.params, opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..tx.len()).collect();
    let mut stale = 0;
    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut used) = (0.0, 0);
        for batch in batches(&order, opts.batch_size.max(2)) {
            let encs: Vec<&EncoderOutput> = batch.iter().map(|&i| &tx[i]).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| ty[i]).collect();
            let (t, lens) = stack(&encs);
            let mut g = Graph::new();
            let h = Handles {
                p: nap.params.bind(&mut g),
            };
            let x = g.leaf(t);
            let preds = h.forward(&mut g, x, &lens, config.d_model);
            let loss = match pearson_loss_var(&mut g, preds, &targets) {
                Ok(l) => l,
                Err(NapError::Degenerate(_)) | Err(NapError::TooFewSamples { .. }) => {
                    report.skipped_batches += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            loss_sum += g.value(loss).item();
            used += 1;
            let grads = g.grad(loss, h.p.vars()).expect("scalar loss").into_vec();
            opt.step(&mut nap.params, &grads);
        }
        report
            .train_loss
            .push(if used > 0 { loss_sum / used as f64 } else { f64::NAN });
        let r = valid_r(&nap)?;
        report.valid_r.push(r);
        if r > report.best_valid_r {
            report.best_valid_r = r;
            report.best_epoch = Some(epoch);
            best = nap.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience.max(1) {
                break;
            }
        }
    }
    nap.params = best;
    Ok((nap, report))
}

/// Encodes the error-free rows of a scored set with the frozen model.
pub fn encode_scored(model: &Seq2Seq, rows: &[ScoredSample]) -> Result<(Vec<EncoderOutput>, Vec<f64>), NapError> {
    let mut encs = Vec::with_capacity(rows.len());
    let mut targets = Vec::with_capacity(rows.len());
    for r in rows.iter().filter(|r| r.err.is_none()) {
        encs.push(model.encode(&r.src)?);
        targets.push(r.score);
    }
    Ok((encs, targets))
}

/// Trains a proxy on the frozen model's encoder states for `train`, with
/// early stopping on `valid`. The model is only read.
pub fn train_nap(
    model: &Seq2Seq,
    train: &[ScoredSample],
    valid: &[ScoredSample],
    opts: &NapOpts,
) -> Result<(Nap, NapReport), NapError> {
    let tr = encode_scored(model, train)?;
    let va = encode_scored(model, valid)?;
    let config = NapConfig {
        d_model: model.config().d_model,
        d_ffn: opts.d_ffn.unwrap_or(model.config().d_ffn),
        seed: opts.seed,
    };
    let (mut nap, report) = train_nap_on_states(config, (&tr.0, &tr.1), (&va.0, &va.1), opts)?;
    nap.encoder_hash = Some(sha256_hex(&model.to_bytes()));
    Ok((nap, report))
}
