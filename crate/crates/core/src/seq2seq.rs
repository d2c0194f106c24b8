//! Toy pre-LN transformer encoder-decoder.
//!
//! Sinusoidal positions, separate source/target embeddings, ReLU FFNs and an
//! untied output projection. The encoder output is the final layer-normed
//! residual stream; the decoder's cross-attention reads it directly, so any
//! perturbation of [`EncoderOutput::states`] flows straight into decoding.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Container;
use crate::error::{CheckpointError, ModelError};
use crate::metrics::Token;
use crate::params::{clip_global_norm, Adam, Bound, ParamSet};
use crate::search::{beam_search, greedy_search, StepModel};
use crate::tensor::{l2_norm, Tensor};
use crate::vocab::{BOS, EOS, FIRST_TAG, PAD};

pub const CHECKPOINT_KIND: &str = "seq2seq";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    /// Longest source sequence and longest decoded output, in tokens.
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn small(vocab_size: usize, max_len: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            d_ffn: 128,
            n_heads: 2,
            n_layers_enc: 2,
            n_layers_dec: 2,
            max_len,
            seed,
        }
    }

    pub fn large(vocab_size: usize, max_len: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            d_ffn: 256,
            n_heads: 4,
            n_layers_enc: 3,
            n_layers_dec: 3,
            max_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.vocab_size <= FIRST_TAG as usize {
            return bad("vocab_size must exceed the reserved special tokens");
        }
        if self.d_model == 0 || self.d_ffn == 0 || self.n_heads == 0 {
            return bad("d_model, d_ffn and n_heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads must divide d_model");
        }
        if self.n_layers_enc == 0 || self.n_layers_dec == 0 {
            return bad("layer counts must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        Ok(())
    }
}

/// Encoder states `e_{1:L}` with their per-position L2 norms.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    states: Tensor,
    norms: Vec<f64>,
}

impl EncoderOutput {
    /// `states` must be an `[L, d_model]` matrix with `L ≥ 1`.
    pub fn new(states: Tensor) -> Self {
        assert_eq!(states.shape().len(), 2, "encoder states must be a matrix");
        let norms = (0..states.rows()).map(|i| l2_norm(states.row(i))).collect();
        EncoderOutput { states, norms }
    }

    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn source_len(&self) -> usize {
        self.states.rows()
    }

    pub fn d_model(&self) -> usize {
        self.states.cols()
    }

    pub fn norm_per_position(&self) -> &[f64] {
        &self.norms
    }
}

/// Recorded alongside the weights in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    FanIn,
    Zeros,
    Ones,
}

fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (c.d_model, c.d_ffn, c.vocab_size);
    let mut s = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| s.push((name, shape, init));
    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.g"), vec![d], Init::Ones);
        push(format!("{p}.b"), vec![d], Init::Zeros);
    };
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for w in ["q", "k", "v", "o"] {
            push(format!("{p}.w{w}"), vec![d, d], Init::FanIn);
            push(format!("{p}.b{w}"), vec![d], Init::Zeros);
        }
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.w1"), vec![d, f], Init::FanIn);
        push(format!("{p}.b1"), vec![f], Init::Zeros);
        push(format!("{p}.w2"), vec![f, d], Init::FanIn);
        push(format!("{p}.b2"), vec![d], Init::Zeros);
    };
    push("enc.embed".into(), vec![v, d], Init::Normal);
    for l in 0..c.n_layers_enc {
        ln(&mut push, &format!("enc.{l}.ln1"));
        attn(&mut push, &format!("enc.{l}.attn"));
        ln(&mut push, &format!("enc.{l}.ln2"));
        ffn(&mut push, &format!("enc.{l}.ffn"));
    }
    ln(&mut push, "enc.ln_f");
    push("dec.embed".into(), vec![v, d], Init::Normal);
    for l in 0..c.n_layers_dec {
        ln(&mut push, &format!("dec.{l}.ln1"));
        attn(&mut push, &format!("dec.{l}.self"));
        ln(&mut push, &format!("dec.{l}.ln2"));
        attn(&mut push, &format!("dec.{l}.cross"));
        ln(&mut push, &format!("dec.{l}.ln3"));
        ffn(&mut push, &format!("dec.{l}.ffn"));
    }
    ln(&mut push, "dec.ln_f");
    push("out.w".into(), vec![d, v], Init::FanIn);
    push("out.b".into(), vec![v], Init::Zeros);
    s
}

fn sinusoidal_table(rows: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::matrix(rows, d, data).expect("positive table shape")
}

/// Additive logit mask that forbids PAD and BOS as outputs.
fn output_mask(vocab: usize) -> Tensor {
    let mut m = vec![0.0; vocab];
    m[PAD as usize] = f64::NEG_INFINITY;
    m[BOS as usize] = f64::NEG_INFINITY;
    Tensor::vector(m)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
    let lz = max + z.ln();
    row.iter().map(|x| x - lz).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    config: ModelConfig,
    params: ParamSet,
    training: TrainingMeta,
    pe: Arc<Tensor>,
    out_mask: Arc<Tensor>,
}

/// Graph-side handles shared by the encoder and decoder builders.
struct Ctx<'a> {
    cfg: &'a ModelConfig,
    p: Bound<'a>,
    pe: Var,
    out_mask: Var,
}

impl Ctx<'_> {
    fn ln(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let n = g.layer_norm(x);
        let n = g.mul(n, self.p.var(&format!("{name}.g")));
        g.add(n, self.p.var(&format!("{name}.b")))
    }

    fn proj(&self, g: &mut Graph, x: Var, name: &str, w: &str) -> Var {
        g.linear(
            x,
            self.p.var(&format!("{name}.w{w}")),
            self.p.var(&format!("{name}.b{w}")),
        )
    }

    /// Multi-head attention from already projected queries, keys and values.
    fn heads(&self, g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>, name: &str) -> Var {
        let h = self.cfg.n_heads;
        let mixed = if h == 1 {
            g.attention(q, k, v, mask)
        } else {
            let dh = self.cfg.d_model / h;
            let outs: Vec<Var> = (0..h)
                .map(|i| {
                    let qh = g.slice(q, 1, i * dh, dh);
                    let kh = g.slice(k, 1, i * dh, dh);
                    let vh = g.slice(v, 1, i * dh, dh);
                    g.attention(qh, kh, vh, mask)
                })
                .collect();
            g.concat(&outs, 1)
        };
        self.proj(g, mixed, name, "o")
    }

    fn ffn(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let h = g.linear(x, self.p.var(&format!("{name}.w1")), self.p.var(&format!("{name}.b1")));
        let h = g.relu(h);
        g.linear(h, self.p.var(&format!("{name}.w2")), self.p.var(&format!("{name}.b2")))
    }

    /// Token embeddings plus positions; positions restart for every sequence.
    fn embed(&self, g: &mut Graph, table: &str, seqs: &[&[Token]]) -> Var {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let x = g.embedding(self.p.var(table), &ids);
        let pe = g.embedding(self.pe, &pos);
        g.add(x, pe)
    }

    /// Stacked encoder states for a batch of sources, rows in input order.
    fn encoder(&self, g: &mut Graph, srcs: &[&[Token]]) -> Var {
        let mut x = self.embed(g, "enc.embed", srcs);
        let lens: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
        let pad: Vec<bool> = srcs.iter().flat_map(|s| s.iter().map(|&t| t == PAD)).collect();
        let mask = attention_mask(&lens, &lens, false, &pad).map(|m| g.leaf(m));
        for l in 0..self.cfg.n_layers_enc {
            let pfx = format!("enc.{l}");
            let h = self.ln(g, x, &format!("{pfx}.ln1"));
            let name = format!("{pfx}.attn");
            let q = self.proj(g, h, &name, "q");
            let k = self.proj(g, h, &name, "k");
            let v = self.proj(g, h, &name, "v");
            let a = self.heads(g, q, k, v, mask, &name);
            x = g.add(x, a);
            let h = self.ln(g, x, &format!("{pfx}.ln2"));
            let f = self.ffn(g, h, &format!("{pfx}.ffn"));
            x = g.add(x, f);
        }
        self.ln(g, x, "enc.ln_f")
    }

    /// Cross-attention keys and values for every decoder layer.
    fn cross_kv(&self, g: &mut Graph, enc: Var) -> Vec<(Var, Var)> {
        (0..self.cfg.n_layers_dec)
            .map(|l| {
                let name = format!("dec.{l}.cross");
                (self.proj(g, enc, &name, "k"), self.proj(g, enc, &name, "v"))
            })
            .collect()
    }

    /// Stacked logits for BOS-prefixed decoder inputs; `src_lens` gives the
    /// row blocks of the encoder states behind `cross`.
    fn decoder(&self, g: &mut Graph, inputs: &[&[Token]], src_lens: &[usize], cross: &[(Var, Var)]) -> Var {
        let mut x = self.embed(g, "dec.embed", inputs);
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let self_mask = attention_mask(&lens, &lens, true, &[]).map(|m| g.leaf(m));
        let cross_mask = attention_mask(&lens, src_lens, false, &[]).map(|m| g.leaf(m));
        for (l, &(ck, cv)) in cross.iter().enumerate() {
            let pfx = format!("dec.{l}");
            let h = self.ln(g, x, &format!("{pfx}.ln1"));
            let name = format!("{pfx}.self");
            let q = self.proj(g, h, &name, "q");
            let k = self.proj(g, h, &name, "k");
            let v = self.proj(g, h, &name, "v");
            let a = self.heads(g, q, k, v, self_mask, &name);
            x = g.add(x, a);
            let h = self.ln(g, x, &format!("{pfx}.ln2"));
            let name = format!("{pfx}.cross");
            let q = self.proj(g, h, &name, "q");
            let a = self.heads(g, q, ck, cv, cross_mask, &name);
            x = g.add(x, a);
            let h = self.ln(g, x, &format!("{pfx}.ln3"));
            let f = self.ffn(g, h, &format!("{pfx}.ffn"));
            x = g.add(x, f);
        }
        let y = self.ln(g, x, "dec.ln_f");
        let logits = g.linear(y, self.p.var("out.w"), self.p.var("out.b"));
        g.add(logits, self.out_mask)
    }
}

/// Additive attention mask for stacked sequences: each query block sees only
/// its own key block, optionally causally, and never a PAD key. `None` when
/// nothing needs masking.
fn attention_mask(q_lens: &[usize], k_lens: &[usize], causal: bool, pad: &[bool]) -> Option<Tensor> {
    let (nq, nk): (usize, usize) = (q_lens.iter().sum(), k_lens.iter().sum());
    let trivial = q_lens.len() == 1 && !pad.contains(&true) && (!causal || nq == 1);
    if trivial {
        return None;
    }
    let mut m = vec![f64::NEG_INFINITY; nq * nk];
    let (mut q0, mut k0) = (0, 0);
    for (&lq, &lk) in q_lens.iter().zip(k_lens) {
        for i in 0..lq {
            for j in 0..lk {
                let blocked = (causal && j > i) || pad.get(k0 + j).copied().unwrap_or(false);
                if !blocked {
                    m[(q0 + i) * nk + k0 + j] = 0.0;
                }
            }
        }
        q0 += lq;
        k0 += lk;
    }
    Some(Tensor::matrix(nq, nk, m).expect("positive mask shape"))
}

impl Seq2Seq {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in param_specs(&config) {
            let t = match init {
                Init::Normal => Tensor::randn(&shape, 1.0, &mut rng),
                Init::FanIn => Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            params.insert(name, t);
        }
        let training = TrainingMeta {
            steps: 0,
            final_loss: None,
            seed: config.seed,
        };
        Ok(Self::assemble(config, params, training))
    }

    fn assemble(config: ModelConfig, params: ParamSet, training: TrainingMeta) -> Self {
        let pe = Arc::new(sinusoidal_table(config.max_len + 1, config.d_model));
        let out_mask = Arc::new(output_mask(config.vocab_size));
        Seq2Seq {
            config,
            params,
            training,
            pe,
            out_mask,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn training(&self) -> &TrainingMeta {
        &self.training
    }

    fn ctx<'a>(&'a self, g: &mut Graph) -> Ctx<'a> {
        let p = self.params.bind(g);
        let pe = g.leaf_shared(Arc::clone(&self.pe));
        let out_mask = g.leaf_shared(Arc::clone(&self.out_mask));
        Ctx {
            cfg: &self.config,
            p,
            pe,
            out_mask,
        }
    }

    fn check_tokens(&self, seq: &[Token]) -> Result<(), ModelError> {
        for (index, &token) in seq.iter().enumerate() {
            if token as usize >= self.config.vocab_size {
                return Err(ModelError::OutOfVocab {
                    index,
                    token,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Source with trailing PADs removed, validated.
    fn prepare_source<'s>(&self, x: &'s [Token]) -> Result<&'s [Token], ModelError> {
        self.check_tokens(x)?;
        let n = x.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        if n == 0 || n > self.config.max_len {
            return Err(ModelError::BadLength {
                len: n,
                max: self.config.max_len,
            });
        }
        Ok(&x[..n])
    }

    /// Encoder states for `x`. Trailing PADs are dropped; interior PADs are
    /// masked out of attention.
    pub fn encode(&self, x: &[Token]) -> Result<EncoderOutput, ModelError> {
        let src = self.prepare_source(x)?;
        let mut g = Graph::new();
        let ctx = self.ctx(&mut g);
        let e = ctx.encoder(&mut g, &[src]);
        Ok(EncoderOutput::new(g.value(e).clone()))
    }

    /// Incremental decoder bound to one encoder output.
    pub fn decoder<'a>(&'a self, enc: &EncoderOutput) -> Result<Decoder<'a>, ModelError> {
        if enc.d_model() != self.config.d_model {
            return Err(ModelError::DimMismatch {
                expected: self.config.d_model,
                got: enc.d_model(),
            });
        }
        let mut g = Graph::new();
        let ctx = self.ctx(&mut g);
        let e = g.leaf(enc.states().clone());
        let cross = ctx
            .cross_kv(&mut g, e)
            .into_iter()
            .map(|(k, v)| (Arc::new(g.value(k).clone()), Arc::new(g.value(v).clone())))
            .collect();
        Ok(Decoder {
            model: self,
            cross,
            src_len: enc.source_len(),
        })
    }

    fn check_decode_len(&self, max_len: usize) -> Result<(), ModelError> {
        if max_len > self.config.max_len {
            return Err(ModelError::BadLength {
                len: max_len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    pub fn decode_greedy(&self, enc: &EncoderOutput, max_len: usize) -> Result<Vec<Token>, ModelError> {
        self.check_decode_len(max_len)?;
        let dec = self.decoder(enc)?;
        Ok(greedy_search(&dec, max_len).tokens)
    }

    pub fn decode_beam(&self, enc: &EncoderOutput, beam: usize, max_len: usize) -> Result<Vec<Token>, ModelError> {
        if beam < 1 {
            return Err(ModelError::InvalidBeam);
        }
        self.check_decode_len(max_len)?;
        let dec = self.decoder(enc)?;
        Ok(beam_search(&dec, beam, max_len)?.tokens)
    }

    /// Mean token cross-entropy over every target token of a batch under
    /// teacher forcing, plus the parameter handles.
    fn batch_loss(&self, g: &mut Graph, pairs: &[(&[Token], &[Token])]) -> (Var, Vec<Var>) {
        let ctx = self.ctx(g);
        let srcs: Vec<&[Token]> = pairs.iter().map(|p| p.0).collect();
        let src_lens: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
        let e = ctx.encoder(g, &srcs);
        let cross = ctx.cross_kv(g, e);
        let inputs: Vec<Vec<Token>> = pairs
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.1.iter().copied()).collect())
            .collect();
        let inputs: Vec<&[Token]> = inputs.iter().map(Vec::as_slice).collect();
        let targets: Vec<usize> = pairs
            .iter()
            .flat_map(|p| p.1.iter().chain(std::iter::once(&EOS)).map(|&t| t as usize))
            .collect();
        let logits = ctx.decoder(g, &inputs, &src_lens, &cross);
        let loss = g.cross_entropy(logits, &targets);
        (loss, ctx.p.vars().to_vec())
    }

    /// Mean token cross-entropy of `tgt` given `src` under teacher forcing.
    pub fn loss(&self, src: &[Token], tgt: &[Token]) -> Result<f64, ModelError> {
        let pair = validate_pair(self, src, tgt)?;
        let mut g = Graph::new();
        let (l, _) = self.batch_loss(&mut g, &[pair]);
        Ok(g.value(l).item())
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: CHECKPOINT_KIND.into(),
            format_version: CHECKPOINT_VERSION,
            meta: serde_json::json!({
                "config": self.config,
                "training": self.training,
            }),
            tensors: self.params.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<Self, ModelError> {
        c.expect(CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
        let config: ModelConfig = serde_json::from_value(c.meta["config"].clone()).map_err(CheckpointError::from)?;
        let training: TrainingMeta =
            serde_json::from_value(c.meta["training"].clone()).map_err(CheckpointError::from)?;
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != c.tensors.len() {
            return Err(CheckpointError::Malformed(format!(
                "expected {} tensors, found {}",
                specs.len(),
                c.tensors.len()
            ))
            .into());
        }
        for ((name, shape, _), (found, t)) in specs.iter().zip(c.tensors.iter()) {
            if name != found {
                return Err(CheckpointError::MissingTensor(name.clone()).into());
            }
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ))
                .into());
            }
        }
        Ok(Self::assemble(config, c.tensors, training))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_container(Container::load(path)?)
    }
}

/// Step model over a fixed encoder output. Cross-attention keys and values
/// are computed once.
pub struct Decoder<'a> {
    model: &'a Seq2Seq,
    cross: Vec<(Arc<Tensor>, Arc<Tensor>)>,
    src_len: usize,
}

impl StepModel for Decoder<'_> {
    fn next_log_probs(&self, prefix: &[Token]) -> Vec<f64> {
        let mut g = Graph::new();
        let ctx = self.model.ctx(&mut g);
        let cross: Vec<(Var, Var)> = self
            .cross
            .iter()
            .map(|(k, v)| (g.leaf_shared(Arc::clone(k)), g.leaf_shared(Arc::clone(v))))
            .collect();
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(prefix);
        let logits = ctx.decoder(&mut g, &[&ids], &[self.src_len], &cross);
        let lv = g.value(logits);
        log_softmax(lv.row(lv.rows() - 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stops after this many optimiser steps when set.
    pub max_steps: Option<u64>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 50,
            clip_norm: 1.0,
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean token cross-entropy of every optimiser step's batch.
    pub loss_curve: Vec<f64>,
    pub steps: u64,
}

fn validate_pair<'p>(
    model: &Seq2Seq,
    src: &'p [Token],
    tgt: &'p [Token],
) -> Result<(&'p [Token], &'p [Token]), ModelError> {
    let src = model.prepare_source(src)?;
    model.check_tokens(tgt)?;
    if tgt.len() > model.config.max_len {
        return Err(ModelError::BadLength {
            len: tgt.len(),
            max: model.config.max_len,
        });
    }
    Ok((src, tgt))
}

/// Teacher-forced training with Adam, linear warmup and global-norm
/// clipping. Fully determined by `config.seed` and `opts.seed`.
pub fn train_seq2seq(
    pairs: &[(Vec<Token>, Vec<Token>)],
    config: ModelConfig,
    opts: &TrainOpts,
) -> Result<(Seq2Seq, TrainReport), ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if opts.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch_size must be positive".into()));
    }
    let mut model = Seq2Seq::init(config)?;
    for (s, t) in pairs {
        validate_pair(&model, s, t)?;
    }
    let mut opt = Adam::new(&model.params, opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0u64;
    'outer: for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let batch: Vec<(&[Token], &[Token])> = batch
                .iter()
                .map(|&i| validate_pair(&model, &pairs[i].0, &pairs[i].1))
                .collect::<Result<_, _>>()?;
            let mut g = Graph::new();
            let (loss, vars) = model.batch_loss(&mut g, &batch);
            let batch_loss = g.value(loss).item();
            if !batch_loss.is_finite() {
                return Err(ModelError::Diverged { step });
            }
            let mut grads = g.grad(loss, &vars).expect("scalar loss").into_vec();
            clip_global_norm(&mut grads, opts.clip_norm);
            let warm = if opts.warmup_steps == 0 {
                1.0
            } else {
                ((step + 1) as f64 / opts.warmup_steps as f64).min(1.0)
            };
            opt.step_with_lr(&mut model.params, &grads, opts.lr * warm);
            curve.push(batch_loss);
            step += 1;
        }
    }
    model.training = TrainingMeta {
        steps: step,
        final_loss: curve.last().copied(),
        seed: opts.seed,
    };
    Ok((
        model,
        TrainReport {
            loss_curve: curve,
            steps: step,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 16,
            d_ffn: 32,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            max_len: 10,
            seed: 0,
        }
    }

    fn random_seq(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<Token> {
        (0..len).map(|_| rng.random_range(3..vocab as Token)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::small(20, 12, 0).validate().is_ok());
        assert!(ModelConfig::large(20, 12, 0).validate().is_ok());
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.max_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_is_deterministic_and_norms_match() {
        let m = Seq2Seq::init(ModelConfig::small(20, 12, 0)).unwrap();
        let x = [5, 9, 3, 17, 4, 4, 11];
        let a = m.encode(&x).unwrap();
        let b = m.encode(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source_len(), 7);
        for i in 0..7 {
            let n = a.states().row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - a.norm_per_position()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_encoding() {
        let m = Seq2Seq::init(tiny()).unwrap();
        let e = m.encode(&[7]).unwrap();
        assert_eq!(e.source_len(), 1);
        assert!(e.states().all_finite());
    }

    #[test]
    fn pad_tail_never_changes_states() {
        let m = Seq2Seq::init(tiny()).unwrap();
        let base = m.encode(&[5, 6, 7]).unwrap();
        for pads in 1..=4 {
            let mut x = vec![5, 6, 7];
            x.extend(std::iter::repeat(PAD).take(pads));
            assert_eq!(m.encode(&x).unwrap(), base);
        }
        // An interior PAD is masked: changing the tokens after it still
        // changes the states, but the PAD itself contributes no key.
        let with_pad = m.encode(&[5, PAD, 7]).unwrap();
        assert_eq!(with_pad.source_len(), 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Seq2Seq::init(tiny()).unwrap();
        match m.encode(&[3, 4, 99]) {
            Err(ModelError::OutOfVocab { index, token, .. }) => assert_eq!((index, token), (2, 99)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(m.encode(&[]), Err(ModelError::BadLength { .. })));
        assert!(matches!(m.encode(&[5; 11]), Err(ModelError::BadLength { .. })));
        let e = m.encode(&[5]).unwrap();
        assert!(matches!(m.decode_beam(&e, 0, 5), Err(ModelError::InvalidBeam)));
        let wrong = EncoderOutput::new(Tensor::zeros(&[2, 8]));
        assert!(matches!(
            m.decode_greedy(&wrong, 5),
            Err(ModelError::DimMismatch { .. })
        ));
    }

    #[test]
    fn next_token_distribution_sums_to_one() {
        let m = Seq2Seq::init(tiny()).unwrap();
        let e = m.encode(&[4, 8, 9]).unwrap();
        let dec = m.decoder(&e).unwrap();
        for prefix in [vec![], vec![3], vec![3, 5, 11]] {
            let lp = dec.next_log_probs(&prefix);
            let s: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-10);
            assert_eq!(lp[PAD as usize], f64::NEG_INFINITY);
            assert_eq!(lp[BOS as usize], f64::NEG_INFINITY);
        }
    }

    #[test]
    fn greedy_respects_cap_and_is_deterministic() {
        let m = Seq2Seq::init(tiny()).unwrap();
        let e = m.encode(&[4, 8, 9]).unwrap();
        assert!(m.decode_greedy(&e, 1).unwrap().len() <= 1);
        assert_eq!(m.decode_greedy(&e, 8).unwrap(), m.decode_greedy(&e, 8).unwrap());
        assert!(m.decode_greedy(&e, 11).is_err());
    }

    #[test]
    fn beam_one_matches_greedy_on_random_inputs() {
        let m = Seq2Seq::init(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let len = rng.random_range(1..=8);
            let x = random_seq(&mut rng, 12, len);
            let e = m.encode(&x).unwrap();
            assert_eq!(m.decode_beam(&e, 1, 8).unwrap(), m.decode_greedy(&e, 8).unwrap());
        }
    }

    #[test]
    fn beam_four_never_scores_below_beam_one() {
        let m = Seq2Seq::init(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut strictly = 0;
        for _ in 0..100 {
            let len = rng.random_range(1..=8);
            let x = random_seq(&mut rng, 12, len);
            let dec = m.decoder(&m.encode(&x).unwrap()).unwrap();
            let b1 = beam_search(&dec, 1, 6).unwrap();
            let b4 = beam_search(&dec, 4, 6).unwrap();
            assert!(b4.log_prob >= b1.log_prob, "{x:?}: {} < {}", b4.log_prob, b1.log_prob);
            strictly += usize::from(b4.log_prob > b1.log_prob);
        }
        assert!(strictly > 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Seq2Seq::init(tiny()).unwrap();
        let bytes = m.to_bytes();
        let back = Seq2Seq::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        let mut c = Container::from_bytes(&bytes).unwrap();
        c.kind = "nap".into();
        assert!(Seq2Seq::from_container(c).is_err());
    }

    fn copy_pairs(n: usize, seed: u64) -> Vec<(Vec<Token>, Vec<Token>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..=6);
                let s = random_seq(&mut rng, 12, len);
                (s.clone(), s)
            })
            .collect()
    }

    #[test]
    fn zero_steps_equals_init_and_training_is_reproducible() {
        let pairs = copy_pairs(40, 1);
        let opts = TrainOpts {
            epochs: 0,
            ..TrainOpts::default()
        };
        let (m, r) = train_seq2seq(&pairs, tiny(), &opts).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(m.params(), Seq2Seq::init(tiny()).unwrap().params());

        let opts = TrainOpts {
            epochs: 1,
            batch_size: 8,
            ..TrainOpts::default()
        };
        let (a, ra) = train_seq2seq(&pairs, tiny(), &opts).unwrap();
        let (b, rb) = train_seq2seq(&pairs, tiny(), &opts).unwrap();
        assert_eq!(ra.steps, 5);
        assert_eq!(ra, rb);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn rejects_empty_and_invalid_training_data() {
        assert!(matches!(
            train_seq2seq(&[], tiny(), &TrainOpts::default()),
            Err(ModelError::EmptyDataset)
        ));
        let bad = vec![(vec![3, 40], vec![3])];
        assert!(matches!(
            train_seq2seq(&bad, tiny(), &TrainOpts::default()),
            Err(ModelError::OutOfVocab { .. })
        ));
    }

    #[test]
    fn diverging_training_reports_step() {
        let pairs = copy_pairs(16, 2);
        let opts = TrainOpts {
            epochs: 3,
            batch_size: 8,
            lr: f64::INFINITY,
            warmup_steps: 0,
            ..TrainOpts::default()
        };
        match train_seq2seq(&pairs, tiny(), &opts) {
            Err(ModelError::Diverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }
}
