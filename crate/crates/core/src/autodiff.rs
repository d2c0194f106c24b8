//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as it is applied, so node inputs
//! always precede the node itself and the node list is already a topological
//! order. [`Graph::grad`] walks that list backwards once, visiting only the
//! nodes that lie between the requested leaves and the objective.
//!
//! Shape errors while building a graph are programming errors and panic.

use std::sync::Arc;

use crate::error::TensorError;
use crate::tensor::{gemm, Tensor};

/// Layer-normalisation epsilon used throughout the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Sqrt(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Div(a, b, _) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Sqrt(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Softmax { input, .. } | Op::LayerNorm { input, .. } | Op::Slice { input, .. } => {
                vec![*input]
            }
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Gradients returned by [`Graph::grad`], aligned with the `wrt` slice.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
    unreachable: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    /// Leaves the objective does not depend on. Their gradients are zero.
    pub fn unreachable(&self) -> &[Var] {
        &self.unreachable
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits a shape into (outer, axis, inner) extents around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn bcast_kind(a: &Tensor, b: &Tensor) -> Bcast {
    if a.shape() == b.shape() {
        Bcast::Same
    } else if b.numel() == 1 {
        Bcast::Scalar
    } else if b.shape().len() == 1 && b.numel() == a.cols() {
        Bcast::Row
    } else {
        panic!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape())
    }
}

/// Reduces a gradient with the shape of `a` to the shape of the broadcast operand.
fn reduce_bcast(g: &[f64], kind: Bcast, b_shape: &[usize]) -> Tensor {
    match kind {
        Bcast::Same => Tensor::from_parts(b_shape.to_vec(), g.to_vec()),
        Bcast::Scalar => Tensor::from_parts(b_shape.to_vec(), vec![g.iter().sum()]),
        Bcast::Row => {
            let n = b_shape[0];
            let mut out = vec![0.0; n];
            for chunk in g.chunks(n) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            Tensor::from_parts(b_shape.to_vec(), out)
        }
    }
}

#[inline]
fn bval(b: &[f64], kind: Bcast, i: usize) -> f64 {
    match kind {
        Bcast::Same => b[i],
        Bcast::Scalar => b[0],
        Bcast::Row => b[i % b.len()],
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Adds a leaf that shares its buffer with the caller (no copy).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.shape().len() == 2 && bv.shape().len() == 2 && av.shape()[1] == bv.shape()[0],
            "matmul shapes {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape().len(), 2, "transpose needs a matrix");
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let d = av.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Tensor, Bcast) {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast_kind(av, bv);
        let bd = bv.data();
        let out = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bval(bd, kind, i)))
            .collect();
        (Tensor::from_parts(av.shape().to_vec(), out), kind)
    }

    /// `a + b`; `b` may be a scalar or a row vector broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (t, k) = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b, k))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (t, k) = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b, k))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (t, k) = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b, k))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (t, k) = self.binary(a, b, |x, y| x / y);
        self.push(t, Op::Div(a, b, k))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, c))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(t, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let av = self.value(a);
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        self.push(t, Op::Softmax { input: a, axis })
    }

    /// Normalises each vector along the last axis to zero mean and unit
    /// variance. Affine parameters are applied separately with `mul`/`add`.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Vec::with_capacity(av.numel());
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in av.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * inv));
            inv_std.push(inv);
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        self.push(t, Op::LayerNorm { input: a, inv_std })
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.shape().len(), 2, "embedding table must be a matrix");
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let first = self.value(inputs[0]).shape().to_vec();
        let (outer, _, inner) = axis_split(&first, axis);
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            assert!(
                s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat shapes {:?} vs {:?}",
                s,
                first
            );
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (outer, n, inner) = axis_split(av.shape(), axis);
        assert!(len > 0 && start + len <= n, "slice {start}+{len} out of {n}");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { input: a, axis, start })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = (*self.nodes[a.0].value).clone();
        let t = t.reshape(shape.to_vec()).expect("reshape changes element count");
        self.push(t, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean token cross-entropy of `[rows, vocab]` logits against target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let v = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let mut probs = Vec::with_capacity(lv.numel());
        let mut loss = 0.0;
        for (row, &t) in lv.data().chunks(v).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[t];
            probs.extend(row.iter().map(|x| (x - log_z).exp()));
        }
        loss /= targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    /// Scaled dot-product attention, `softmax(q kᵀ / sqrt(d) + mask) v`,
    /// built from primitives. `mask` is added to the score matrix.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>) -> Var {
        let d = self.value(q).cols();
        let kt = self.transpose(k);
        let scores = self.matmul(q, kt);
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let scores = match mask {
            Some(m) => self.add(scores, m),
            None => scores,
        };
        let w = self.softmax(scores, 1);
        self.matmul(w, v)
    }

    /// Reverse-mode gradients of a scalar `objective` with respect to `wrt`.
    ///
    /// Leaves the objective does not depend on receive a zero gradient and
    /// are listed in [`Gradients::unreachable`].
    pub fn grad(&self, objective: Var, wrt: &[Var]) -> Result<Gradients, TensorError> {
        let obj_val = self.value(objective);
        if !obj_val.is_scalar() {
            return Err(TensorError::NonScalarObjective(obj_val.shape().to_vec()));
        }
        let n = objective.0 + 1;
        // Nodes downstream of some requested leaf.
        let mut needs = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                needs[w.0] = true;
            }
        }
        for i in 0..n {
            if !needs[i] && self.nodes[i].op.inputs().iter().any(|v| needs[v.0]) {
                needs[i] = true;
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if needs[objective.0] {
            grads[objective.0] = Some(Tensor::full(obj_val.shape(), 1.0));
        }
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, g, &needs, &mut grads);
        }

        let mut out = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::new();
        for &w in wrt {
            match grads.get(w.0).and_then(|g| g.clone()) {
                Some(g) => out.push(g),
                None => {
                    unreachable.push(w);
                    out.push(Tensor::zeros(self.value(w).shape()));
                }
            }
        }
        Ok(Gradients {
            grads: out,
            unreachable,
        })
    }

    fn backward_node(&self, node: &Node, g: Tensor, needs: &[bool], grads: &mut [Option<Tensor>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let want = |v: Var| needs[v.0];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, 0.0);
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, 0.0);
                    acc(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = gd[i * c + j];
                    }
                }
                acc(*a, Tensor::from_parts(vec![c, r], out));
            }
            Op::Add(a, b, k) | Op::Sub(a, b, k) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if want(*a) {
                    acc(*a, g.clone());
                }
                if want(*b) {
                    let mut r = reduce_bcast(gd, *k, val(*b).shape());
                    if sign < 0.0 {
                        r.data_mut().iter_mut().for_each(|x| *x = -*x);
                    }
                    acc(*b, r);
                }
            }
            Op::Mul(a, b, k) => {
                let (av, bv) = (val(*a), val(*b));
                if want(*a) {
                    let d = gd.iter().enumerate().map(|(i, x)| x * bval(bv.data(), *k, i)).collect();
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), d));
                }
                if want(*b) {
                    let prod: Vec<f64> = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    acc(*b, reduce_bcast(&prod, *k, bv.shape()));
                }
            }
            Op::Div(a, b, k) => {
                let (av, bv) = (val(*a), val(*b));
                if want(*a) {
                    let d = gd.iter().enumerate().map(|(i, x)| x / bval(bv.data(), *k, i)).collect();
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), d));
                }
                if want(*b) {
                    let prod: Vec<f64> = gd
                        .iter()
                        .zip(av.data())
                        .enumerate()
                        .map(|(i, (x, y))| {
                            let bb = bval(bv.data(), *k, i);
                            -x * y / (bb * bb)
                        })
                        .collect();
                    acc(*b, reduce_bcast(&prod, *k, bv.shape()));
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|x| x * c).collect();
                acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                let d = gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect();
                acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(g.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let s: f64 = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - s);
                        }
                    }
                }
                acc(*input, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::LayerNorm { input, inv_std } => {
                let y = node.value.data();
                let c = g.cols();
                let mut dx = Vec::with_capacity(y.len());
                for ((gr, yr), inv) in gd.chunks(c).zip(y.chunks(c)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    dx.extend(gr.iter().zip(yr).map(|(gi, yi)| inv * (gi - mg - yi * mgy)));
                }
                acc(*input, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, x) in dt.row_mut(id).iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += x;
                    }
                }
                acc(*table, dt);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let shape = val(v).shape().to_vec();
                    let n = shape[*axis];
                    if want(v) {
                        let mut part = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        acc(v, Tensor::from_parts(shape, part));
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = val(*input).shape().to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*input, Tensor::from_parts(shape, dx));
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                acc(*a, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Sum(a) => {
                acc(*a, Tensor::full(val(*a).shape(), gd[0]));
            }
            Op::Mean(a) => {
                let v = val(*a);
                acc(*a, Tensor::full(v.shape(), gd[0] / v.numel() as f64));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let shape = val(*logits).shape().to_vec();
                let v = shape[1];
                let scale = gd[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= scale;
                }
                acc(*logits, Tensor::from_parts(shape, d));
            }
        }
    }
}

/// Compares the analytic gradient of `f` at `point` with central finite
/// differences and returns the largest relative error over coordinates.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let eval = |p: Tensor| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(p);
        let y = f(&mut g, x);
        g.value(y).item()
    };

    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x);
    if !g.value(y).item().is_finite() {
        return Err(TensorError::NonFinite { coordinate: usize::MAX });
    }
    let analytic = g.grad(y, &[x])?.into_vec().remove(0);

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(plus), eval(minus));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite { coordinate: i });
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = g.sum(x);
        let gr = g.grad(s, &[x]).unwrap();
        assert_eq!(gr.get(0).data(), &[1.0, 1.0, 1.0]);
        assert!(gr.unreachable().is_empty());
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![2.0]));
        let y = g.mul(x, x);
        let gr = g.grad(y, &[x]).unwrap();
        assert_eq!(gr.get(0).data(), &[4.0]);
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.grad(y, &[x]), Err(TensorError::NonScalarObjective(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_and_flag() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let z = g.leaf(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let s = g.sum(x);
        let gr = g.grad(s, &[x, z]).unwrap();
        assert_eq!(gr.get(1).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(gr.unreachable(), &[z]);
    }

    #[test]
    fn repeated_grad_calls_are_identical() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng(1)));
        let w = g.leaf(Tensor::randn(&[4, 2], 1.0, &mut rng(2)));
        let y = g.matmul(x, w);
        let y = g.tanh(y);
        let s = g.sum(y);
        let a = g.grad(s, &[x, w]).unwrap().into_vec();
        let b = g.grad(s, &[x, w]).unwrap().into_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn fd_sum_of_squares() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = finite_difference_check(
            |g, x| {
                let sq = g.mul(x, x);
                g.sum(sq)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_constant_is_exact_zero() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = finite_difference_check(|g, _| g.leaf(Tensor::scalar(0.0)), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_softmax_pick_first() {
        let p = Tensor::randn(&[4], 1.0, &mut rng(3));
        let err = finite_difference_check(
            |g, x| {
                let s = g.softmax(x, 0);
                g.slice(s, 0, 0, 1)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_reports_non_finite_coordinate() {
        // sqrt is undefined just below zero at coordinate 1.
        let p = Tensor::vector(vec![1.0, 0.0]);
        let err = finite_difference_check(
            |g, x| {
                let r = g.sqrt(x);
                g.sum(r)
            },
            &p,
            1e-5,
        );
        assert_eq!(err, Err(TensorError::NonFinite { coordinate: 1 }));
    }

    #[test]
    fn fd_two_layer_mlp() {
        let mut r = rng(11);
        let w1 = Tensor::randn(&[8, 16], 0.4, &mut r);
        let b1 = Tensor::randn(&[16], 0.1, &mut r);
        let w2 = Tensor::randn(&[16, 1], 0.4, &mut r);
        let x = Tensor::randn(&[1, 8], 1.0, &mut r);
        let err = finite_difference_check(
            |g, x| {
                let (w1, b1, w2) = (g.leaf(w1.clone()), g.leaf(b1.clone()), g.leaf(w2.clone()));
                let h = g.linear(x, w1, b1);
                let h = g.tanh(h);
                let o = g.matmul(h, w2);
                g.sum(o)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// Jacobian-vector check for each primitive: project the output on a
    /// random direction so the objective is a scalar.
    fn check_primitive(build: impl Fn(&mut Graph, Var) -> Var, shape: &[usize], seed: u64) {
        let mut r = rng(seed);
        let p = Tensor::randn(shape, 1.0, &mut r);
        let mut g = Graph::new();
        let x = g.leaf(p.clone());
        let out_shape = {
            let y = build(&mut g, x);
            g.value(y).shape().to_vec()
        };
        let proj = Tensor::randn(&out_shape, 1.0, &mut r);
        let err = finite_difference_check(
            |g, x| {
                let y = build(g, x);
                let c = g.leaf(proj.clone());
                let m = g.mul(y, c);
                g.sum(m)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "primitive failed FD check: {err}");
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut r = rng(5);
        let w = Tensor::randn(&[4, 3], 1.0, &mut r);
        let row = Tensor::randn(&[4], 1.0, &mut r);
        let full = Tensor::randn(&[3, 4], 1.0, &mut r);
        let pos = Tensor::full(&[3, 4], 3.0);
        let table = Tensor::randn(&[5, 4], 1.0, &mut r);
        check_primitive(
            |g, x| {
                let w = g.leaf(w.clone());
                g.matmul(x, w)
            },
            &[3, 4],
            1,
        );
        check_primitive(
            |g, x| {
                let w = g.leaf(w.clone());
                let t = g.transpose(w);
                g.matmul(t, x)
            },
            &[4, 2],
            2,
        );
        check_primitive(|g, x| g.transpose(x), &[3, 4], 3);
        check_primitive(
            |g, x| {
                let b = g.leaf(row.clone());
                g.add(x, b)
            },
            &[3, 4],
            4,
        );
        check_primitive(
            |g, x| {
                let b = g.leaf(full.clone());
                g.sub(b, x)
            },
            &[3, 4],
            5,
        );
        check_primitive(
            |g, x| {
                let b = g.leaf(row.clone());
                g.mul(x, b)
            },
            &[3, 4],
            6,
        );
        check_primitive(|g, x| g.mul(x, x), &[3, 4], 26);
        check_primitive(
            |g, x| {
                let b = g.leaf(pos.clone());
                let d = g.add(x, b);
                g.div(x, d)
            },
            &[3, 4],
            7,
        );
        check_primitive(
            |g, x| {
                let b = g.leaf(pos.clone());
                let s = g.sum(x);
                let d = g.add(b, s);
                g.div(b, d)
            },
            &[3, 4],
            8,
        );
        check_primitive(|g, x| g.scale(x, -2.5), &[3, 4], 9);
        check_primitive(|g, x| g.tanh(x), &[3, 4], 10);
        check_primitive(|g, x| g.gelu(x), &[3, 4], 11);
        check_primitive(|g, x| g.relu(x), &[3, 4], 12);
        check_primitive(
            |g, x| {
                let b = g.leaf(pos.clone());
                let y = g.add(x, b);
                g.sqrt(y)
            },
            &[3, 4],
            13,
        );
        check_primitive(|g, x| g.softmax(x, 0), &[3, 4], 14);
        check_primitive(|g, x| g.softmax(x, 1), &[3, 4], 15);
        check_primitive(|g, x| g.layer_norm(x), &[3, 4], 16);
        check_primitive(|g, t| g.embedding(t, &[0, 3, 3, 4]), &[5, 4], 17);
        check_primitive(
            |g, x| {
                let y = g.tanh(x);
                g.concat(&[x, y, x], 1)
            },
            &[3, 2],
            18,
        );
        check_primitive(
            |g, x| {
                let y = g.tanh(x);
                g.concat(&[y, x], 0)
            },
            &[3, 2],
            19,
        );
        check_primitive(|g, x| g.slice(x, 1, 1, 2), &[3, 4], 20);
        check_primitive(|g, x| g.slice(x, 0, 1, 2), &[3, 4], 21);
        check_primitive(|g, x| g.reshape(x, &[12]), &[3, 4], 22);
        check_primitive(|g, x| g.mean(x), &[3, 4], 23);
        check_primitive(|g, x| g.cross_entropy(x, &[1, 0, 3]), &[3, 4], 24);
        check_primitive(
            |g, x| {
                let k = g.leaf(table.clone());
                let m = g.leaf(Tensor::zeros(&[3, 5]));
                g.attention(x, k, k, Some(m))
            },
            &[3, 4],
            25,
        );
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[5, 7], 10.0, &mut rng(8)));
        for axis in 0..2 {
            let s = g.softmax(x, axis);
            let v = g.value(s);
            let (outer, n, inner) = axis_split(v.shape(), axis);
            for o in 0..outer {
                for i in 0..inner {
                    let tot: f64 = (0..n).map(|j| v.data()[(o * n + j) * inner + i]).sum();
                    assert!((tot - 1.0).abs() < 1e-12);
                }
            }
            assert!(v.data().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut g = Graph::new();
        for std in [0.5, 3.0, 200.0] {
            let x = g.leaf(Tensor::randn(&[6, 32], std, &mut rng(9)));
            let y = g.layer_norm(x);
            for (xr, row) in g.value(x).data().chunks(32).zip(g.value(y).data().chunks(32)) {
                let moments = |r: &[f64]| {
                    let m = r.iter().sum::<f64>() / 32.0;
                    (m, r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 32.0)
                };
                let (_, in_var) = moments(xr);
                let (mean, var) = moments(row);
                assert!(mean.abs() < 1e-10);
                // The epsilon shrinks the variance to v / (v + eps).
                assert!((var - in_var / (in_var + LAYER_NORM_EPS)).abs() < 1e-12);
                if std >= 200.0 {
                    assert!((var - 1.0).abs() < 1e-8, "{var}");
                }
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_objective() {
        let mut r = rng(10);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[2, 3], 1.0, &mut r));
        let t = g.tanh(x);
        let a = g.sum(t);
        let sq = g.mul(x, x);
        let b = g.mean(sq);
        let ab = g.add(a, b);
        let ga = g.grad(a, &[x]).unwrap().into_vec().remove(0);
        let gb = g.grad(b, &[x]).unwrap().into_vec().remove(0);
        let gab = g.grad(ab, &[x]).unwrap().into_vec().remove(0);
        for i in 0..6 {
            assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-14);
        }
    }
}
