//! Named parameter storage and the Adam optimiser.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered collection of named tensors. Insertion order is preserved and is
/// the order used for serialisation and gradient vectors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a == b)
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| self.tensors[i].as_ref())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(Arc::as_ref))
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    /// Adds every parameter to `graph` as a leaf without copying buffers.
    pub fn bind(&self, graph: &mut Graph) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| graph.leaf_shared(Arc::clone(t))).collect();
        Bound { set: self, vars }
    }
}

/// Graph handles for a bound [`ParamSet`].
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Panics if `name` is not a parameter; names are fixed by the model code.
    pub fn var(&self, name: &str) -> Var {
        match self.set.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Adds `b` into `a` element-wise, tensor by tensor.
pub fn accumulate(a: &mut [Tensor], b: &[Tensor]) {
    for (x, y) in a.iter_mut().zip(b) {
        x.add_assign(y);
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = |p: &ParamSet| p.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` (allows warmup schedules).
    pub fn step_with_lr(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        let lr = self.lr;
        self.step_with_lr(params, grads, lr);
    }
}
