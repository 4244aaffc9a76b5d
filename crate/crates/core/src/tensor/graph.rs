//! Reverse-mode differentiation over a linear tape of recorded operators.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only. Parameters enter the tape
//! as leaves; train-mode batch norms record their batch statistics so the
//! caller can fold them into the running statistics after the step.

use std::collections::{BTreeMap, HashMap};

use super::ops::{self, Activation, BatchNormSaved, BinaryKind, ConvSpec};
use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Batch statistics from one train-mode batch norm, to be folded into the
/// running statistics named by `prefix`.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T: Element> {
    pub prefix: String,
    pub mean: Vec<T>,
    /// Unbiased batch variance (biased when only one element per channel).
    pub var: Vec<T>,
}

/// Vector-Jacobian product of a custom operator: upstream gradient in,
/// one optional gradient per input out.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

enum Op<T: Element> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Tensor<T>,
        inv_std: Vec<T>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Concat {
        xs: Vec<Var>,
    },
    Resize {
        x: Var,
    },
    Gap {
        x: Var,
    },
    Fc {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sum {
        x: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Multiply-accumulate totals per named scope.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    by_scope: BTreeMap<String, u64>,
}

impl MacCounter {
    pub fn add(&mut self, scope: &str, macs: u64) {
        *self.by_scope.entry(scope.to_string()).or_default() += macs;
    }

    pub fn scope(&self, scope: &str) -> u64 {
        self.by_scope.get(scope).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.by_scope.values().sum()
    }

    pub fn scopes(&self) -> impl Iterator<Item = (&str, u64)> {
        self.by_scope.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to any recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every trainable parameter in the store; parameters the
    /// loss does not depend on get zeros.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

pub struct Graph<'s, T: Element> {
    store: &'s ParamStore<T>,
    mode: Mode,
    bn: BnConfig,
    shape_only: bool,
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    running: Vec<RunningUpdate<T>>,
    macs: MacCounter,
    scope: String,
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}

impl<'s, T: Element> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            bn: BnConfig::default(),
            shape_only: false,
            nodes: Vec::new(),
            params: HashMap::new(),
            running: Vec::new(),
            macs: MacCounter::default(),
            scope: String::new(),
        }
    }

    /// A graph that propagates shapes and counts multiply-accumulates
    /// without evaluating any kernel. Values are zero-filled placeholders.
    pub fn shape_only(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Graph {
            shape_only: true,
            ..Graph::new(store, mode)
        }
    }

    pub fn with_bn_config(mut self, bn: BnConfig) -> Self {
        self.bn = bn;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Sets the scope that subsequent MAC counts are attributed to and
    /// returns the previous one.
    pub fn set_scope(&mut self, scope: &str) -> String {
        std::mem::replace(&mut self.scope, scope.to_string())
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    pub fn running_updates(&self) -> &[RunningUpdate<T>] {
        &self.running
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn count(&mut self, macs: u64) {
        let scope = self.scope.clone();
        self.macs.add(&scope, macs);
    }

    /// A constant input that receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that does receive a gradient (not tied to the store).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The store parameter `name` as a leaf. Repeated lookups share a node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = self.push(p.value.clone(), Op::Leaf, p.kind.trainable());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        let out = ops::conv_output_shape(xs, &spec);
        let macs = (out.n * out.c * (spec.in_channels / spec.groups) * spec.kernel * spec.kernel * out.plane()) as u64;
        self.count(macs);
        let value = if self.shape_only {
            spec.validate()?;
            if xs.c != spec.in_channels {
                return Err(Error::dim("conv2d", crate::error::Axis::Channel, spec.in_channels, xs.c));
            }
            Tensor::zeros(out)
        } else {
            ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv { x, w, b, spec }, rg))
    }

    /// Batch norm whose affine and running parameters live at
    /// `{prefix}.weight`, `{prefix}.bias`, `{prefix}.running_mean` and
    /// `{prefix}.running_var`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let xs = self.shape(x);
        self.count(xs.numel() as u64);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        if self.shape_only {
            if self.value(gamma).len() != xs.c {
                return Err(Error::dim("batch_norm", crate::error::Axis::Channel, self.value(gamma).len(), xs.c));
            }
            return Ok(self.push(Tensor::zeros(xs), Op::Leaf, false));
        }
        match self.mode {
            Mode::Train => {
                let (y, saved) =
                    ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), self.bn.eps)?;
                let var = if saved.count > 1 {
                    let corr = T::of(saved.count as f64 / (saved.count - 1) as f64);
                    saved.var.iter().map(|&v| v * corr).collect()
                } else {
                    saved.var.clone()
                };
                self.running.push(RunningUpdate {
                    prefix: prefix.to_string(),
                    mean: saved.mean.clone(),
                    var,
                });
                Ok(self.push(y, Op::BatchNormTrain { x, gamma, beta, saved }, rg))
            }
            Mode::Eval => {
                let rm = self.running_stat(&format!("{prefix}.running_mean"))?;
                let rv = self.running_stat(&format!("{prefix}.running_var"))?;
                let (y, inv_std) = ops::batch_norm_eval(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &rm,
                    &rv,
                    self.bn.eps,
                )?;
                Ok(self.push(
                    y,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        running_mean: rm,
                        inv_std,
                    },
                    rg,
                ))
            }
        }
    }

    fn running_stat(&self, name: &str) -> Result<Tensor<T>> {
        self.store
            .get(name)
            .map(|p| p.value.clone())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let xs = self.shape(x);
        self.count(xs.numel() as u64);
        let value = if self.shape_only {
            Tensor::zeros(xs)
        } else {
            ops::activation(self.value(x), kind)
        };
        let rg = self.rg(x);
        self.push(value, Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let s = self.shape(a);
        self.count(s.numel() as u64);
        let value = if self.shape_only {
            // Validates shapes without computing.
            let bs = self.shape(b);
            if bs != s && !(bs.h == 1 && bs.w == 1 && bs.n == s.n && bs.c == s.c) {
                return Err(Error::shape("elementwise_binary", format!("{s} vs {bs}")));
            }
            Tensor::zeros(s)
        } else {
            ops::elementwise_binary(self.value(a), self.value(b), kind)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { a, b, kind }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let value = {
            let tensors: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
            if self.shape_only {
                let first = tensors
                    .first()
                    .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?
                    .shape();
                let c = tensors.iter().map(|t| t.shape().c).sum();
                Tensor::zeros(Shape::new(first.n, c, first.h, first.w))
            } else {
                ops::concat_channels(&tensors)?
            }
        };
        self.count(value.len() as u64);
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x);
        let out = Shape::new(xs.n, xs.c, h, w);
        if out != xs {
            self.count(out.numel() as u64);
        }
        let value = if self.shape_only {
            if h == 0 || w == 0 {
                return Err(Error::shape("bilinear_resize", "target extents must be at least 1"));
            }
            Tensor::zeros(out)
        } else {
            ops::bilinear_resize(self.value(x), h, w)?
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Resize { x }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        self.count(xs.numel() as u64);
        let value = if self.shape_only {
            Tensor::zeros(Shape::new(xs.n, xs.c, 1, 1))
        } else {
            ops::global_avg_pool(self.value(x))
        };
        let rg = self.rg(x);
        self.push(value, Op::Gap { x }, rg)
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        self.count((xs.n * ws.n * ws.c) as u64);
        let value = if self.shape_only {
            if ws.c != xs.c {
                return Err(Error::dim("fully_connected", crate::error::Axis::Channel, ws.c, xs.c));
            }
            Tensor::zeros(Shape::new(xs.n, ws.n, 1, 1))
        } else {
            ops::fully_connected(self.value(x), self.value(w), b.map(|b| self.value(b)))?
        };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Fc { x, w, b }, rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum { x }, rg)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::of(scale), T::of(shift));
        let value = self.value(x).map(|v| s * v + b);
        let rg = self.rg(x);
        self.push(value, Op::Affine { x, scale: s }, rg)
    }

    /// Records an operator whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        self.count(value.len() as u64);
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Propagates d(loss)/d(value) from the scalar `loss` to every recorded
    /// value that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape_only {
            return Err(Error::State("cannot differentiate a shape-only graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before the loss was recorded".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let send = |v: Var, g: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], g);
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv { x, w, b, spec } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), &dy, spec, self.rg(*x));
                    if let Some(dx) = dx {
                        send(*x, dx, &mut grads);
                    }
                    send(*w, dw, &mut grads);
                    if let (Some(b), Some(db)) = (b, db) {
                        send(*b, db, &mut grads);
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, saved } => {
                    let (dx, dg, db) = ops::batch_norm_train_backward(&dy, self.value(*gamma), saved);
                    send(*x, dx, &mut grads);
                    send(*gamma, dg, &mut grads);
                    send(*beta, db, &mut grads);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    running_mean,
                    inv_std,
                } => {
                    let (dx, dg, db) = ops::batch_norm_eval_backward(
                        self.value(*x),
                        &dy,
                        self.value(*gamma),
                        running_mean,
                        inv_std,
                    );
                    send(*x, dx, &mut grads);
                    send(*gamma, dg, &mut grads);
                    send(*beta, db, &mut grads);
                }
                Op::Act { x, kind } => {
                    let dx = ops::activation_backward(self.value(*x), &node.value, &dy, *kind);
                    send(*x, dx, &mut grads);
                }
                Op::Binary { a, b, kind } => {
                    let (da, db) = ops::elementwise_binary_backward(self.value(*a), self.value(*b), &dy, *kind);
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Concat { xs } => {
                    let channels: Vec<usize> = xs.iter().map(|&v| self.shape(v).c).collect();
                    for (v, g) in xs.iter().zip(ops::concat_channels_backward(&dy, &channels)) {
                        send(*v, g, &mut grads);
                    }
                }
                Op::Resize { x } => {
                    let dx = ops::bilinear_resize_backward(&dy, self.shape(*x));
                    send(*x, dx, &mut grads);
                }
                Op::Gap { x } => {
                    let dx = ops::global_avg_pool_backward(&dy, self.shape(*x));
                    send(*x, dx, &mut grads);
                }
                Op::Fc { x, w, b } => {
                    let (dx, dw, db) = ops::fully_connected_backward(self.value(*x), self.value(*w), &dy);
                    send(*x, dx, &mut grads);
                    send(*w, dw, &mut grads);
                    if let Some(b) = b {
                        send(*b, db, &mut grads);
                    }
                }
                Op::Sum { x } => {
                    let g = dy.data()[0];
                    send(*x, Tensor::full(self.shape(*x), g), &mut grads);
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    send(*x, dy.map(|g| g * s), &mut grads);
                }
                Op::Custom { inputs, backward } => {
                    for (v, g) in inputs.iter().zip(backward(&dy)) {
                        if let Some(g) = g {
                            send(*v, g, &mut grads);
                        }
                    }
                }
            }
        }

        let mut params = BTreeMap::new();
        for (name, p) in self.store.iter() {
            if !p.kind.trainable() {
                continue;
            }
            let g = self
                .params
                .get(name)
                .and_then(|v| grads[v.0].clone())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            params.insert(name.to_string(), g);
        }
        Ok(Gradients { nodes: grads, params })
    }
}
