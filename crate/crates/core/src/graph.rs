//! Reverse-mode differentiation over the kernel set.
//!
//! A [`Graph`] records every kernel application in order. Values produced by
//! kernels are owned by the graph; parameters are read from the borrowed
//! [`ParamStore`] and their gradients are accumulated back into it by
//! [`Graph::backward`].

use crate::error::{Error, Result};
use crate::kernels::{self, BnCache, ConvGeometry, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::training::am_softmax::{self, AmSoftmaxCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Parameter ids of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    BnInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        ids: BnIds,
        eps: f64,
    },
    Relu(Var),
    Tanh(Var),
    Upsample(Var),
    Concat(Var, Var),
    StatsPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarAdd(Var),
    ScalarSub(Var),
    Sum(Var),
    AmSoftmax {
        emb: Var,
        w: Var,
        cache: Box<AmSoftmaxCache>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    /// False for nodes that depend on no parameter; backward skips them.
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s, T: Scalar> {
    store: &'s mut ParamStore<T>,
    mode: Mode,
    bn_eps: f64,
    bn_momentum: f64,
    nodes: Vec<Node<T>>,
    param_vars: std::collections::HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            bn_eps: kernels::BN_EPS,
            bn_momentum: kernels::BN_MOMENTUM,
            nodes: Vec::new(),
            param_vars: Default::default(),
            grads: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            Op::BnTrain { x, gamma, beta, .. } | Op::BnInfer { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x) | Op::Tanh(x) | Op::Upsample(x) | Op::StatsPool(x) | Op::ScalarAdd(x) | Op::ScalarSub(x) | Op::Sum(x) => {
                vec![*x]
            }
            Op::Concat(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AmSoftmax { emb, w, .. } => vec![*emb, *w],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to `v`.
    /// `None` for values that do not depend on any parameter (plain inputs and
    /// everything computed only from them): backward never visits those.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, geom: ConvGeometry) -> Result<Var> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let y = kernels::conv2d(self.value(x), self.value(wv), bv.map(|b| self.value(b)), geom)?;
        Ok(self.push(y, Op::Conv { x, w: wv, b: bv, geom }))
    }

    /// Batch normalisation in the graph's mode. Train mode updates the running statistics.
    pub fn batch_norm(&mut self, x: Var, ids: &BnIds) -> Result<Var> {
        let gamma = self.param(ids.gamma);
        let beta = self.param(ids.beta);
        match self.mode {
            Mode::Train => {
                let (y, cache) = kernels::batchnorm_train(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    self.bn_eps,
                )?;
                let (mean, var) = (ids.running_mean, ids.running_var);
                let mut rm = std::mem::replace(self.store.value_mut(mean), Tensor::scalar(T::zero()));
                let mut rv = std::mem::replace(self.store.value_mut(var), Tensor::scalar(T::zero()));
                kernels::update_running_stats(&mut rm, &mut rv, &cache, self.bn_momentum);
                *self.store.value_mut(mean) = rm;
                *self.store.value_mut(var) = rv;
                Ok(self.push(y, Op::BnTrain { x, gamma, beta, cache }))
            }
            Mode::Infer => {
                let y = kernels::batchnorm_infer(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    self.store.value(ids.running_mean),
                    self.store.value(ids.running_var),
                    self.bn_eps,
                )?;
                let eps = self.bn_eps;
                Ok(self.push(y, Op::BnInfer { x, gamma, beta, ids: *ids, eps }))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = kernels::tanh(self.value(x));
        self.push(y, Op::Tanh(x))
    }

    pub fn upsample_freq(&mut self, x: Var) -> Var {
        let y = kernels::upsample_bilinear_freq(self.value(x));
        self.push(y, Op::Upsample(x))
    }

    pub fn concat_channels(&mut self, x: Var, y: Var) -> Result<Var> {
        let z = kernels::concat_channels(self.value(x), self.value(y))?;
        Ok(self.push(z, Op::Concat(x, y)))
    }

    pub fn stats_pool(&mut self, x: Var) -> Var {
        let y = kernels::stats_pool(self.value(x));
        self.push(y, Op::StatsPool(x))
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let y = kernels::linear(self.value(x), self.value(wv), bv.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Linear { x, w: wv, b: bv }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::ew_add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::ew_sub(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::ew_mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    /// `s ⊕ x`.
    pub fn scalar_add(&mut self, s: T, x: Var) -> Var {
        let y = kernels::scalar_add(s, self.value(x));
        self.push(y, Op::ScalarAdd(x))
    }

    /// `s ⊖ x`.
    pub fn scalar_sub(&mut self, s: T, x: Var) -> Var {
        let y = kernels::scalar_sub(s, self.value(x));
        self.push(y, Op::ScalarSub(x))
    }

    /// Sum of all elements, as a (1,1,1,1) tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    /// Mean AM-softmax loss of an embedding batch against class weights (D × K).
    ///
    /// Returns the loss var and the batch accuracy.
    pub fn am_softmax(&mut self, emb: Var, w: ParamId, labels: &[usize], margin: f64, scale: f64) -> Result<(Var, f64)> {
        let wv = self.param(w);
        let out = am_softmax::forward(self.value(emb), self.value(wv), labels, margin, scale)?;
        let loss = Tensor::scalar(T::from_f64(out.loss));
        let acc = out.accuracy;
        Ok((
            self.push(
                loss,
                Op::AmSoftmax {
                    emb,
                    w: wv,
                    cache: Box::new(out.cache),
                },
            ),
            acc,
        ))
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != Shape::scalar() {
            return Err(Error::shape(format!(
                "backward root must be scalar, got {}",
                self.shape(root)
            )));
        }
        self.backward_with(root, Tensor::scalar(T::one()))
    }

    /// Back-propagates an explicit upstream gradient from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.shape(root) {
            return Err(Error::shape("backward seed shape mismatch"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                self.store.grad_mut(id).add_assign(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let want_x = self.nodes[x.0].needs_grad;
                let r = kernels::conv2d_backward_opt(self.value(*x), self.value(*w), b.is_some(), *geom, g, want_x)?;
                Self::accumulate(grads, *x, r.grad_x);
                Self::accumulate(grads, *w, r.grad_weight);
                if let (Some(b), Some(gb)) = (b, r.grad_bias) {
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::BnTrain { x, gamma, beta, cache } => {
                let (dx, dg, db) = kernels::batchnorm_train_backward(g, cache, self.value(*gamma))?;
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gamma, dg);
                Self::accumulate(grads, *beta, db);
            }
            Op::BnInfer { x, gamma, beta, ids, eps } => {
                let (dx, dg, db) = kernels::batchnorm_infer_backward(
                    self.value(*x),
                    g,
                    self.value(*gamma),
                    self.store.value(ids.running_mean),
                    self.store.value(ids.running_var),
                    *eps,
                )?;
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gamma, dg);
                Self::accumulate(grads, *beta, db);
            }
            Op::Relu(x) => Self::accumulate(grads, *x, kernels::relu_backward(self.value(*x), g)),
            Op::Tanh(x) => {
                let y = self.value(Var(i));
                Self::accumulate(grads, *x, kernels::tanh_backward(y, g));
            }
            Op::Upsample(x) => {
                let dx = kernels::upsample_bilinear_freq_backward(self.shape(*x), g)?;
                Self::accumulate(grads, *x, dx);
            }
            Op::Concat(x, y) => {
                let (gx, gy) = kernels::split_channels(g, self.shape(*x).c())?;
                Self::accumulate(grads, *x, gx);
                Self::accumulate(grads, *y, gy);
            }
            Op::StatsPool(x) => {
                let dx = kernels::stats_pool_backward(self.value(*x), g)?;
                Self::accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), b.is_some(), g)?;
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                Self::accumulate(grads, *a, kernels::ew_mul(g, self.value(*b))?);
                Self::accumulate(grads, *b, kernels::ew_mul(g, self.value(*a))?);
            }
            Op::ScalarAdd(x) => Self::accumulate(grads, *x, g.clone()),
            Op::ScalarSub(x) => Self::accumulate(grads, *x, g.map(|v| -v)),
            Op::Sum(x) => {
                let s = g.data()[0];
                Self::accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::AmSoftmax { emb, w, cache } => {
                let scale = g.data()[0];
                let (de, dw) = am_softmax::backward(self.value(*emb), self.value(*w), cache)?;
                Self::accumulate(grads, *emb, de.map(|v| v * scale));
                Self::accumulate(grads, *w, dw.map(|v| v * scale));
            }
        }
        Ok(())
    }
}
