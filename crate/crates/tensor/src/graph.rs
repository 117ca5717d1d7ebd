//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes are
//! appended, and [`Graph::backward`] walks the tape in reverse. Nodes whose inputs
//! do not require gradients are never differentiated, so freezing a network (see
//! [`Graph::freeze`]) also skips its weight-gradient kernels.

use crate::kernels::ConvGeom;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use std::collections::{HashMap, HashSet};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanPerSample(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Geometry of the equivalent forward convolution applied to the output.
        geom: ConvGeom,
        batch: usize,
    },
    BroadcastConv {
        cond: Var,
        w: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
        per_instance: bool,
    },
    FixedNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
    SoftmaxCe {
        logits: Var,
        target: Tensor<T>,
        weights: Vec<T>,
    },
    BceLogits {
        logits: Var,
        target: Tensor<T>,
        weights: Tensor<T>,
    },
    HeteroNll {
        logits: Var,
        logvar: Var,
        noise: Tensor<T>,
        target: Tensor<T>,
        weights: Vec<T>,
        exclusive: bool,
    },
    SoftNmi {
        x: Var,
        y: Var,
        bins: usize,
        sigma: f64,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<(u64, usize), Var>,
    frozen: HashSet<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<(u64, usize), Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    /// Gradient for each entry of `store`, `None` where the entry was unused or frozen.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| self.params.get(&(store.uid(), i)).and_then(|v| self.grads[v.0].clone()))
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    /// Parameters of `store` bound after this call carry no gradient.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.uid());
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let ng = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, ng)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (e.g. gradient-penalty interpolates).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated binds of the same entry return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let e = store.entry(id);
        let ng = e.trainable && !e.buffer && !self.frozen.contains(&store.uid());
        let v = self.push(e.value.clone(), Op::Leaf, ng);
        self.params.insert(key, v);
        v
    }

    // ----- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s: T = lit(s);
        let v = self.value(a).map(|x| x * s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s: T = lit(s);
        let v = self.value(a).map(|x| x + s);
        self.push_op(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s: T = lit(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        self.push_op(v, Op::LeakyRelu(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push_op(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push_op(v, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push_op(v, Op::Square(a), &[a])
    }

    // ----- reductions and shape ---------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = lit::<T>(self.value(a).sum_f64());
        self.push_op(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let s = lit::<T>(self.value(a).mean_f64());
        self.push_op(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// `[N, ...] -> [N]` mean over all trailing axes.
    pub fn mean_per_sample(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.dim(0);
        let per = t.numel() / n;
        let data = (0..n)
            .map(|i| lit::<T>(t.sample(i).iter().map(|v| v.as_f64()).sum::<f64>() / per as f64))
            .collect();
        self.push_op(Tensor::new([n], data), Op::MeanPerSample(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape.to_vec());
        self.push_op(v, Op::Reshape(a), &[a])
    }

    /// Concatenates `[N, C_i, ...]` tensors along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.value(parts[0]).shape().to_vec();
        let n = first[0];
        let tail: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[0], n, "concat: batch sizes differ");
            assert_eq!(s[2..], first[2..], "concat: spatial dims differ");
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * tail);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(i));
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        self.push_op(Tensor::new(shape, data), Op::Concat(parts.to_vec()), parts)
    }

    // ----- backward ----------------------------------------------------------

    /// Differentiates a one-element node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward() root must be a scalar, got shape {:?}",
            self.shape(root)
        );
        self.backward_with(root, Tensor::full(self.shape(root).to_vec(), T::one()))
    }

    /// Back-propagates an explicit output cotangent.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(root), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    pub(crate) fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                self.acc(grads, *a, d);
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                let d = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * s });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(out, |gv, y| gv * y * (T::one() - y));
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(out, |gv, y| gv * (T::one() - y * y));
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(out, |gv, y| gv * y)),
            Op::Log(a) => self.acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Square(a) => {
                let two: T = lit(2.0);
                self.acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * two * x));
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.acc(grads, *a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let gv = g.item() / lit(n as f64);
                self.acc(grads, *a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
            Op::MeanPerSample(a) => {
                let s = self.shape(*a).to_vec();
                let n = s[0];
                let per = self.value(*a).numel() / n;
                let inv: T = lit(1.0 / per as f64);
                let mut d = Vec::with_capacity(n * per);
                for k in 0..n {
                    let gv = g.data()[k] * inv;
                    d.extend(std::iter::repeat_n(gv, per));
                }
                self.acc(grads, *a, Tensor::new(s, d));
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                self.acc(grads, *a, g.clone().reshape(s));
            }
            Op::Concat(parts) => {
                let n = out.dim(0);
                let per_out = out.numel() / n;
                let mut offset = 0;
                for &p in parts {
                    let per = self.value(p).numel() / n;
                    if self.needs_grad(p) {
                        let mut d = Vec::with_capacity(n * per);
                        for k in 0..n {
                            let base = k * per_out + offset;
                            d.extend_from_slice(&g.data()[base..base + per]);
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), d));
                    }
                    offset += per;
                }
            }
            Op::Conv2d { .. }
            | Op::ConvTranspose2d { .. }
            | Op::BroadcastConv { .. }
            | Op::Linear { .. }
            | Op::MaxPool2 { .. }
            | Op::AvgPool2(_)
            | Op::Upsample2(_)
            | Op::GlobalAvgPool(_) => self.backward_spatial(i, g, grads),
            Op::Norm { .. } | Op::FixedNorm { .. } => self.backward_norm(i, g, grads),
            Op::SoftmaxCe { .. } | Op::BceLogits { .. } | Op::HeteroNll { .. } => self.backward_loss(i, g, grads),
            Op::SoftNmi { .. } => self.backward_nmi(i, g, grads),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
