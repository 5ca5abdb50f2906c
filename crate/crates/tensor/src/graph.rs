//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are pulled in
//! from a [`ParamStore`] by id; calling [`Graph::backward`] on a scalar node
//! returns accumulated gradients keyed by parameter id.

use std::collections::HashMap;

use crate::kernels::{self, AttnSegment};
use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        causal: bool,
        probs: Vec<T>,
    },
    Im2Col {
        x: Var,
        batch: usize,
        time: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Upsample {
        x: Var,
        batch: usize,
        time: usize,
        factor: usize,
    },
    TemporalDiff {
        x: Var,
        batch: usize,
        time: usize,
    },
    AddPerBatch {
        x: Var,
        e: Var,
        batch: usize,
    },
    ScalePerBatch(Var, Vec<T>),
    MeanTime {
        x: Var,
        batch: usize,
        time: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    CustomScalar {
        x: Var,
        local_grad: Vec<T>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | AddScalar(a) | Relu(a) | Gelu(a) | Silu(a) | Tanh(a) | Abs(a)
            | Square(a) | GatherRows(a, _) | SliceRows(a, _) | SliceCols(a, _) | Reshape(a)
            | ScalePerBatch(a, _) | SumAll(a) | MeanAll(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            Im2Col { x, .. }
            | Upsample { x, .. }
            | TemporalDiff { x, .. }
            | MeanTime { x, .. }
            | CustomScalar { x, .. } => vec![*x],
            AddPerBatch { x, e, .. } => vec![*x, *e],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape over a borrowed parameter store.
pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    params: Vec<Option<Tensor<T>>>,
    nodes: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter, `None` if the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. an intermediate node.
    pub fn node(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }

    /// Squared L2 norm over all parameter gradients.
    pub fn sq_norm(&self) -> T {
        self.params
            .iter()
            .flatten()
            .map(|t| t.sq_norm())
            .fold(T::zero(), |a, b| a + b)
    }
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(s) => {
            for (a, &b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// Graph that records operations for backpropagation.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            record: true,
        }
    }

    /// Graph that only evaluates; [`Graph::backward`] is unavailable.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            record: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = self.record
            && match &op {
                Op::Leaf => false,
                Op::Param(_) => true,
                other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
            };
        let op = if self.record { op } else { Op::Leaf };
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

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = self.push(t, Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    /// `x[..., k] · w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.value(x), self.value(w));
        let k = xs.cols();
        let m = xs.rows();
        assert_eq!(ws.shape().len(), 2, "matmul rhs must be 2-D");
        assert_eq!(ws.shape()[0], k, "matmul inner dims {:?} x {:?}", xs.shape(), ws.shape());
        let n = ws.shape()[1];
        let data = kernels::matmul(xs.data(), ws.data(), m, k, n, false, false);
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, data), Op::MatMul(x, w))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// Broadcast-add a `[n]` vector to every row of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias).data();
        let n = xv.cols();
        assert_eq!(bv.len(), n, "bias width");
        let mut t = xv.clone();
        for r in t.data_mut().chunks_mut(n) {
            for (a, &b) in r.iter_mut().zip(bv) {
                *a += b;
            }
        }
        self.push(t, Op::AddRow(x, bias))
    }

    /// Broadcast-multiply every row of `x[..., n]` by a `[n]` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(g).data();
        let n = xv.cols();
        assert_eq!(gv.len(), n, "gain width");
        let mut t = xv.clone();
        for r in t.data_mut().chunks_mut(n) {
            for (a, &b) in r.iter_mut().zip(gv) {
                *a *= b;
            }
        }
        self.push(t, Op::MulRow(x, g))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v + s);
        self.push(t, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        self.push(t, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(T::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(T::abs);
        self.push(t, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let (y, xhat, inv) = kernels::layer_norm_forward(
            xv.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            T::of(eps),
        );
        let t = Tensor::new(xv.shape().to_vec(), y);
        let (xhat, inv) = if self.record { (xhat, inv) } else { (vec![], vec![]) };
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            },
        )
    }

    /// Select rows of `x` (flattened over leading dims); used for embeddings.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let rows = xv.rows();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < rows, "row index {i} out of range {rows}");
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data);
        self.push(t, Op::GatherRows(x, idx.to_vec()))
    }

    /// Concatenate along rows; result is `[sum rows, cols]`.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let c = self.value(xs[0]).cols();
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            assert_eq!(v.cols(), c, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c.max(1);
        self.push(Tensor::new(vec![rows, c], data), Op::ConcatRows(xs.to_vec()))
    }

    /// Concatenate along the trailing dimension; leading shape taken from the first input.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let v = self.value(x);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        let mut shape = self.value(xs[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        self.push(Tensor::new(shape, data), Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::new(vec![len, c], data), Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        self.push(Tensor::new(shape, data), Op::SliceCols(x, start))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape.to_vec());
        self.push(t, Op::Reshape(x))
    }

    /// Multi-head attention over `q[rows_q, d]`, `k/v[rows_k, d]` split into segments.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttnSegment],
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(d % heads, 0, "model width not divisible by heads");
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        let rows = qv.rows();
        let (out, probs) =
            kernels::attention_forward(qv.data(), kv.data(), vv.data(), d, heads, segments, causal, rows);
        let probs = if self.record { probs } else { vec![] };
        self.push(
            Tensor::new(vec![rows, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                causal,
                probs,
            },
        )
    }

    /// im2col over `x[batch, time, channels]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let [batch, time, ch] = dims3(xv.shape());
        let (data, t_out) = kernels::im2col(xv.data(), batch, time, ch, kernel, stride, pad);
        self.push(
            Tensor::new(vec![batch, t_out, kernel * ch], data),
            Op::Im2Col {
                x,
                batch,
                time,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Nearest-neighbour upsampling along time of `x[batch, time, channels]`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let [batch, time, ch] = dims3(xv.shape());
        let mut data = Vec::with_capacity(xv.len() * factor);
        for b in 0..batch {
            for t in 0..time {
                let row = &xv.data()[(b * time + t) * ch..(b * time + t + 1) * ch];
                for _ in 0..factor {
                    data.extend_from_slice(row);
                }
            }
        }
        self.push(
            Tensor::new(vec![batch, time * factor, ch], data),
            Op::Upsample {
                x,
                batch,
                time,
                factor,
            },
        )
    }

    /// First-order difference along time: `y[b,t] = x[b,t+1] - x[b,t]`.
    pub fn temporal_diff(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [batch, time, ch] = dims3(xv.shape());
        assert!(time >= 2, "temporal_diff needs at least two frames");
        let d = xv.data();
        let mut data = Vec::with_capacity(batch * (time - 1) * ch);
        for b in 0..batch {
            for t in 0..time - 1 {
                for c in 0..ch {
                    data.push(d[(b * time + t + 1) * ch + c] - d[(b * time + t) * ch + c]);
                }
            }
        }
        self.push(
            Tensor::new(vec![batch, time - 1, ch], data),
            Op::TemporalDiff { x, batch, time },
        )
    }

    /// `x[b, t, :] + e[b, :]`.
    pub fn add_per_batch(&mut self, x: Var, e: Var) -> Var {
        let xv = self.value(x);
        let ev = self.value(e);
        let batch = xv.shape()[0];
        let ch = xv.cols();
        assert_eq!(ev.len(), batch * ch, "add_per_batch shape");
        let per = xv.len() / batch;
        let mut t = xv.clone();
        for b in 0..batch {
            let eb = &ev.data()[b * ch..(b + 1) * ch];
            for r in t.data_mut()[b * per..(b + 1) * per].chunks_mut(ch) {
                for (a, &v) in r.iter_mut().zip(eb) {
                    *a += v;
                }
            }
        }
        self.push(t, Op::AddPerBatch { x, e, batch })
    }

    /// Multiply every element of batch item `b` by the constant `factors[b]`.
    pub fn scale_per_batch(&mut self, x: Var, factors: &[T]) -> Var {
        let xv = self.value(x);
        let batch = xv.shape()[0];
        assert_eq!(factors.len(), batch);
        let per = xv.len() / batch;
        let mut t = xv.clone();
        for (b, &f) in factors.iter().enumerate() {
            for a in &mut t.data_mut()[b * per..(b + 1) * per] {
                *a *= f;
            }
        }
        self.push(t, Op::ScalePerBatch(x, factors.to_vec()))
    }

    /// Mean over time: `[batch, time, ch] -> [batch, ch]`.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [batch, time, ch] = dims3(xv.shape());
        let inv = T::one() / T::of_usize(time);
        let mut data = vec![T::zero(); batch * ch];
        for b in 0..batch {
            for t in 0..time {
                for c in 0..ch {
                    data[b * ch + c] += xv.data()[(b * time + t) * ch + c];
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        self.push(
            Tensor::new(vec![batch, ch], data),
            Op::MeanTime { x, batch, time },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::of_usize(v.len());
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]`.
    ///
    /// Rows with zero weight contribute exactly zero value and gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let lv = self.value(logits);
        let v = lv.cols();
        let rows = lv.rows();
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let mut probs = if self.record {
            vec![T::zero(); rows * v]
        } else {
            vec![]
        };
        let mut total = T::zero();
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            let row = lv.row(r);
            assert!(targets[r] < v, "target {} out of range {v}", targets[r]);
            let lse = kernels::log_sum_exp(row);
            total += weights[r] * (lse - row[targets[r]]);
            if self.record {
                for c in 0..v {
                    probs[r * v + c] = (row[c] - lse).exp();
                }
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Scalar computed outside the graph with a known gradient w.r.t. `x`.
    pub fn custom_scalar(&mut self, x: Var, value: T, local_grad: Vec<T>) -> Var {
        assert_eq!(local_grad.len(), self.value(x).len());
        self.push(Tensor::scalar(value), Op::CustomScalar { x, local_grad })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut params: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Gradients {
            params,
            nodes: grads,
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut [Option<Tensor<T>>],
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let send = |v: Var, gv: &[T], grads: &mut [Option<Vec<T>>]| {
            if self.rg(v) {
                acc(&mut grads[v.0], gv);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = &mut params[id.0];
                match slot {
                    Some(t) => {
                        for (a, &b) in t.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => {
                        *slot = Some(Tensor::new(node.value.shape().to_vec(), g.to_vec()));
                    }
                }
            }
            Op::MatMul(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, k) = (xv.rows(), xv.cols());
                let n = wv.shape()[1];
                if self.rg(*x) {
                    let gx = kernels::matmul(g, wv.data(), m, n, k, false, true);
                    send(*x, &gx, grads);
                }
                if self.rg(*w) {
                    let gw = kernels::matmul(xv.data(), g, k, m, n, true, false);
                    send(*w, &gw, grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g, grads);
                send(*b, g, grads);
            }
            Op::Sub(a, b) => {
                send(*a, g, grads);
                if self.rg(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    send(*b, &neg, grads);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga: Vec<T> = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                    send(*a, &ga, grads);
                }
                if self.rg(*b) {
                    let gb: Vec<T> = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                    send(*b, &gb, grads);
                }
            }
            Op::AddRow(x, b) => {
                send(*x, g, grads);
                if self.rg(*b) {
                    let n = val(*b).len();
                    let mut gb = vec![T::zero(); n];
                    for r in g.chunks(n) {
                        for (a, &v) in gb.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    send(*b, &gb, grads);
                }
            }
            Op::MulRow(x, gain) => {
                let gv = val(*gain).data();
                let n = gv.len();
                if self.rg(*x) {
                    let mut gx = g.to_vec();
                    for r in gx.chunks_mut(n) {
                        for (a, &s) in r.iter_mut().zip(gv) {
                            *a *= s;
                        }
                    }
                    send(*x, &gx, grads);
                }
                if self.rg(*gain) {
                    let mut gg = vec![T::zero(); n];
                    for (r, xr) in g.chunks(n).zip(val(*x).data().chunks(n)) {
                        for c in 0..n {
                            gg[c] += r[c] * xr[c];
                        }
                    }
                    send(*gain, &gg, grads);
                }
            }
            Op::Scale(x, s) => {
                let gx: Vec<T> = g.iter().map(|&v| v * *s).collect();
                send(*x, &gx, grads);
            }
            Op::AddScalar(x) => send(*x, g, grads),
            Op::Relu(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                send(*x, &gx, grads);
            }
            Op::Gelu(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| gv * gelu_parts(xv).1)
                    .collect();
                send(*x, &gx, grads);
            }
            Op::Silu(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (T::one() - s))
                    })
                    .collect();
                send(*x, &gx, grads);
            }
            Op::Tanh(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                send(*x, &gx, grads);
            }
            Op::Abs(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                send(*x, &gx, grads);
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let gx: Vec<T> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| two * xv * gv)
                    .collect();
                send(*x, &gx, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let gam = val(*gamma).data();
                let n = gam.len();
                let nf = T::of_usize(n);
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &is) in inv.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            gx[r * n + c] = is * (dh - m1 - hr[c] * m2);
                        }
                    }
                    send(*x, &gx, grads);
                }
                if self.rg(*gamma) {
                    let mut gg = vec![T::zero(); n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    send(*gamma, &gg, grads);
                }
                if self.rg(*beta) {
                    let mut gb = vec![T::zero(); n];
                    for gr in g.chunks(n) {
                        for c in 0..n {
                            gb[c] += gr[c];
                        }
                    }
                    send(*beta, &gb, grads);
                }
            }
            Op::GatherRows(x, idx) => {
                if self.rg(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    let mut gx = vec![T::zero(); xv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                    send(*x, &gx, grads);
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    send(x, &g[off..off + len], grads);
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &x in xs {
                    let w = val(x).cols();
                    if self.rg(x) {
                        let mut gx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gx.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        send(x, &gx, grads);
                    }
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                if self.rg(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    let mut gx = vec![T::zero(); xv.len()];
                    gx[start * c..start * c + g.len()].copy_from_slice(g);
                    send(*x, &gx, grads);
                }
            }
            Op::SliceCols(x, start) => {
                if self.rg(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    let w = node.value.cols();
                    let mut gx = vec![T::zero(); xv.len()];
                    for r in 0..xv.rows() {
                        gx[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    send(*x, &gx, grads);
                }
            }
            Op::Reshape(x) => send(*x, g, grads),
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                causal,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (gq, gk, gv) = kernels::attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    g,
                    qv.cols(),
                    *heads,
                    segments,
                    *causal,
                    kv.rows(),
                );
                send(*q, &gq, grads);
                send(*k, &gk, grads);
                send(*v, &gv, grads);
            }
            Op::Im2Col {
                x,
                batch,
                time,
                kernel,
                stride,
                pad,
            } => {
                let ch = val(*x).cols();
                let gx = kernels::col2im(g, *batch, *time, ch, *kernel, *stride, *pad);
                send(*x, &gx, grads);
            }
            Op::Upsample {
                x,
                batch,
                time,
                factor,
            } => {
                let ch = val(*x).cols();
                let mut gx = vec![T::zero(); batch * time * ch];
                for b in 0..*batch {
                    for t in 0..*time {
                        for f in 0..*factor {
                            let src = ((b * time + t) * factor + f) * ch;
                            for c in 0..ch {
                                gx[(b * time + t) * ch + c] += g[src + c];
                            }
                        }
                    }
                }
                send(*x, &gx, grads);
            }
            Op::TemporalDiff { x, batch, time } => {
                let ch = val(*x).cols();
                let mut gx = vec![T::zero(); batch * time * ch];
                for b in 0..*batch {
                    for t in 0..time - 1 {
                        for c in 0..ch {
                            let gv = g[(b * (time - 1) + t) * ch + c];
                            gx[(b * time + t + 1) * ch + c] += gv;
                            gx[(b * time + t) * ch + c] -= gv;
                        }
                    }
                }
                send(*x, &gx, grads);
            }
            Op::AddPerBatch { x, e, batch } => {
                send(*x, g, grads);
                if self.rg(*e) {
                    let ch = val(*e).len() / batch;
                    let per = g.len() / batch;
                    let mut ge = vec![T::zero(); batch * ch];
                    for b in 0..*batch {
                        for r in g[b * per..(b + 1) * per].chunks(ch) {
                            for c in 0..ch {
                                ge[b * ch + c] += r[c];
                            }
                        }
                    }
                    send(*e, &ge, grads);
                }
            }
            Op::ScalePerBatch(x, factors) => {
                let per = g.len() / factors.len();
                let mut gx = g.to_vec();
                for (b, &f) in factors.iter().enumerate() {
                    for a in &mut gx[b * per..(b + 1) * per] {
                        *a *= f;
                    }
                }
                send(*x, &gx, grads);
            }
            Op::MeanTime { x, batch, time } => {
                let ch = val(*x).cols();
                let inv = T::one() / T::of_usize(*time);
                let mut gx = vec![T::zero(); batch * time * ch];
                for b in 0..*batch {
                    for t in 0..*time {
                        for c in 0..ch {
                            gx[(b * time + t) * ch + c] = g[b * ch + c] * inv;
                        }
                    }
                }
                send(*x, &gx, grads);
            }
            Op::SumAll(x) => {
                let gx = vec![g[0]; val(*x).len()];
                send(*x, &gx, grads);
            }
            Op::MeanAll(x) => {
                let n = val(*x).len();
                let gx = vec![g[0] / T::of_usize(n); n];
                send(*x, &gx, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let lv = val(*logits);
                let v = lv.cols();
                let mut gl = vec![T::zero(); lv.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let s = w * g[0];
                    for c in 0..v {
                        gl[r * v + c] = s * probs[r * v + c];
                    }
                    gl[r * v + t] -= s;
                }
                send(*logits, &gl, grads);
            }
            Op::CustomScalar { x, local_grad } => {
                let gx: Vec<T> = local_grad.iter().map(|&l| l * g[0]).collect();
                send(*x, &gx, grads);
            }
        }
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 3, "expected [batch, time, channels], got {shape:?}");
    [shape[0], shape[1], shape[2]]
}
