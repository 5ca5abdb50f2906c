//! Parameterized layers. Each layer only holds [`ParamId`]s; values live in a
//! [`ParamStore`] so a whole model serializes as one flat list of tensors.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::kernels::AttnSegment;
use crate::params::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_std(store, name, in_dim, out_dim, bias, std, rng)
    }

    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(vec![in_dim, out_dim], std, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(vec![vocab, dim], 1.0, rng));
        Self { table, vocab, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

/// 1-D convolution over `[batch, time, channels]` with zero padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub linear: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * in_ch;
        let linear = Linear::new(store, name, fan_in, out_ch, true, rng);
        // uniform bias in ±1/√fan_in, as in the usual convolution default
        let bound = 1.0 / (fan_in as f64).sqrt();
        if let Some(b) = linear.bias {
            *store.get_mut(b) = Tensor::uniform(vec![out_ch], -bound, bound, rng);
        }
        Self {
            linear,
            kernel,
            stride,
            pad,
        }
    }

    /// Kernel `k`, stride 1, length-preserving padding (`k` odd).
    pub fn same<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_ch, out_ch, kernel, 1, kernel / 2, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            return self.linear.forward(g, x);
        }
        let cols = g.im2col(x, self.kernel, self.stride, self.pad);
        self.linear.forward(g, cols)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by heads {heads}");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xq: Var,
        xkv: Var,
        segments: &[AttnSegment],
        causal: bool,
    ) -> Var {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let a = g.attention(q, k, v, self.heads, segments, causal);
        self.o.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Sinusoidal encoding of `positions` (may be fractional, e.g. flow time) into `dim` channels.
pub fn sinusoidal<T: Scalar>(positions: &[f64], dim: usize, max_period: f64) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let k = (i % half.max(1)) as f64;
            let freq = (-(max_period.ln()) * k / half.max(1) as f64).exp();
            let v = if i < half { (p * freq).sin() } else { (p * freq).cos() };
            data.push(T::of(v));
        }
    }
    Tensor::new(vec![positions.len(), dim], data)
}
