//! Raw numeric kernels shared by the graph ops and graph-free inference paths.
//!
//! Every kernel computes each output row with a fixed accumulation order that
//! does not depend on how many other rows are computed alongside it, so a
//! row evaluated alone is bit-identical to the same row evaluated in a batch.

use crate::Scalar;

const K_BLOCK: usize = 128;

/// `out[m,n] += a[m,k] · b[k,n]`, all row-major.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    let mut p0 = 0;
    while p0 < k {
        let p1 = (p0 + K_BLOCK).min(k);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for p in p0..p1 {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    let bv = brow[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let c = &mut out[i * n..(i + 1) * n];
            for p in p0..p1 {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    c[j] += av * brow[j];
                }
            }
            i += 1;
        }
        p0 = p1;
    }
}

/// Transpose a row-major `[rows, cols]` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `a · b` with optional transposition of either operand.
///
/// `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let at;
    let a = if ta {
        at = transpose(a, k, m);
        &at[..]
    } else {
        a
    };
    let bt;
    let b = if tb {
        bt = transpose(b, n, k);
        &bt[..]
    } else {
        b
    };
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// One attention segment: a block of query rows attending to a block of key rows.
///
/// With `causal`, query `i` sees keys `0..=i + (k_len - q_len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl AttnSegment {
    pub fn square(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }

    fn visible(&self, i: usize, causal: bool) -> usize {
        if causal {
            (i + 1 + self.k_len - self.q_len).min(self.k_len)
        } else {
            self.k_len
        }
    }
}

/// Multi-head scaled dot-product attention. Returns the output `[q_rows, d]`
/// and the attention probabilities (concatenated per segment and head).
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    segments: &[AttnSegment],
    causal: bool,
    q_rows: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut out = vec![T::zero(); q_rows * d];
    let total: usize = segments.iter().map(|s| s.q_len * s.k_len * heads).sum();
    let mut probs = vec![T::zero(); total];
    let mut off = 0;
    for seg in segments {
        assert!(
            !causal || seg.k_len >= seg.q_len,
            "causal attention needs at least as many keys as queries"
        );
        for h in 0..heads {
            let hc = h * dh;
            for i in 0..seg.q_len {
                let qi = &q[(seg.q_start + i) * d + hc..(seg.q_start + i) * d + hc + dh];
                let vis = seg.visible(i, causal);
                let prow = &mut probs[off + i * seg.k_len..off + (i + 1) * seg.k_len];
                let mut mx = T::neg_infinity();
                for j in 0..vis {
                    let kj = &k[(seg.k_start + j) * d + hc..(seg.k_start + j) * d + hc + dh];
                    let mut s = T::zero();
                    for c in 0..dh {
                        s += qi[c] * kj[c];
                    }
                    let s = s * scale;
                    prow[j] = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = T::zero();
                for p in prow.iter_mut().take(vis) {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                for p in prow.iter_mut().take(vis) {
                    *p /= z;
                }
                let orow = &mut out[(seg.q_start + i) * d + hc..(seg.q_start + i) * d + hc + dh];
                for j in 0..vis {
                    let pj = prow[j];
                    let vj = &v[(seg.k_start + j) * d + hc..(seg.k_start + j) * d + hc + dh];
                    for c in 0..dh {
                        orow[c] += pj * vj[c];
                    }
                }
            }
            off += seg.q_len * seg.k_len;
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] w.r.t. `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    d: usize,
    heads: usize,
    segments: &[AttnSegment],
    causal: bool,
    k_rows: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k_rows * d];
    let mut gv = vec![T::zero(); k_rows * d];
    let mut off = 0;
    let mut dp = Vec::new();
    for seg in segments {
        for h in 0..heads {
            let hc = h * dh;
            for i in 0..seg.q_len {
                let qr = (seg.q_start + i) * d + hc;
                let go = &grad_out[qr..qr + dh];
                let vis = seg.visible(i, causal);
                let prow = &probs[off + i * seg.k_len..off + i * seg.k_len + vis];
                dp.clear();
                let mut dot = T::zero();
                for (j, &pj) in prow.iter().enumerate() {
                    let kr = (seg.k_start + j) * d + hc;
                    let vj = &v[kr..kr + dh];
                    let mut s = T::zero();
                    for c in 0..dh {
                        s += go[c] * vj[c];
                    }
                    dp.push(s);
                    dot += s * pj;
                    let gvj = &mut gv[kr..kr + dh];
                    for c in 0..dh {
                        gvj[c] += pj * go[c];
                    }
                }
                for (j, &pj) in prow.iter().enumerate() {
                    let ds = pj * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kr = (seg.k_start + j) * d + hc;
                    for c in 0..dh {
                        gq[qr + c] += ds * k[kr + c];
                        gk[kr + c] += ds * q[qr + c];
                    }
                }
            }
            off += seg.q_len * seg.k_len;
        }
    }
    (gq, gk, gv)
}

/// Layer normalization over rows of width `n`; returns `(y, xhat, inv_std)`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    let nf = T::of_usize(n);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().copied().sum::<T>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv[r] = is;
        for c in 0..n {
            let h = (xr[c] - mean) * is;
            xhat[r * n + c] = h;
            y[r * n + c] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, inv)
}

/// Zero-padded im2col over `[batch, time, channels]`.
/// Output is `[batch, t_out, kernel * channels]` with the kernel tap as the outer index.
pub fn im2col<T: Scalar>(
    x: &[T],
    batch: usize,
    time: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize) {
    let t_out = conv_out_len(time, kernel, stride, pad);
    let width = kernel * channels;
    let mut out = vec![T::zero(); batch * t_out * width];
    for b in 0..batch {
        for t in 0..t_out {
            let dst = (b * t_out + t) * width;
            for kk in 0..kernel {
                let src_t = (t * stride + kk) as isize - pad as isize;
                if src_t < 0 || src_t as usize >= time {
                    continue;
                }
                let src = (b * time + src_t as usize) * channels;
                out[dst + kk * channels..dst + (kk + 1) * channels]
                    .copy_from_slice(&x[src..src + channels]);
            }
        }
    }
    (out, t_out)
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(
    cols: &[T],
    batch: usize,
    time: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let t_out = conv_out_len(time, kernel, stride, pad);
    let width = kernel * channels;
    let mut out = vec![T::zero(); batch * time * channels];
    for b in 0..batch {
        for t in 0..t_out {
            let src = (b * t_out + t) * width;
            for kk in 0..kernel {
                let dst_t = (t * stride + kk) as isize - pad as isize;
                if dst_t < 0 || dst_t as usize >= time {
                    continue;
                }
                let dst = (b * time + dst_t as usize) * channels;
                for c in 0..channels {
                    out[dst + c] += cols[src + kk * channels + c];
                }
            }
        }
    }
    out
}

pub fn conv_out_len(time: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (time + 2 * pad - kernel) / stride + 1
}

/// Row-wise log-sum-exp.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

/// Softmax of a row at temperature 1.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}
