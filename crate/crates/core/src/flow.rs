//! Conditional flow matching from backbone gesture embeddings to motion.
//!
//! Data sits at `t = 0` and unit Gaussian noise at `t = 1` on the straight
//! path `x_t = (1 - t) x0 + t x1`, whose velocity is `x1 - x0`. Sampling
//! integrates the learned field from noise back to data with Euler steps.

use std::f64::consts::PI;

use gelina_tensor::nn::{sinusoidal, Conv1d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use gelina_tensor::{AdamW, AttnSegment, Checkpoint, Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::artifact::{load_store, parse_key, push_store};
use crate::error::{Error, Result};
use crate::motion::{joint_rot6d, MotionSequence, FEATURE_DIM, MOTION_FPS, NUM_JOINTS};
use crate::rotation::{geodesic_sq_with_grad, rot6d_to_matrix};
use crate::rvq::DOWNSAMPLE_FACTOR;

pub const CHECKPOINT_KIND: &str = "flow-decoder";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const COND_MAGIC: &[u8; 8] = b"GLNACOND";
pub const COND_VERSION: u32 = 1;
/// Flow time is stretched by this factor before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub cond_dim: usize,
    pub motion_dim: usize,
    pub lambda_vel: f64,
    pub lambda_geo: f64,
    pub sampling_steps: usize,
    pub upsample_factor: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Convolution width inside residual blocks.
    pub kernel: usize,
    pub time_dim: usize,
}

impl FlowConfig {
    pub fn desk(cond_dim: usize) -> Self {
        Self {
            cond_dim,
            motion_dim: FEATURE_DIM,
            lambda_vel: 0.05,
            lambda_geo: 0.8,
            sampling_steps: 100,
            upsample_factor: DOWNSAMPLE_FACTOR,
            hidden: 64,
            heads: 4,
            kernel: 3,
            time_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.motion_dim != FEATURE_DIM {
            return Err(Error::Config(format!("motion_dim must be {FEATURE_DIM}")));
        }
        if self.lambda_vel < 0.0 || self.lambda_geo < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.sampling_steps == 0 {
            return Err(Error::Config("sampling_steps must be at least 1".into()));
        }
        if self.upsample_factor != DOWNSAMPLE_FACTOR {
            return Err(Error::Config(format!("upsample_factor must be {DOWNSAMPLE_FACTOR}")));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config("hidden must be divisible by heads".into()));
        }
        if self.kernel.is_multiple_of(2) || self.cond_dim == 0 || self.time_dim < 2 {
            return Err(Error::Config("kernel must be odd, cond_dim and time_dim positive".into()));
        }
        Ok(())
    }
}

/// A velocity field `v(x_t, t, c)` over `x_t[b, frames, 157]`, `c[b, steps, cond_dim]`.
pub trait VelocityField<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn velocity(&self, g: &mut Graph<'_, T>, x_t: Var, t: &[T], cond: Var) -> Result<Var>;
}

/// Training inputs with the noise and times already drawn.
#[derive(Clone, Debug)]
pub struct FlowBatch<T> {
    /// Clean motion `[b, frames, 157]`.
    pub x0: Tensor<T>,
    /// Noise, same shape as `x0`.
    pub x1: Tensor<T>,
    pub t: Vec<T>,
    /// Conditioning `[b, frames / 4, cond_dim]`.
    pub cond: Tensor<T>,
}

impl<T: Scalar> FlowBatch<T> {
    /// Interpolant `(1 - t) x0 + t x1`, per batch item.
    pub fn interpolant(&self) -> Tensor<T> {
        let b = self.t.len();
        let per = self.x0.len() / b;
        let data = self
            .x0
            .data()
            .iter()
            .zip(self.x1.data())
            .enumerate()
            .map(|(i, (&a, &n))| {
                let t = self.t[i / per];
                (T::one() - t) * a + t * n
            })
            .collect();
        Tensor::new(self.x0.shape().to_vec(), data)
    }

    /// Target field `x1 - x0`.
    pub fn target(&self) -> Tensor<T> {
        let data = self.x0.data().iter().zip(self.x1.data()).map(|(&a, &n)| n - a).collect();
        Tensor::new(self.x0.shape().to_vec(), data)
    }

    fn check(&self, cfg: &FlowConfig) -> Result<(usize, usize)> {
        let s = self.x0.shape();
        if s.len() != 3 || s[2] != cfg.motion_dim || self.x1.shape() != s {
            return Err(Error::ShapeMismatch(format!("motion {:?} / noise {:?}", s, self.x1.shape())));
        }
        if s[1] < 2 {
            return Err(Error::SequenceTooShort(s[1]));
        }
        let c = self.cond.shape();
        if c.len() != 3 || c[0] != s[0] || c[2] != cfg.cond_dim || c[1] * cfg.upsample_factor != s[1] {
            return Err(Error::ShapeMismatch(format!("conditioning {c:?} for motion {s:?}")));
        }
        if self.t.len() != s[0] || self.t.iter().any(|t| !(T::zero()..=T::one()).contains(t)) {
            return Err(Error::ShapeMismatch("one time in [0, 1] per batch item".into()));
        }
        Ok((s[0], s[1]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowLossVars {
    pub fm: Var,
    pub vel: Var,
    pub geo: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowLosses {
    pub fm: f64,
    pub vel: f64,
    pub geo: f64,
    pub total: f64,
}

/// Mean squared geodesic distance between the joint rotations of `pred` and
/// `target` (flat `[frames, 157]`), over frames and joints, and its gradient
/// w.r.t. `pred`. A joint whose predicted or target block does not decode to
/// a rotation scores the maximum, `π²`, with zero gradient.
pub fn geodesic_term<T: Scalar>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let frames = pred.len() / FEATURE_DIM;
    let count = T::of_usize((frames * NUM_JOINTS).max(1));
    let max = T::of(PI * PI);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for f in 0..frames {
        let p = &pred[f * FEATURE_DIM..(f + 1) * FEATURE_DIM];
        let q = &target[f * FEATURE_DIM..(f + 1) * FEATURE_DIM];
        for j in 0..NUM_JOINTS {
            let hit = rot6d_to_matrix(&joint_rot6d(q, j))
                .ok()
                .and_then(|r| geodesic_sq_with_grad(&joint_rot6d(p, j), &r));
            match hit {
                Some((v, gr)) => {
                    total += v;
                    for (k, &gk) in gr.iter().enumerate() {
                        grad[f * FEATURE_DIM + j * 6 + k] = gk / count;
                    }
                }
                None => total += max,
            }
        }
    }
    (total / count, grad)
}

fn mse<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// The three training terms and their weighted sum. The velocity and geodesic
/// terms compare the implied clean estimate `x_t - t v` against `x0`.
pub fn flow_losses<T: Scalar>(
    g: &mut Graph<'_, T>,
    field: &dyn VelocityField<T>,
    batch: &FlowBatch<T>,
    cfg: &FlowConfig,
) -> Result<FlowLossVars> {
    batch.check(cfg)?;
    let xt = g.constant(batch.interpolant());
    let cond = g.constant(batch.cond.clone());
    let v = field.velocity(g, xt, &batch.t, cond)?;
    if g.shape(v) != batch.x0.shape() {
        return Err(Error::ShapeMismatch(format!("velocity {:?}", g.shape(v))));
    }
    let u = g.constant(batch.target());
    let fm = mse(g, v, u);

    let tv = g.scale_per_batch(v, &batch.t);
    let x0_hat = g.sub(xt, tv);
    let x0 = g.constant(batch.x0.clone());
    let d_hat = g.temporal_diff(x0_hat);
    let d_ref = g.temporal_diff(x0);
    let vel = mse(g, d_hat, d_ref);

    let (value, grad) = geodesic_term(g.value(x0_hat).data(), batch.x0.data());
    let geo = g.custom_scalar(x0_hat, value, grad);

    let wv = g.scale(vel, T::of(cfg.lambda_vel));
    let wg = g.scale(geo, T::of(cfg.lambda_geo));
    let s = g.add(fm, wv);
    let total = g.add(s, wg);
    Ok(FlowLossVars { fm, vel, geo, total })
}

/// Explicit Euler from `t = 1` (the noise `x1`) to `t = 0` in `steps` uniform steps.
pub fn euler_sample<T: Scalar>(
    field: &dyn VelocityField<T>,
    x1: &Tensor<T>,
    cond: &Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::Config("sampling_steps must be at least 1".into()));
    }
    let batch = x1.shape()[0];
    let mut x = x1.clone();
    for k in 0..steps {
        let t = 1.0 - k as f64 / steps as f64;
        let next = 1.0 - (k + 1) as f64 / steps as f64;
        let dt = T::of(t - next);
        let v = {
            let mut g = Graph::inference(field.params());
            let xv = g.constant(x.clone());
            let c = g.constant(cond.clone());
            let v = field.velocity(&mut g, xv, &vec![T::of(t); batch], c)?;
            g.value(v).clone()
        };
        for (a, &b) in x.data_mut().iter_mut().zip(v.data()) {
            *a -= dt * b;
        }
        if !x.is_finite() {
            return Err(Error::NonFiniteState { step: k });
        }
    }
    Ok(x)
}

#[derive(Clone, Debug)]
struct ResBlock {
    ln1: LayerNorm,
    conv1: Conv1d,
    time: Linear,
    ln2: LayerNorm,
    conv2: Conv1d,
}

impl ResBlock {
    fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, cfg: &FlowConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        Self {
            ln1: LayerNorm::new(s, &format!("{name}.ln1"), h),
            conv1: Conv1d::same(s, &format!("{name}.conv1"), h, h, cfg.kernel, rng),
            time: Linear::new(s, &format!("{name}.time"), h, h, true, rng),
            ln2: LayerNorm::new(s, &format!("{name}.ln2"), h),
            conv2: Conv1d::same(s, &format!("{name}.conv2"), h, h, cfg.kernel, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> Var {
        let a = self.ln1.forward(g, x);
        let a = g.silu(a);
        let a = self.conv1.forward(g, a);
        let te = self.time.forward(g, temb);
        let a = g.add_per_batch(a, te);
        let a = self.ln2.forward(g, a);
        let a = g.silu(a);
        let a = self.conv2.forward(g, a);
        g.add(x, a)
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// U-shaped 1-D convolution / attention velocity network. One resolution
/// level: full frame rate, then half rate with self-attention, back up with
/// a skip connection.
#[derive(Clone, Debug)]
pub struct FlowNet<T: Scalar> {
    cfg: FlowConfig,
    store: ParamStore<T>,
    cond_proj: Linear,
    input: Conv1d,
    time1: Linear,
    time2: Linear,
    res_in: ResBlock,
    down: Conv1d,
    res_mid: ResBlock,
    attn: AttnBlock,
    merge: Conv1d,
    res_out: ResBlock,
    out_ln: LayerNorm,
    output: Conv1d,
    /// Per-channel, time-dependent gain on `x_t` added to the output, so the
    /// noise component of the target does not have to pass the hidden width.
    skip_gate: Linear,
}

impl<T: Scalar> FlowNet<T> {
    pub fn new(cfg: FlowConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let h = cfg.hidden;
        let m = cfg.motion_dim;
        let cond_proj = Linear::new(s, "cond_proj", cfg.cond_dim, m, true, &mut rng);
        let input = Conv1d::same(s, "input", 2 * m, h, cfg.kernel, &mut rng);
        let time1 = Linear::new(s, "time1", cfg.time_dim, h, true, &mut rng);
        let time2 = Linear::new(s, "time2", h, h, true, &mut rng);
        let res_in = ResBlock::new(s, "res_in", &cfg, &mut rng);
        let down = Conv1d::new(s, "down", h, h, 2, 2, 0, &mut rng);
        let res_mid = ResBlock::new(s, "res_mid", &cfg, &mut rng);
        let attn = AttnBlock {
            ln1: LayerNorm::new(s, "attn.ln1", h),
            attn: MultiHeadAttention::new(s, "attn.mha", h, cfg.heads, &mut rng),
            ln2: LayerNorm::new(s, "attn.ln2", h),
            ffn: FeedForward::new(s, "attn.ffn", h, 2 * h, &mut rng),
        };
        let merge = Conv1d::same(s, "merge", 2 * h, h, cfg.kernel, &mut rng);
        let res_out = ResBlock::new(s, "res_out", &cfg, &mut rng);
        let out_ln = LayerNorm::new(s, "out_ln", h);
        let output = Conv1d::same(s, "output", h, m, cfg.kernel, &mut rng);
        let skip_gate = Linear::new(s, "skip_gate", h, m, true, &mut rng);
        Ok(Self {
            cfg,
            store,
            cond_proj,
            input,
            time1,
            time2,
            res_in,
            down,
            res_mid,
            attn,
            merge,
            res_out,
            out_ln,
            output,
            skip_gate,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.ids().map(|id| self.store.get(id).len()).sum()
    }

    /// One optimizer step on `(clean motion [frames, 157], conditioning [frames/4, cond_dim])`
    /// pairs of equal length. Times and noise are drawn from `seed`.
    pub fn train_step(
        &mut self,
        batch: &[(Tensor<T>, Tensor<T>)],
        opt: &mut AdamW<T>,
        lr: f64,
        seed: u64,
    ) -> Result<FlowLosses> {
        let fb = self.draw_batch(batch, seed)?;
        let (grads, losses) = {
            let mut g = Graph::new(&self.store);
            let v = flow_losses(&mut g, self, &fb, &self.cfg)?;
            let val = |x: Var| g.value(x).data()[0].as_f64();
            let losses = FlowLosses {
                fm: val(v.fm),
                vel: val(v.vel),
                geo: val(v.geo),
                total: val(v.total),
            };
            if !losses.total.is_finite() {
                return Err(Error::NonFiniteLoss(format!("flow: {losses:?}")));
            }
            (g.backward(v.total), losses)
        };
        opt.step(&mut self.store, &grads, lr);
        Ok(losses)
    }

    /// Stack pairs and draw `t ~ U(0,1)` and `x1 ~ N(0, I)` per item.
    pub fn draw_batch(&self, batch: &[(Tensor<T>, Tensor<T>)], seed: u64) -> Result<FlowBatch<T>> {
        let Some((first, c0)) = batch.first() else {
            return Err(Error::DegenerateInput("empty batch"));
        };
        let frames = first.rows();
        let steps = c0.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x0 = Vec::new();
        let mut cond = Vec::new();
        let mut x1 = Vec::new();
        let mut t = Vec::new();
        for (m, c) in batch {
            if m.rows() != frames || c.rows() != steps || m.cols() != self.cfg.motion_dim {
                return Err(Error::ShapeMismatch(format!(
                    "batch item {:?}/{:?} vs {:?}/{:?}",
                    m.shape(),
                    c.shape(),
                    first.shape(),
                    c0.shape()
                )));
            }
            x0.extend_from_slice(m.data());
            cond.extend_from_slice(c.data());
            t.push(T::of(rng.random::<f64>()));
            x1.extend((0..m.len()).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))));
        }
        let b = batch.len();
        Ok(FlowBatch {
            x0: Tensor::new(vec![b, frames, self.cfg.motion_dim], x0),
            x1: Tensor::new(vec![b, frames, self.cfg.motion_dim], x1),
            t,
            cond: Tensor::new(vec![b, steps, c0.cols()], cond),
        })
    }

    /// Decode conditioning `[steps, cond_dim]` into `4 * steps` motion frames.
    pub fn sample(&self, cond: &Tensor<T>, seed: u64) -> Result<MotionSequence<T>> {
        let steps = cond.rows();
        if steps == 0 {
            return Err(Error::DegenerateInput("empty conditioning"));
        }
        if cond.cols() != self.cfg.cond_dim {
            return Err(Error::DimMismatch(cond.cols(), self.cfg.cond_dim));
        }
        let frames = steps * self.cfg.upsample_factor;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = (0..frames * self.cfg.motion_dim)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let x1 = Tensor::new(vec![1, frames, self.cfg.motion_dim], noise);
        let c = Tensor::new(vec![1, steps, self.cfg.cond_dim], cond.data().to_vec());
        let x = euler_sample(self, &x1, &c, self.cfg.sampling_steps)?;
        MotionSequence::new(x.into_data(), MOTION_FPS)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, CHECKPOINT_VERSION);
        let c = &self.cfg;
        ck.set("cond_dim", c.cond_dim);
        ck.set("motion_dim", c.motion_dim);
        ck.set("lambda_vel", c.lambda_vel);
        ck.set("lambda_geo", c.lambda_geo);
        ck.set("sampling_steps", c.sampling_steps);
        ck.set("upsample_factor", c.upsample_factor);
        ck.set("hidden", c.hidden);
        ck.set("heads", c.heads);
        ck.set("kernel", c.kernel);
        ck.set("time_dim", c.time_dim);
        push_store(&mut ck, &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND || ck.kind_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "expected {CHECKPOINT_KIND} v{CHECKPOINT_VERSION}, found {} v{}",
                ck.kind, ck.kind_version
            )));
        }
        let cfg = FlowConfig {
            cond_dim: parse_key(ck, "cond_dim")?,
            motion_dim: parse_key(ck, "motion_dim")?,
            lambda_vel: parse_key(ck, "lambda_vel")?,
            lambda_geo: parse_key(ck, "lambda_geo")?,
            sampling_steps: parse_key(ck, "sampling_steps")?,
            upsample_factor: parse_key(ck, "upsample_factor")?,
            hidden: parse_key(ck, "hidden")?,
            heads: parse_key(ck, "heads")?,
            kernel: parse_key(ck, "kernel")?,
            time_dim: parse_key(ck, "time_dim")?,
        };
        let mut me = Self::new(cfg, 0)?;
        load_store(ck, &mut me.store)?;
        Ok(me)
    }
}

impl<T: Scalar> VelocityField<T> for FlowNet<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn velocity(&self, g: &mut Graph<'_, T>, x_t: Var, t: &[T], cond: Var) -> Result<Var> {
        let xs = g.shape(x_t).to_vec();
        let cs = g.shape(cond).to_vec();
        if xs.len() != 3 || cs.len() != 3 || xs[0] != t.len() || cs[0] != t.len() {
            return Err(Error::ShapeMismatch(format!("x_t {xs:?}, cond {cs:?}, {} times", t.len())));
        }
        if xs[1] != cs[1] * self.cfg.upsample_factor || xs[2] != self.cfg.motion_dim {
            return Err(Error::ShapeMismatch(format!("x_t {xs:?} against cond {cs:?}")));
        }
        let (b, frames) = (xs[0], xs[1]);
        let h = self.cfg.hidden;

        let mu = self.cond_proj.forward(g, cond);
        let mu = g.upsample(mu, self.cfg.upsample_factor);
        let inp = g.concat_cols(&[x_t, mu]);
        let x = self.input.forward(g, inp);

        let times: Vec<f64> = t.iter().map(|t| t.as_f64() * TIME_SCALE).collect();
        let temb = g.constant(sinusoidal(&times, self.cfg.time_dim, 10_000.0));
        let temb = self.time1.forward(g, temb);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, temb);
        let temb = g.silu(temb);

        let skip = self.res_in.forward(g, x, temb);
        let d = self.down.forward(g, skip);
        let d = self.res_mid.forward(g, d, temb);
        let half = frames / 2;
        let flat = g.reshape(d, &[b * half, h]);
        let segs: Vec<_> = (0..b).map(|i| AttnSegment::square(i * half, half)).collect();
        let a = self.attn.ln1.forward(g, flat);
        let a = self.attn.attn.forward(g, a, a, &segs, false);
        let flat = g.add(flat, a);
        let f = self.attn.ln2.forward(g, flat);
        let f = self.attn.ffn.forward(g, f);
        let flat = g.add(flat, f);
        let d = g.reshape(flat, &[b, half, h]);

        let u = g.upsample(d, 2);
        let u = g.concat_cols(&[u, skip]);
        let u = self.merge.forward(g, u);
        let u = self.res_out.forward(g, u, temb);
        let u = self.out_ln.forward(g, u);
        let u = g.silu(u);
        let out = self.output.forward(g, u);
        let gate = self.skip_gate.forward(g, temb);
        let gate = g.reshape(gate, &[b, 1, self.cfg.motion_dim]);
        let gate = g.upsample(gate, frames);
        let skip = g.mul(gate, x_t);
        Ok(g.add(out, skip))
    }
}

/// Conditioning sequence file: magic, version, rows, width (u32 LE each),
/// then `rows * width` little-endian f32 values.
pub fn conditioning_to_bytes<T: Scalar>(c: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * c.len());
    out.extend_from_slice(COND_MAGIC);
    out.extend_from_slice(&COND_VERSION.to_le_bytes());
    out.extend_from_slice(&(c.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(c.cols() as u32).to_le_bytes());
    for v in c.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn conditioning_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 20 || &bytes[..8] != COND_MAGIC {
        return Err(Error::Format("not a conditioning file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(8) != COND_VERSION as usize {
        return Err(Error::VersionMismatch(format!("conditioning version {}", word(8))));
    }
    let (rows, cols) = (word(12), word(16));
    let body = &bytes[20..];
    if Some(body.len()) != rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) {
        return Err(Error::Format(format!("{} value bytes for {rows}x{cols}", body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(Tensor::new(vec![rows, cols], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::MotionFrame;
    use crate::rotation::{axis_angle_to_matrix, matrix_to_rot6d, AxisAngle};

    fn tiny() -> FlowConfig {
        FlowConfig {
            cond_dim: 3,
            hidden: 8,
            heads: 2,
            time_dim: 4,
            ..FlowConfig::desk(3)
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let net = FlowNet::<f64>::new(tiny(), 1).unwrap();
        let cond = Tensor::new(vec![5, 3], (0..15).map(|i| i as f64 * 0.1).collect());
        let cfg = FlowConfig {
            sampling_steps: 3,
            ..tiny()
        };
        let net = FlowNet { cfg, ..net };
        let m = net.sample(&cond, 2).unwrap();
        assert_eq!(m.num_frames(), 20);
        assert_eq!(m.frame_rate(), MOTION_FPS);
        assert_eq!(m, net.sample(&cond, 2).unwrap());
    }

    #[test]
    fn quarter_turn_everywhere_costs_quarter_pi_squared() {
        let rest: Vec<f64> = frame_rows(&MotionFrame::rest(), 3);
        let turn = matrix_to_rot6d(&axis_angle_to_matrix(AxisAngle([0.0, PI / 2.0, 0.0])));
        let mut f = MotionFrame::rest();
        f.joints = [turn; NUM_JOINTS];
        let rotated = frame_rows(&f, 3);
        let (v, _) = geodesic_term(&rotated, &rest);
        assert!((v - (PI / 2.0).powi(2)).abs() < 1e-9);
        assert_eq!(geodesic_term(&rest, &rest).0, 0.0);
        let zeros = vec![0.0; rest.len()];
        assert!((geodesic_term(&zeros, &rest).0 - PI * PI).abs() < 1e-12);
    }

    fn frame_rows(f: &MotionFrame<f64>, n: usize) -> Vec<f64> {
        (0..n).flat_map(|_| crate::motion::frame_to_feature(f)).collect()
    }

    #[test]
    fn conditioning_file_roundtrip() {
        let c = Tensor::new(vec![2, 3], vec![0.5f32, -1.0, 2.0, 0.0, 3.25, 1e-3]);
        let bytes = conditioning_to_bytes(&c);
        assert_eq!(conditioning_from_bytes::<f32>(&bytes).unwrap(), c);
        for cut in 0..bytes.len() {
            assert!(conditioning_from_bytes::<f32>(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = FlowNet::<f32>::new(tiny(), 4).unwrap();
        let bytes = net.to_checkpoint().to_bytes();
        let back = FlowNet::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }
}
