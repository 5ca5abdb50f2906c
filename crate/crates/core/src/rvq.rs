//! Residual vector-quantized motion autoencoder.
//!
//! The encoder maps 20 fps motion to 5 Hz latents with two stride-2
//! convolutions; each quantizer level encodes the residual left by the levels
//! before it. Codebooks learn by exponential moving average, the
//! encoder/decoder by gradient with a straight-through copy across the
//! quantizer. Entry 0 of every level is pinned to the zero vector, so picking
//! it leaves the residual unchanged and residual energy can never grow.

use gelina_tensor::nn::Conv1d;
use gelina_tensor::{AdamW, Checkpoint, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artifact::{load_store, parse_key, push_store};
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, FEATURE_DIM, MOTION_FPS};

pub const CHECKPOINT_KIND: &str = "gesture-tokenizer";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Motion frames per gesture token (20 fps → 5 Hz).
pub const DOWNSAMPLE_FACTOR: usize = 4;
pub const GESTURE_TOKEN_RATE: f64 = MOTION_FPS / DOWNSAMPLE_FACTOR as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct RvqConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub downsample_factor: usize,
    /// Channel width of the convolutional stacks.
    pub hidden: usize,
    pub ema_decay: f64,
    /// Steps without a hit before an entry is reseeded.
    pub dead_after: u32,
    pub commitment_weight: f64,
    pub velocity_weight: f64,
}

impl RvqConfig {
    pub fn full_scale() -> Self {
        Self {
            levels: 6,
            codebook_size: 512,
            latent_dim: 512,
            hidden: 512,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            levels: 4,
            codebook_size: 64,
            latent_dim: 32,
            downsample_factor: DOWNSAMPLE_FACTOR,
            hidden: 64,
            ema_decay: 0.99,
            dead_after: 256,
            commitment_weight: 0.25,
            velocity_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor != DOWNSAMPLE_FACTOR {
            return Err(Error::Config(format!(
                "downsample_factor must be {DOWNSAMPLE_FACTOR} (20 fps motion, 5 Hz tokens), got {}",
                self.downsample_factor
            )));
        }
        if self.codebook_size < 2 || self.levels == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("degenerate quantizer config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} not in [0, 1)", self.ema_decay)));
        }
        Ok(())
    }
}

/// Per-level token indices, all levels of equal length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GestureTokens {
    pub levels: Vec<Vec<usize>>,
}

impl GestureTokens {
    /// Single-level tokens, as exported to the backbone.
    pub fn single(ids: Vec<usize>) -> Self {
        Self { levels: vec![ids] }
    }

    pub fn len(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &[usize] {
        &self.levels[l]
    }

    /// Keep only the first `n` levels.
    pub fn truncate_levels(&self, n: usize) -> Self {
        Self {
            levels: self.levels[..n.min(self.levels.len())].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Codebook<T> {
    entries: Tensor<T>,
    counts: Vec<T>,
    sums: Tensor<T>,
    idle: Vec<u32>,
}

impl<T: Scalar> Codebook<T> {
    fn new(entries: Tensor<T>) -> Self {
        let size = entries.rows();
        Self {
            sums: entries.clone(),
            counts: vec![T::one(); size],
            idle: vec![0; size],
            entries,
        }
    }

    /// Nearest entry by squared distance; ties go to the lowest index.
    /// Returns the index and its distance.
    fn nearest(&self, v: &[T]) -> (usize, T) {
        let mut best = (0, T::infinity());
        for k in 0..self.entries.rows() {
            let d = sq_dist(v, self.entries.row(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Result of residual quantization of `n` latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<T> {
    pub tokens: GestureTokens,
    /// Sum of selected codewords, `n × latent_dim`.
    pub quantized: Vec<T>,
    /// Residual energy `Σ‖x − q₁ − … − q_ℓ‖²` after each level ℓ.
    pub residual_energy: Vec<T>,
    /// Input of each level (the residual it was asked to encode).
    level_inputs: Vec<Vec<T>>,
}

/// Residual codebook hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct RvqCodebooks<T> {
    books: Vec<Codebook<T>>,
    dim: usize,
}

impl<T: Scalar> RvqCodebooks<T> {
    /// Gaussian entries with the pinned zero codeword at index 0.
    pub fn random<R: Rng + ?Sized>(levels: usize, size: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let books = (0..levels)
            .map(|_| {
                let mut e = Tensor::randn(vec![size, dim], std, rng);
                e.row_mut(0).fill(T::zero());
                Codebook::new(e)
            })
            .collect();
        Self { books, dim }
    }

    pub fn num_levels(&self) -> usize {
        self.books.len()
    }

    pub fn size(&self) -> usize {
        self.books[0].entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, level: usize, k: usize) -> &[T] {
        self.books[level].entries.row(k)
    }

    /// Overwrite one entry. Entry 0 is pinned and cannot be set.
    pub fn set_entry(&mut self, level: usize, k: usize, v: &[T]) -> Result<()> {
        if k == 0 || k >= self.size() {
            return Err(Error::IndexOutOfRange {
                index: k,
                bound: self.size(),
            });
        }
        if v.len() != self.dim {
            return Err(Error::LengthMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let b = &mut self.books[level];
        b.entries.row_mut(k).copy_from_slice(v);
        b.sums.row_mut(k).copy_from_slice(v);
        b.counts[k] = T::one();
        Ok(())
    }

    pub fn has_nan(&self) -> bool {
        self.books.iter().any(|b| !b.entries.is_finite())
    }

    /// Quantize `latents` (`n × dim`, row-major) with the first `levels` levels.
    pub fn quantize(&self, latents: &[T], levels: usize) -> Result<Quantized<T>> {
        if levels > self.books.len() {
            return Err(Error::Config(format!(
                "requested {levels} levels, codebooks have {}",
                self.books.len()
            )));
        }
        if !latents.len().is_multiple_of(self.dim) {
            return Err(Error::LengthNotDivisible {
                len: latents.len(),
                factor: self.dim,
            });
        }
        let n = latents.len() / self.dim;
        let mut residual = latents.to_vec();
        let mut quantized = vec![T::zero(); latents.len()];
        let mut tokens = Vec::with_capacity(levels);
        let mut energy = Vec::with_capacity(levels);
        let mut level_inputs = Vec::with_capacity(levels);
        for book in &self.books[..levels] {
            level_inputs.push(residual.clone());
            let mut ids = Vec::with_capacity(n);
            let mut total = T::zero();
            for i in 0..n {
                let r = &mut residual[i * self.dim..(i + 1) * self.dim];
                let (k, d) = book.nearest(r);
                let c = book.entries.row(k);
                for ((ri, qi), &ci) in r
                    .iter_mut()
                    .zip(&mut quantized[i * self.dim..(i + 1) * self.dim])
                    .zip(c)
                {
                    *ri -= ci;
                    *qi += ci;
                }
                total += d;
                ids.push(k);
            }
            tokens.push(ids);
            energy.push(total);
        }
        Ok(Quantized {
            tokens: GestureTokens { levels: tokens },
            quantized,
            residual_energy: energy,
            level_inputs,
        })
    }

    /// Sum of the codewords named by `tokens`, `n × dim`.
    pub fn lookup(&self, tokens: &GestureTokens) -> Result<Vec<T>> {
        if tokens.num_levels() > self.books.len() {
            return Err(Error::Config(format!(
                "{} token levels, codebooks have {}",
                tokens.num_levels(),
                self.books.len()
            )));
        }
        let n = tokens.len();
        let mut out = vec![T::zero(); n * self.dim];
        for (book, ids) in self.books.iter().zip(&tokens.levels) {
            if ids.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: ids.len(),
                });
            }
            for (i, &k) in ids.iter().enumerate() {
                if k >= book.entries.rows() {
                    return Err(Error::IndexOutOfRange {
                        index: k,
                        bound: book.entries.rows(),
                    });
                }
                for (o, &c) in out[i * self.dim..(i + 1) * self.dim]
                    .iter_mut()
                    .zip(book.entries.row(k))
                {
                    *o += c;
                }
            }
        }
        Ok(out)
    }

    /// Seed every non-pinned entry from distinct batch residuals, level by level.
    fn init_from<R: Rng + ?Sized>(&mut self, latents: &[T], rng: &mut R) {
        let n = latents.len() / self.dim;
        let mut residual = latents.to_vec();
        for l in 0..self.books.len() {
            let rows: Vec<usize> = (0..n).collect();
            for k in 1..self.size() {
                let i = *rows.choose(rng).expect("nonempty batch");
                let mut v = residual[i * self.dim..(i + 1) * self.dim].to_vec();
                // a small jitter keeps duplicate picks apart
                for x in &mut v {
                    *x += T::of(rng.random_range(-1e-3..1e-3));
                }
                let b = &mut self.books[l];
                b.entries.row_mut(k).copy_from_slice(&v);
                b.sums.row_mut(k).copy_from_slice(&v);
                b.counts[k] = T::one();
            }
            let q = self
                .quantize_level(l, &residual)
                .expect("level in range");
            residual = q;
        }
    }

    fn quantize_level(&self, l: usize, residual: &[T]) -> Result<Vec<T>> {
        let book = &self.books[l];
        Ok(residual
            .chunks(self.dim)
            .flat_map(|r| {
                let (k, _) = book.nearest(r);
                r.iter()
                    .zip(book.entries.row(k))
                    .map(|(&a, &c)| a - c)
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    /// EMA update of every level from a quantization of batch latents, then
    /// reseed entries idle for `dead_after` steps.
    fn ema_update<R: Rng + ?Sized>(&mut self, q: &Quantized<T>, decay: f64, dead_after: u32, rng: &mut R) {
        let dim = self.dim;
        let d = T::of(decay);
        let one_d = T::of(1.0 - decay);
        for (l, book) in self.books.iter_mut().enumerate() {
            let size = book.entries.rows();
            let inputs = &q.level_inputs[l];
            let ids = &q.tokens.levels[l];
            let mut hits = vec![0usize; size];
            let mut sums = vec![T::zero(); size * dim];
            for (i, &k) in ids.iter().enumerate() {
                hits[k] += 1;
                for (s, &x) in sums[k * dim..(k + 1) * dim]
                    .iter_mut()
                    .zip(&inputs[i * dim..(i + 1) * dim])
                {
                    *s += x;
                }
            }
            for k in 1..size {
                book.counts[k] = d * book.counts[k] + one_d * T::of_usize(hits[k]);
                for (s, &b) in book.sums.row_mut(k).iter_mut().zip(&sums[k * dim..(k + 1) * dim]) {
                    *s = d * *s + one_d * b;
                }
                if book.counts[k] > T::of(1e-8) {
                    let inv = T::one() / book.counts[k];
                    let (entries, sums) = (&mut book.entries, &book.sums);
                    for (e, &s) in entries.row_mut(k).iter_mut().zip(sums.row(k)) {
                        *e = s * inv;
                    }
                }
                book.idle[k] = if hits[k] > 0 { 0 } else { book.idle[k] + 1 };
                if book.idle[k] >= dead_after && !ids.is_empty() {
                    let i = rng.random_range(0..ids.len());
                    let v = &inputs[i * dim..(i + 1) * dim];
                    book.entries.row_mut(k).copy_from_slice(v);
                    book.sums.row_mut(k).copy_from_slice(v);
                    book.counts[k] = T::one();
                    book.idle[k] = 0;
                }
            }
        }
    }
}

/// Loss terms of one training step, as plain numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RvqLosses {
    /// Position L1 plus weighted velocity L1.
    pub reconstruction: f64,
    pub position: f64,
    pub velocity: f64,
    pub commitment: f64,
    pub total: f64,
}

/// Graph handles of one forward pass.
pub struct ForwardPass<T> {
    pub total: Var,
    pub reconstruction: Var,
    pub position: Var,
    pub velocity: Var,
    pub commitment: Var,
    /// Encoder output values, `[batch, tokens, latent_dim]`.
    pub latents: Tensor<T>,
    /// Latents after the quantizer (or after the fixed offset).
    pub quantized: Tensor<T>,
}

#[derive(Clone, Debug)]
struct Encoder {
    input: Conv1d,
    down: [Conv1d; 2],
    output: Conv1d,
}

#[derive(Clone, Debug)]
struct Decoder {
    input: Conv1d,
    up: [Conv1d; 2],
    output: Conv1d,
}

/// Gesture tokenizer: convolutional encoder, residual quantizer, decoder.
#[derive(Clone, Debug)]
pub struct GestureTokenizer<T: Scalar> {
    cfg: RvqConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
    books: RvqCodebooks<T>,
    books_ready: bool,
    steps: u64,
}

impl<T: Scalar> GestureTokenizer<T> {
    pub fn new(cfg: RvqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, l) = (cfg.hidden, cfg.latent_dim);
        let s = &mut store;
        let encoder = Encoder {
            input: Conv1d::same(s, "enc.in", FEATURE_DIM, h, 3, &mut rng),
            down: [
                Conv1d::new(s, "enc.down0", h, h, 4, 2, 1, &mut rng),
                Conv1d::new(s, "enc.down1", h, h, 4, 2, 1, &mut rng),
            ],
            output: Conv1d::same(s, "enc.out", h, l, 3, &mut rng),
        };
        let decoder = Decoder {
            input: Conv1d::same(s, "dec.in", l, h, 3, &mut rng),
            up: [
                Conv1d::same(s, "dec.up0", h, h, 3, &mut rng),
                Conv1d::same(s, "dec.up1", h, h, 3, &mut rng),
            ],
            output: Conv1d::same(s, "dec.out", h, FEATURE_DIM, 3, &mut rng),
        };
        let books = RvqCodebooks::random(cfg.levels, cfg.codebook_size, l, 1.0, &mut rng);
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
            books,
            books_ready: false,
            steps: 0,
        })
    }

    pub fn config(&self) -> &RvqConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Mutable parameters, for finite-difference probes.
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn codebooks(&self) -> &RvqCodebooks<T> {
        &self.books
    }

    pub fn codebooks_mut(&mut self) -> &mut RvqCodebooks<T> {
        self.books_ready = true;
        &mut self.books
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Encoder over `x[batch, frames, 157]` → `[batch, frames / 4, latent_dim]`.
    pub fn encode_graph(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let e = &self.encoder;
        let h = e.input.forward(g, x);
        let mut h = g.relu(h);
        for c in &e.down {
            let y = c.forward(g, h);
            h = g.relu(y);
        }
        e.output.forward(g, h)
    }

    /// Decoder over `z[batch, tokens, latent_dim]` → `[batch, tokens * 4, 157]`.
    pub fn decode_graph(&self, g: &mut Graph<'_, T>, z: Var) -> Var {
        let d = &self.decoder;
        let h = d.input.forward(g, z);
        let mut h = g.relu(h);
        for c in &d.up {
            let u = g.upsample(h, 2);
            let y = c.forward(g, u);
            h = g.relu(y);
        }
        d.output.forward(g, h)
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        if frames == 0 || !frames.is_multiple_of(self.cfg.downsample_factor) {
            return Err(Error::LengthNotDivisible {
                len: frames,
                factor: self.cfg.downsample_factor,
            });
        }
        Ok(())
    }

    /// Continuous 5 Hz latents, `[frames / 4, latent_dim]`.
    pub fn encode(&self, m: &MotionSequence<T>) -> Result<Tensor<T>> {
        self.check_frames(m.num_frames())?;
        let mut g = Graph::inference(&self.store);
        let x = g.constant(m.to_tensor().reshape(vec![1, m.num_frames(), FEATURE_DIM]));
        let z = self.encode_graph(&mut g, x);
        let n = m.num_frames() / self.cfg.downsample_factor;
        Ok(g.value(z).clone().reshape(vec![n, self.cfg.latent_dim]))
    }

    pub fn quantize(&self, latents: &Tensor<T>, levels: usize) -> Result<Quantized<T>> {
        self.books.quantize(latents.data(), levels)
    }

    /// Encode and quantize with `levels` levels.
    pub fn tokenize(&self, m: &MotionSequence<T>, levels: usize) -> Result<GestureTokens> {
        let z = self.encode(m)?;
        Ok(self.quantize(&z, levels)?.tokens)
    }

    /// Decode latents `[n, latent_dim]` to `4n` frames at 20 fps.
    pub fn decode_latents(&self, z: &[T]) -> Result<MotionSequence<T>> {
        let l = self.cfg.latent_dim;
        if z.is_empty() || !z.len().is_multiple_of(l) {
            return Err(Error::LengthNotDivisible {
                len: z.len(),
                factor: l,
            });
        }
        let n = z.len() / l;
        let mut g = Graph::inference(&self.store);
        let zv = g.constant(Tensor::new(vec![1, n, l], z.to_vec()));
        let x = self.decode_graph(&mut g, zv);
        MotionSequence::new(g.value(x).data().to_vec(), MOTION_FPS)
    }

    /// Sum the codewords of all given levels and decode.
    pub fn decode(&self, tokens: &GestureTokens) -> Result<MotionSequence<T>> {
        if tokens.is_empty() {
            return Err(Error::DegenerateInput("no gesture tokens"));
        }
        let z = self.books.lookup(tokens)?;
        self.decode_latents(&z)
    }

    /// Stack equal-length sequences into `[batch, frames, 157]`.
    pub fn batch_tensor(batch: &[MotionSequence<T>]) -> Result<Tensor<T>> {
        let first = batch
            .first()
            .ok_or(Error::DegenerateInput("empty batch"))?;
        let frames = first.num_frames();
        let mut data = Vec::with_capacity(batch.len() * frames * FEATURE_DIM);
        for m in batch {
            if m.num_frames() != frames {
                return Err(Error::LengthMismatch {
                    expected: frames,
                    got: m.num_frames(),
                });
            }
            data.extend_from_slice(m.data());
        }
        Ok(Tensor::new(vec![batch.len(), frames, FEATURE_DIM], data))
    }

    /// Build the loss graph for `batch[batch, frames, 157]`.
    ///
    /// With `offset = None` the quantizer runs and its correction `zq − ze`
    /// is added as a constant (straight-through). With `Some(o)` the constant
    /// `o` is added instead, which turns the bottleneck into an identity shift.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Tensor<T>,
        offset: Option<&Tensor<T>>,
    ) -> Result<ForwardPass<T>> {
        let frames = batch.shape()[1];
        self.check_frames(frames)?;
        let x = g.constant(batch.clone());
        let ze = self.encode_graph(g, x);
        let latents = g.value(ze).clone();
        let correction = match offset {
            Some(o) => {
                if o.shape() != latents.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "offset {:?} vs latents {:?}",
                        o.shape(),
                        latents.shape()
                    )));
                }
                o.clone()
            }
            None => {
                let q = self.books.quantize(latents.data(), self.cfg.levels)?;
                let diff = q
                    .quantized
                    .iter()
                    .zip(latents.data())
                    .map(|(&a, &b)| a - b)
                    .collect();
                Tensor::new(latents.shape().to_vec(), diff)
            }
        };
        let quantized = Tensor::new(
            latents.shape().to_vec(),
            latents
                .data()
                .iter()
                .zip(correction.data())
                .map(|(&a, &b)| a + b)
                .collect(),
        );
        let corr = g.constant(correction);
        let zst = g.add(ze, corr);
        let xr = self.decode_graph(g, zst);

        let diff = g.sub(xr, x);
        let abs = g.abs(diff);
        let position = g.mean_all(abs);
        let dxr = g.temporal_diff(xr);
        let dx = g.temporal_diff(x);
        let dv = g.sub(dxr, dx);
        let dv = g.abs(dv);
        let velocity = g.mean_all(dv);
        let wv = g.scale(velocity, T::of(self.cfg.velocity_weight));
        let reconstruction = g.add(position, wv);

        let target = g.constant(quantized.clone());
        let c = g.sub(ze, target);
        let c = g.square(c);
        let commitment = g.mean_all(c);
        let wc = g.scale(commitment, T::of(self.cfg.commitment_weight));
        let total = g.add(reconstruction, wc);
        Ok(ForwardPass {
            total,
            reconstruction,
            position,
            velocity,
            commitment,
            latents,
            quantized,
        })
    }

    /// One optimizer step plus the codebook EMA update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[MotionSequence<T>],
        opt: &mut AdamW<T>,
        lr: f64,
        rng: &mut R,
    ) -> Result<RvqLosses> {
        let x = Self::batch_tensor(batch)?;
        if !self.books_ready {
            let mut g = Graph::inference(&self.store);
            let xv = g.constant(x.clone());
            let z = self.encode_graph(&mut g, xv);
            let z = g.value(z).clone();
            self.books.init_from(z.data(), rng);
            self.books_ready = true;
        }
        let (grads, losses, latents) = {
            let mut g = Graph::new(&self.store);
            let pass = self.forward(&mut g, &x, None)?;
            let val = |v: Var| g.value(v).data()[0].as_f64();
            let losses = RvqLosses {
                reconstruction: val(pass.reconstruction),
                position: val(pass.position),
                velocity: val(pass.velocity),
                commitment: val(pass.commitment),
                total: val(pass.total),
            };
            if !losses.total.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "gesture tokenizer step {}: {losses:?}",
                    self.steps
                )));
            }
            (g.backward(pass.total), losses, pass.latents)
        };
        opt.step(&mut self.store, &grads, lr);
        let q = self.books.quantize(latents.data(), self.cfg.levels)?;
        self.books
            .ema_update(&q, self.cfg.ema_decay, self.cfg.dead_after, rng);
        self.steps += 1;
        Ok(losses)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, CHECKPOINT_VERSION);
        let c = &self.cfg;
        ck.set("levels", c.levels);
        ck.set("codebook_size", c.codebook_size);
        ck.set("latent_dim", c.latent_dim);
        ck.set("downsample_factor", c.downsample_factor);
        ck.set("hidden", c.hidden);
        ck.set("ema_decay", c.ema_decay);
        ck.set("dead_after", c.dead_after);
        ck.set("commitment_weight", c.commitment_weight);
        ck.set("velocity_weight", c.velocity_weight);
        ck.set("steps", self.steps);
        ck.set("books_ready", self.books_ready);
        push_store(&mut ck, &self.store);
        for (l, b) in self.books.books.iter().enumerate() {
            let k = b.counts.len();
            ck.push_tensor(format!("codebook.{l}.entries"), b.entries.clone());
            ck.push_tensor(format!("codebook.{l}.sums"), b.sums.clone());
            ck.push_tensor(format!("codebook.{l}.counts"), Tensor::new(vec![k], b.counts.clone()));
            ck.push_tensor(
                format!("codebook.{l}.idle"),
                Tensor::new(vec![k], b.idle.iter().map(|&v| T::of(v as f64)).collect()),
            );
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND || ck.kind_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "expected {CHECKPOINT_KIND} v{CHECKPOINT_VERSION}, found {} v{}",
                ck.kind, ck.kind_version
            )));
        }
        let cfg = RvqConfig {
            levels: parse_key(ck, "levels")?,
            codebook_size: parse_key(ck, "codebook_size")?,
            latent_dim: parse_key(ck, "latent_dim")?,
            downsample_factor: parse_key(ck, "downsample_factor")?,
            hidden: parse_key(ck, "hidden")?,
            ema_decay: parse_key(ck, "ema_decay")?,
            dead_after: parse_key(ck, "dead_after")?,
            commitment_weight: parse_key(ck, "commitment_weight")?,
            velocity_weight: parse_key(ck, "velocity_weight")?,
        };
        let mut me = Self::new(cfg, 0)?;
        load_store(ck, &mut me.store)?;
        me.steps = parse_key(ck, "steps")?;
        me.books_ready = parse_key(ck, "books_ready")?;
        let (size, dim) = (me.cfg.codebook_size, me.cfg.latent_dim);
        for (l, b) in me.books.books.iter_mut().enumerate() {
            let get = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
                let t = ck.tensor(&format!("codebook.{l}.{name}"))?;
                if t.shape() != shape {
                    return Err(Error::Format(format!("codebook.{l}.{name} has shape {:?}", t.shape())));
                }
                Ok(t.clone())
            };
            b.entries = get("entries", &[size, dim])?;
            b.sums = get("sums", &[size, dim])?;
            b.counts = get("counts", &[size])?.into_data();
            b.idle = get("idle", &[size])?
                .data()
                .iter()
                .map(|v| v.as_f64() as u32)
                .collect();
        }
        Ok(me)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RvqConfig {
        RvqConfig {
            levels: 3,
            codebook_size: 8,
            latent_dim: 4,
            hidden: 8,
            ..RvqConfig::desk()
        }
    }

    fn wave(frames: usize, phase: f64) -> MotionSequence<f64> {
        let data = (0..frames * FEATURE_DIM)
            .map(|i| {
                let (t, c) = (i / FEATURE_DIM, i % FEATURE_DIM);
                (0.3 * t as f64 + 0.07 * c as f64 + phase).sin() * 0.5
            })
            .collect();
        MotionSequence::new(data, MOTION_FPS).unwrap()
    }

    #[test]
    fn rate_contract() {
        let tok = GestureTokenizer::<f64>::new(tiny_cfg(), 1).unwrap();
        assert_eq!(tok.encode(&wave(80, 0.0)).unwrap().shape(), &[20, 4]);
        assert_eq!(tok.encode(&wave(4, 0.0)).unwrap().shape(), &[1, 4]);
        assert!(matches!(
            tok.encode(&wave(81, 0.0)),
            Err(Error::LengthNotDivisible { len: 81, factor: 4 })
        ));
        let tokens = GestureTokens::single(vec![1; 20]);
        assert_eq!(tok.decode(&tokens).unwrap().num_frames(), 80);
        assert!(matches!(
            tok.decode(&GestureTokens::single(vec![8])),
            Err(Error::IndexOutOfRange { index: 8, bound: 8 })
        ));
    }

    #[test]
    fn exact_codeword_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let books = RvqCodebooks::<f64>::random(3, 8, 4, 1.0, &mut rng);
        let q = books.quantize(books.entry(0, 5), 3).unwrap();
        assert_eq!(q.tokens.levels[0], vec![5]);
        assert_eq!(q.residual_energy[0], 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut books = RvqCodebooks::<f64>::random(1, 4, 2, 1.0, &mut rng);
        books.set_entry(0, 2, &[1.0, 0.0]).unwrap();
        books.set_entry(0, 3, &[1.0, 0.0]).unwrap();
        books.set_entry(0, 1, &[5.0, 5.0]).unwrap();
        let q = books.quantize(&[1.0, 0.0], 1).unwrap();
        assert_eq!(q.tokens.levels[0], vec![2]);
        assert!(books.set_entry(0, 0, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn zero_motion_training_is_finite_and_decreasing() {
        let mut tok = GestureTokenizer::<f64>::new(tiny_cfg(), 4).unwrap();
        let batch = vec![MotionSequence::new(vec![0.0; 8 * FEATURE_DIM], MOTION_FPS).unwrap(); 2];
        let mut opt = AdamW::new(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let first = tok.train_step(&batch, &mut opt, 1e-3, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..99 {
            last = tok.train_step(&batch, &mut opt, 1e-3, &mut rng).unwrap();
            assert!(last.total.is_finite());
        }
        assert!(last.total < first.total, "{} !< {}", last.total, first.total);
        assert!(!tok.codebooks().has_nan());
    }

    #[test]
    fn commitment_vanishes_at_codewords() {
        let tok = GestureTokenizer::<f64>::new(tiny_cfg(), 6).unwrap();
        let x = GestureTokenizer::batch_tensor(&[wave(8, 0.1)]).unwrap();
        let mut g = Graph::new(tok.params());
        let zero = Tensor::zeros(vec![1, 2, 4]);
        let pass = tok.forward(&mut g, &x, Some(&zero)).unwrap();
        assert_eq!(g.value(pass.commitment).data()[0], 0.0);
    }

    #[test]
    fn dead_entries_are_reseeded() {
        let cfg = RvqConfig {
            dead_after: 3,
            ..tiny_cfg()
        };
        let mut tok = GestureTokenizer::<f64>::new(cfg, 7).unwrap();
        let batch = vec![wave(8, 0.0)];
        let mut opt = AdamW::new(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            tok.train_step(&batch, &mut opt, 1e-3, &mut rng).unwrap();
        }
        assert!(!tok.codebooks().has_nan());
        assert!(tok
            .codebooks()
            .books
            .iter()
            .all(|b| b.idle.iter().all(|&i| i < 3)));
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let mut tok = GestureTokenizer::<f32>::new(
            RvqConfig {
                levels: 2,
                codebook_size: 4,
                latent_dim: 4,
                hidden: 8,
                ..RvqConfig::desk()
            },
            9,
        )
        .unwrap();
        let batch = vec![wave(8, 0.0).cast::<f32>()];
        let mut opt = AdamW::new(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        tok.train_step(&batch, &mut opt, 1e-3, &mut rng).unwrap();
        let bytes = tok.to_checkpoint().to_bytes();
        let back = GestureTokenizer::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
        let m = wave(8, 0.3).cast::<f32>();
        assert_eq!(back.tokenize(&m, 2).unwrap(), tok.tokenize(&m, 2).unwrap());
    }
}
