//! Encoder-decoder transformer over interleaved speech/gesture streams.
//!
//! A text encoder feeds a causal decoder through cross-attention. Each
//! modality has its own input embedding table and output head; the decoder
//! routes every position to the head of the slot it predicts (positional law
//! of [`crate::interleave`]). End of stream is scored by a one-logit control
//! head appended to the speech logits, since streams only end at speech slots.

use gelina_tensor::nn::{sinusoidal, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use gelina_tensor::{AdamW, AttnSegment, Checkpoint, Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artifact::{load_store, parse_key, push_store};
use crate::error::{Error, Result};
use crate::interleave::{
    mask_for_pretrain, slot_modality, LossMask, Modality, StreamEntry, TokenStream, BLOCK,
    CONTROL_VOCAB, SPEECH_PER_GESTURE,
};

pub const CHECKPOINT_KIND: &str = "backbone";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Text vocabulary (BPE size); one extra row holds the text start token.
    pub text_vocab: usize,
    pub text_encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub speech_vocab: usize,
    pub gesture_vocab: usize,
    pub control_vocab: usize,
    /// Maximum stream length including BOS.
    pub context_length: usize,
    pub dropout: f64,
}

impl BackboneConfig {
    pub fn full_scale() -> Self {
        Self {
            text_encoder_layers: 6,
            decoder_layers: 12,
            model_dim: 1024,
            heads: 16,
            speech_vocab: 4096,
            gesture_vocab: 512,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            text_vocab: 512,
            text_encoder_layers: 2,
            decoder_layers: 3,
            model_dim: 128,
            heads: 4,
            ffn_mult: 4,
            speech_vocab: 256,
            gesture_vocab: 64,
            control_vocab: CONTROL_VOCAB,
            context_length: 2048,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.speech_vocab < 2 || self.gesture_vocab < 2 || self.text_vocab < 2 {
            return Err(Error::Config("vocabulary sizes must be at least 2".into()));
        }
        if self.control_vocab != CONTROL_VOCAB {
            return Err(Error::Config(format!("control_vocab must be {CONTROL_VOCAB}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.speech_vocab > u16::MAX as usize || self.gesture_vocab > u16::MAX as usize {
            return Err(Error::Config("vocabulary exceeds the u16 stream format".into()));
        }
        Ok(())
    }
}

/// Logits predicting one stream slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotLogits<T> {
    /// Modality of the predicted slot.
    pub modality: Modality,
    /// Head logits; width is the modality's vocabulary.
    pub values: Vec<T>,
    /// End-of-stream logit, present at speech slots.
    pub eos: Option<T>,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// `logits[i]` predicts stream index `i + 1`.
    pub logits: Vec<SlotLogits<T>>,
    /// Final-layer hidden state per input position, `[positions, model_dim]`.
    pub hidden: Tensor<T>,
}

/// Per-modality training losses (mean negative log-likelihood per scored target).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneLosses {
    pub total: f64,
    pub speech: f64,
    pub gesture: f64,
    pub speech_targets: usize,
    pub gesture_targets: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_k: 50,
            seed: 0,
        }
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text: Vec<u32>,
    pub stream: TokenStream,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Backbone<T: Scalar> {
    cfg: BackboneConfig,
    store: ParamStore<T>,
    text_emb: Embedding,
    encoder: Vec<EncoderLayer>,
    encoder_ln: LayerNorm,
    speech_emb: Embedding,
    gesture_emb: Embedding,
    control_emb: Embedding,
    decoder: Vec<DecoderLayer>,
    decoder_ln: LayerNorm,
    speech_head: Linear,
    gesture_head: Linear,
    eos_head: Linear,
}

/// Cached keys/values for incremental decoding of one stream.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    cross: Vec<(Tensor<T>, Tensor<T>)>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    text_len: usize,
    len: usize,
}

impl<T> DecodeState<T> {
    /// Stream entries consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn linear_params(l: &Linear) -> Vec<gelina_tensor::ParamId> {
    std::iter::once(l.weight).chain(l.bias).collect()
}

/// Index of the end-of-stream label inside speech-slot logits.
fn eos_label(speech_vocab: usize) -> usize {
    speech_vocab
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = cfg.model_dim;
        let hidden = d * cfg.ffn_mult;
        let text_emb = Embedding::new(s, "text_emb", cfg.text_vocab + 1, d, &mut rng);
        let encoder = (0..cfg.text_encoder_layers)
            .map(|i| EncoderLayer {
                ln1: LayerNorm::new(s, &format!("enc{i}.ln1"), d),
                attn: MultiHeadAttention::new(s, &format!("enc{i}.attn"), d, cfg.heads, &mut rng),
                ln2: LayerNorm::new(s, &format!("enc{i}.ln2"), d),
                ffn: FeedForward::new(s, &format!("enc{i}.ffn"), d, hidden, &mut rng),
            })
            .collect();
        let encoder_ln = LayerNorm::new(s, "enc.ln_f", d);
        let speech_emb = Embedding::new(s, "speech_emb", cfg.speech_vocab, d, &mut rng);
        let gesture_emb = Embedding::new(s, "gesture_emb", cfg.gesture_vocab, d, &mut rng);
        let control_emb = Embedding::new(s, "control_emb", cfg.control_vocab, d, &mut rng);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer {
                ln1: LayerNorm::new(s, &format!("dec{i}.ln1"), d),
                self_attn: MultiHeadAttention::new(s, &format!("dec{i}.self"), d, cfg.heads, &mut rng),
                ln2: LayerNorm::new(s, &format!("dec{i}.ln2"), d),
                cross_attn: MultiHeadAttention::new(s, &format!("dec{i}.cross"), d, cfg.heads, &mut rng),
                ln3: LayerNorm::new(s, &format!("dec{i}.ln3"), d),
                ffn: FeedForward::new(s, &format!("dec{i}.ffn"), d, hidden, &mut rng),
            })
            .collect();
        let decoder_ln = LayerNorm::new(s, "dec.ln_f", d);
        // small head init keeps initial predictions close to uniform
        let speech_head = Linear::with_std(s, "speech_head", d, cfg.speech_vocab, true, 0.02, &mut rng);
        let gesture_head = Linear::with_std(s, "gesture_head", d, cfg.gesture_vocab, true, 0.02, &mut rng);
        let eos_head = Linear::with_std(s, "eos_head", d, 1, true, 0.02, &mut rng);
        Ok(Self {
            cfg,
            store,
            text_emb,
            encoder,
            encoder_ln,
            speech_emb,
            gesture_emb,
            control_emb,
            decoder,
            decoder_ln,
            speech_head,
            gesture_head,
            eos_head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Parameter ids of the gesture output head.
    pub fn gesture_head_params(&self) -> Vec<gelina_tensor::ParamId> {
        linear_params(&self.gesture_head)
    }

    pub fn speech_head_params(&self) -> Vec<gelina_tensor::ParamId> {
        linear_params(&self.speech_head)
    }

    fn text_ids(&self, text: &[u32]) -> Result<Vec<usize>> {
        let start = self.cfg.text_vocab;
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(start);
        for &t in text {
            if t as usize >= self.cfg.text_vocab {
                return Err(Error::IndexOutOfRange {
                    index: t as usize,
                    bound: self.cfg.text_vocab,
                });
            }
            ids.push(t as usize);
        }
        Ok(ids)
    }

    /// Row of the concatenated `[speech; gesture; control]` embedding table.
    fn entry_row(&self, e: &StreamEntry) -> Result<usize> {
        let (off, bound) = match e.modality {
            Modality::Speech => (0, self.cfg.speech_vocab),
            Modality::Gesture => (self.cfg.speech_vocab, self.cfg.gesture_vocab),
            Modality::Bos | Modality::Eos => (
                self.cfg.speech_vocab + self.cfg.gesture_vocab,
                self.cfg.control_vocab,
            ),
        };
        if e.token >= bound {
            return Err(Error::IndexOutOfRange {
                index: e.token,
                bound,
            });
        }
        Ok(off + e.token)
    }

    fn dropout(&self, g: &mut Graph<'_, T>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let p = self.cfg.dropout;
        let Some(rng) = rng.as_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask));
        g.mul(x, m)
    }

    /// Encoder over several texts packed row-wise. Returns the output and
    /// the row range of each text.
    fn encode_texts(
        &self,
        g: &mut Graph<'_, T>,
        texts: &[Vec<usize>],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> (Var, Vec<AttnSegment>) {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::new();
        for t in texts {
            segs.push(AttnSegment::square(ids.len(), t.len()));
            ids.extend_from_slice(t);
            pos.extend((0..t.len()).map(|p| p as f64));
        }
        let d = self.cfg.model_dim;
        let e = self.text_emb.forward(g, &ids);
        let pe = g.constant(sinusoidal(&pos, d, MAX_PERIOD));
        let mut x = g.add(e, pe);
        for l in &self.encoder {
            let h = l.ln1.forward(g, x);
            let a = l.attn.forward(g, h, h, &segs, false);
            let a = self.dropout(g, a, rng);
            x = g.add(x, a);
            let h = l.ln2.forward(g, x);
            let f = l.ffn.forward(g, h);
            let f = self.dropout(g, f, rng);
            x = g.add(x, f);
        }
        (self.encoder_ln.forward(g, x), segs)
    }

    fn stream_table(&self, g: &mut Graph<'_, T>) -> Var {
        let s = g.param(self.speech_emb.table);
        let ge = g.param(self.gesture_emb.table);
        let c = g.param(self.control_emb.table);
        g.concat_rows(&[s, ge, c])
    }

    /// Decoder over packed streams (inputs only), final-layer hidden states.
    fn decode_streams(
        &self,
        g: &mut Graph<'_, T>,
        enc: Var,
        enc_segs: &[AttnSegment],
        inputs: &[&[StreamEntry]],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut rows = Vec::new();
        let mut pos = Vec::new();
        let mut self_segs = Vec::new();
        let mut cross_segs = Vec::new();
        for (inp, es) in inputs.iter().zip(enc_segs) {
            let start = rows.len();
            for (i, e) in inp.iter().enumerate() {
                rows.push(self.entry_row(e)?);
                pos.push(i as f64);
            }
            self_segs.push(AttnSegment::square(start, inp.len()));
            cross_segs.push(AttnSegment {
                q_start: start,
                q_len: inp.len(),
                k_start: es.q_start,
                k_len: es.q_len,
            });
        }
        let table = self.stream_table(g);
        let e = g.gather_rows(table, &rows);
        let pe = g.constant(sinusoidal(&pos, self.cfg.model_dim, MAX_PERIOD));
        let mut x = g.add(e, pe);
        for l in &self.decoder {
            let h = l.ln1.forward(g, x);
            let a = l.self_attn.forward(g, h, h, &self_segs, true);
            let a = self.dropout(g, a, rng);
            x = g.add(x, a);
            let h = l.ln2.forward(g, x);
            let c = l.cross_attn.forward(g, h, enc, &cross_segs, false);
            let c = self.dropout(g, c, rng);
            x = g.add(x, c);
            let h = l.ln3.forward(g, x);
            let f = l.ffn.forward(g, h);
            let f = self.dropout(g, f, rng);
            x = g.add(x, f);
        }
        Ok(self.decoder_ln.forward(g, x))
    }

    fn check_context(&self, len: usize) -> Result<()> {
        if len > self.cfg.context_length {
            return Err(Error::ContextOverflow {
                len,
                max: self.cfg.context_length,
            });
        }
        Ok(())
    }

    /// Teacher-forced pass over a stream prefix (BOS first, EOS allowed last).
    pub fn forward(&self, text: &[u32], prefix: &TokenStream) -> Result<StepOutput<T>> {
        self.check_context(prefix.len())?;
        if prefix.entries.first().map(|e| e.modality) != Some(Modality::Bos) {
            return Err(Error::MalformedStream(0));
        }
        let mut g = Graph::inference(&self.store);
        let text = self.text_ids(text)?;
        let (enc, segs) = self.encode_texts(&mut g, &[text], &mut None);
        let h = self.decode_streams(&mut g, enc, &segs, &[&prefix.entries], &mut None)?;
        let hidden = g.value(h).clone();
        let logits = (0..prefix.len())
            .map(|i| self.slot_logits(hidden.row(i), slot_modality(i + 1)))
            .collect();
        Ok(StepOutput { logits, hidden })
    }

    fn head(&self, head: &Linear, h: &[T]) -> Vec<T> {
        let mut g = Graph::inference(&self.store);
        let x = g.constant(Tensor::new(vec![1, h.len()], h.to_vec()));
        let y = head.forward(&mut g, x);
        g.value(y).data().to_vec()
    }

    fn slot_logits(&self, h: &[T], modality: Modality) -> SlotLogits<T> {
        match modality {
            Modality::Gesture => SlotLogits {
                modality,
                values: self.head(&self.gesture_head, h),
                eos: None,
            },
            _ => SlotLogits {
                modality: Modality::Speech,
                values: self.head(&self.speech_head, h),
                eos: Some(self.head(&self.eos_head, h)[0]),
            },
        }
    }

    /// Build the next-token loss over a batch. `masks[b][i]` false drops the
    /// target at stream index `i`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[Example],
        masks: Option<&[LossMask]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var, Var, usize, usize)> {
        if batch.is_empty() {
            return Err(Error::DegenerateInput("empty batch"));
        }
        let texts = batch
            .iter()
            .map(|e| self.text_ids(&e.text))
            .collect::<Result<Vec<_>>>()?;
        let mut inputs = Vec::with_capacity(batch.len());
        for e in batch {
            e.stream
                .validate_vocab(self.cfg.speech_vocab, self.cfg.gesture_vocab)?;
            self.check_context(e.stream.len())?;
            inputs.push(&e.stream.entries[..e.stream.len() - 1]);
        }
        let (enc, segs) = self.encode_texts(g, &texts, &mut rng);
        let h = self.decode_streams(g, enc, &segs, &inputs, &mut rng)?;

        let (mut s_rows, mut s_tgt, mut s_w) = (Vec::new(), Vec::new(), Vec::new());
        let (mut g_rows, mut g_tgt, mut g_w) = (Vec::new(), Vec::new(), Vec::new());
        let mut row = 0;
        for (b, e) in batch.iter().enumerate() {
            for i in 1..e.stream.len() {
                let target = e.stream.entries[i];
                let keep = masks.is_none_or(|m| m[b].0[i]);
                let w = if keep { T::one() } else { T::zero() };
                match target.modality {
                    Modality::Gesture => {
                        g_rows.push(row);
                        g_tgt.push(target.token);
                        g_w.push(w);
                    }
                    Modality::Speech => {
                        s_rows.push(row);
                        s_tgt.push(target.token);
                        s_w.push(w);
                    }
                    Modality::Eos => {
                        s_rows.push(row);
                        s_tgt.push(eos_label(self.cfg.speech_vocab));
                        s_w.push(w);
                    }
                    Modality::Bos => return Err(Error::MalformedStream(i - 1)),
                }
                row += 1;
            }
        }
        let n_s = s_w.iter().filter(|&&w| w != T::zero()).count();
        let n_g = g_w.iter().filter(|&&w| w != T::zero()).count();
        let zero = g.constant(Tensor::scalar(T::zero()));
        let speech = if s_rows.is_empty() {
            zero
        } else {
            let hs = g.gather_rows(h, &s_rows);
            let ls = self.speech_head.forward(g, hs);
            let le = self.eos_head.forward(g, hs);
            let logits = g.concat_cols(&[ls, le]);
            g.cross_entropy(logits, &s_tgt, &s_w)
        };
        let gesture = if g_rows.is_empty() {
            zero
        } else {
            let hg = g.gather_rows(h, &g_rows);
            let lg = self.gesture_head.forward(g, hg);
            g.cross_entropy(lg, &g_tgt, &g_w)
        };
        let sum = g.add(speech, gesture);
        let total = g.scale(sum, T::one() / T::of_usize((n_s + n_g).max(1)));
        Ok((total, speech, gesture, n_s, n_g))
    }

    fn step_with(
        &mut self,
        opt: &mut AdamW<T>,
        lr: f64,
        batch: &[Example],
        masks: Option<&[LossMask]>,
        dropout_seed: u64,
    ) -> Result<BackboneLosses> {
        let (grads, losses) = {
            let mut g = Graph::new(&self.store);
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let (total, s, ge, n_s, n_g) = self.loss_graph(&mut g, batch, masks, Some(&mut rng))?;
            let val = |v: Var| g.value(v).data()[0].as_f64();
            let losses = BackboneLosses {
                total: val(total),
                speech: val(s) / n_s.max(1) as f64,
                gesture: val(ge) / n_g.max(1) as f64,
                speech_targets: n_s,
                gesture_targets: n_g,
            };
            if !losses.total.is_finite() {
                return Err(Error::NonFiniteLoss(format!("backbone: {losses:?}")));
            }
            (g.backward(total), losses)
        };
        opt.step(&mut self.store, &grads, lr);
        Ok(losses)
    }

    /// Gradients of the pretraining loss without an optimizer step.
    pub fn pretrain_gradients(
        &self,
        batch: &[Example],
        mask_seed: u64,
    ) -> Result<(f64, gelina_tensor::Gradients<T>)> {
        let (masked, masks) = self.pretrain_batch(batch, mask_seed);
        let mut g = Graph::new(&self.store);
        let (total, ..) = self.loss_graph(&mut g, &masked, Some(&masks), None)?;
        Ok((g.value(total).data()[0].as_f64(), g.backward(total)))
    }

    /// Gradients of the fine-tuning loss without an optimizer step.
    pub fn finetune_gradients(&self, batch: &[Example]) -> Result<(f64, gelina_tensor::Gradients<T>)> {
        let mut g = Graph::new(&self.store);
        let (total, ..) = self.loss_graph(&mut g, batch, None, None)?;
        Ok((g.value(total).data()[0].as_f64(), g.backward(total)))
    }

    fn pretrain_batch(&self, batch: &[Example], mask_seed: u64) -> (Vec<Example>, Vec<LossMask>) {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
        self.masked_batch(batch, &seeds)
    }

    fn masked_batch(&self, batch: &[Example], seeds: &[u64]) -> (Vec<Example>, Vec<LossMask>) {
        batch
            .iter()
            .zip(seeds)
            .map(|(e, &seed)| {
                let (stream, mask) = mask_for_pretrain(&e.stream, self.cfg.gesture_vocab, seed);
                (
                    Example {
                        text: e.text.clone(),
                        stream,
                    },
                    mask,
                )
            })
            .unzip()
    }

    /// Text-speech stage: gesture tokens are replaced by random draws and
    /// dropped from the loss.
    pub fn pretrain_step(
        &mut self,
        batch: &[Example],
        opt: &mut AdamW<T>,
        lr: f64,
        mask_seed: u64,
    ) -> Result<BackboneLosses> {
        let (masked, masks) = self.pretrain_batch(batch, mask_seed);
        self.step_with(opt, lr, &masked, Some(&masks), mask_seed ^ 0x5eed)
    }

    /// Pretraining step with one explicit mask seed per example, so a caller
    /// can keep each example's replacement gestures fixed across epochs.
    pub fn pretrain_step_seeded(
        &mut self,
        batch: &[Example],
        example_seeds: &[u64],
        opt: &mut AdamW<T>,
        lr: f64,
        dropout_seed: u64,
    ) -> Result<BackboneLosses> {
        if example_seeds.len() != batch.len() {
            return Err(Error::LengthMismatch {
                expected: batch.len(),
                got: example_seeds.len(),
            });
        }
        let (masked, masks) = self.masked_batch(batch, example_seeds);
        self.step_with(opt, lr, &masked, Some(&masks), dropout_seed)
    }

    /// Paired stage: every non-BOS target is scored by its own head.
    pub fn finetune_step(
        &mut self,
        batch: &[Example],
        opt: &mut AdamW<T>,
        lr: f64,
        dropout_seed: u64,
    ) -> Result<BackboneLosses> {
        self.step_with(opt, lr, batch, None, dropout_seed)
    }

    /// Encode the text and cache cross-attention keys/values.
    pub fn start_decoding(&self, text: &[u32]) -> Result<DecodeState<T>> {
        let ids = self.text_ids(text)?;
        let mut g = Graph::inference(&self.store);
        let (enc, _) = self.encode_texts(&mut g, std::slice::from_ref(&ids), &mut None);
        let cross = self
            .decoder
            .iter()
            .map(|l| {
                let k = l.cross_attn.k.forward(&mut g, enc);
                let v = l.cross_attn.v.forward(&mut g, enc);
                (g.value(k).clone(), g.value(v).clone())
            })
            .collect();
        Ok(DecodeState {
            cross,
            keys: vec![Vec::new(); self.decoder.len()],
            values: vec![Vec::new(); self.decoder.len()],
            text_len: ids.len(),
            len: 0,
        })
    }

    /// Feed one entry; returns its final-layer hidden state.
    pub fn decode_step(&self, state: &mut DecodeState<T>, entry: &StreamEntry) -> Result<Vec<T>> {
        self.check_context(state.len + 1)?;
        let d = self.cfg.model_dim;
        let mut g = Graph::inference(&self.store);
        let table = self.stream_table(&mut g);
        let e = g.gather_rows(table, &[self.entry_row(entry)?]);
        let pe = g.constant(sinusoidal(&[state.len as f64], d, MAX_PERIOD));
        let mut x = g.add(e, pe);
        let n = state.len + 1;
        for (li, l) in self.decoder.iter().enumerate() {
            let h = l.ln1.forward(&mut g, x);
            let q = l.self_attn.q.forward(&mut g, h);
            let k = l.self_attn.k.forward(&mut g, h);
            let v = l.self_attn.v.forward(&mut g, h);
            state.keys[li].extend_from_slice(g.value(k).data());
            state.values[li].extend_from_slice(g.value(v).data());
            let kc = g.constant(Tensor::new(vec![n, d], state.keys[li].clone()));
            let vc = g.constant(Tensor::new(vec![n, d], state.values[li].clone()));
            let seg = [AttnSegment {
                q_start: 0,
                q_len: 1,
                k_start: 0,
                k_len: n,
            }];
            let a = g.attention(q, kc, vc, l.self_attn.heads, &seg, true);
            let a = l.self_attn.o.forward(&mut g, a);
            x = g.add(x, a);
            let h = l.ln2.forward(&mut g, x);
            let q = l.cross_attn.q.forward(&mut g, h);
            let (ck, cv) = &state.cross[li];
            let ck = g.constant(ck.clone());
            let cv = g.constant(cv.clone());
            let seg = [AttnSegment {
                q_start: 0,
                q_len: 1,
                k_start: 0,
                k_len: state.text_len,
            }];
            let c = g.attention(q, ck, cv, l.cross_attn.heads, &seg, false);
            let c = l.cross_attn.o.forward(&mut g, c);
            x = g.add(x, c);
            let h = l.ln3.forward(&mut g, x);
            let f = l.ffn.forward(&mut g, h);
            x = g.add(x, f);
        }
        let out = self.decoder_ln.forward(&mut g, x);
        state.len = n;
        Ok(g.value(out).data().to_vec())
    }

    /// Sample a stream for `text`, stopping at EOS or after `max_len` body
    /// entries (a pending gesture slot is still filled, then EOS is appended
    /// and the stream is flagged truncated).
    pub fn generate(&self, text: &[u32], sampling: Sampling, max_len: usize) -> Result<TokenStream> {
        self.continue_stream(text, TokenStream::start(), sampling, max_len, None)
    }

    /// Continue after a speech/gesture prompt. The prompt body must consist of
    /// whole 16-entry blocks; the returned stream excludes the prompt.
    pub fn generate_cloned(
        &self,
        text: &[u32],
        prompt_text: &[u32],
        prompt: &TokenStream,
        sampling: Sampling,
        max_len: usize,
    ) -> Result<TokenStream> {
        if prompt.is_terminated() {
            return Err(Error::MalformedStream(prompt.len() - 2));
        }
        prompt.validate_vocab(self.cfg.speech_vocab, self.cfg.gesture_vocab)?;
        let body = prompt.body().len();
        if !body.is_multiple_of(BLOCK) {
            return Err(Error::MalformedStream(body - body % BLOCK));
        }
        let mut full_text = prompt_text.to_vec();
        full_text.extend_from_slice(text);
        let out = self.continue_stream(&full_text, prompt.clone(), sampling, max_len, None)?;
        let mut entries = vec![StreamEntry::bos()];
        entries.extend_from_slice(&out.entries[1 + body..]);
        Ok(TokenStream {
            entries,
            truncated: out.truncated,
        })
    }

    /// Speech-to-gesture: speech slots are teacher-forced, gesture slots sampled.
    pub fn generate_s2g(&self, text: &[u32], speech: &[usize], sampling: Sampling) -> Result<Vec<usize>> {
        if !speech.len().is_multiple_of(SPEECH_PER_GESTURE) {
            return Err(Error::RatioMismatch {
                expected: speech.len() - speech.len() % SPEECH_PER_GESTURE,
                got: speech.len(),
            });
        }
        if let Some(&bad) = speech.iter().find(|&&s| s >= self.cfg.speech_vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                bound: self.cfg.speech_vocab,
            });
        }
        let out = self.continue_stream(
            text,
            TokenStream::start(),
            sampling,
            usize::MAX,
            Some(speech),
        )?;
        Ok(out
            .body()
            .iter()
            .filter(|e| e.modality == Modality::Gesture)
            .map(|e| e.token)
            .collect())
    }

    fn continue_stream(
        &self,
        text: &[u32],
        prefix: TokenStream,
        sampling: Sampling,
        max_len: usize,
        forced_speech: Option<&[usize]>,
    ) -> Result<TokenStream> {
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut state = self.start_decoding(text)?;
        let mut entries = prefix.entries;
        let prompt_body = entries.len() - 1;
        let mut hidden = Vec::new();
        for e in &entries {
            hidden = self.decode_step(&mut state, e)?;
        }
        let mut forced = forced_speech.map(|s| s.iter());
        let mut truncated = false;
        loop {
            let slot = slot_modality(entries.len());
            let generated = entries.len() - 1 - prompt_body;
            if generated >= max_len && slot != Modality::Gesture {
                truncated = true;
                entries.push(StreamEntry::eos());
                break;
            }
            if entries.len() + 1 > self.cfg.context_length {
                return Err(Error::ContextOverflow {
                    len: entries.len() + 1,
                    max: self.cfg.context_length,
                });
            }
            let logits = self.slot_logits(&hidden, slot);
            let next = match (slot, forced.as_mut()) {
                (Modality::Gesture, _) => {
                    StreamEntry::gesture(sample(&logits.values, sampling, &mut rng))
                }
                (_, Some(it)) => match it.next() {
                    Some(&s) => StreamEntry::speech(s),
                    None => {
                        entries.push(StreamEntry::eos());
                        break;
                    }
                },
                (_, None) => {
                    let mut all = logits.values.clone();
                    all.push(logits.eos.expect("speech slot has an EOS logit"));
                    let k = sample(&all, sampling, &mut rng);
                    if k == eos_label(self.cfg.speech_vocab) {
                        entries.push(StreamEntry::eos());
                        break;
                    }
                    StreamEntry::speech(k)
                }
            };
            entries.push(next);
            hidden = self.decode_step(&mut state, &next)?;
        }
        Ok(TokenStream { entries, truncated })
    }

    /// Final-layer hidden states at the gesture entries of `stream`, one row
    /// per gesture token: the flow decoder's conditioning.
    pub fn conditioning(&self, text: &[u32], stream: &TokenStream) -> Result<Tensor<T>> {
        let mut inputs = stream.clone();
        if inputs.is_terminated() {
            inputs.entries.pop();
        }
        let out = self.forward(text, &inputs)?;
        let d = self.cfg.model_dim;
        let mut data = Vec::new();
        for (i, e) in inputs.entries.iter().enumerate() {
            if e.modality == Modality::Gesture {
                data.extend_from_slice(out.hidden.row(i));
            }
        }
        let n = data.len() / d;
        Ok(Tensor::new(vec![n, d], data))
    }

    /// Teacher-forced argmax accuracy per modality over `examples`:
    /// `(speech hits, speech targets, gesture hits, gesture targets)`.
    pub fn teacher_forced_hits(&self, examples: &[Example]) -> Result<(usize, usize, usize, usize)> {
        let (mut sh, mut sn, mut gh, mut gn) = (0, 0, 0, 0);
        for e in examples {
            let mut inputs = e.stream.clone();
            inputs.entries.pop();
            let out = self.forward(&e.text, &inputs)?;
            for (i, l) in out.logits.iter().enumerate() {
                let target = e.stream.entries[i + 1];
                match target.modality {
                    Modality::Speech => {
                        sn += 1;
                        sh += usize::from(argmax(&l.values) == target.token);
                    }
                    Modality::Gesture => {
                        gn += 1;
                        gh += usize::from(argmax(&l.values) == target.token);
                    }
                    _ => {}
                }
            }
        }
        Ok((sh, sn, gh, gn))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, CHECKPOINT_VERSION);
        let c = &self.cfg;
        ck.set("text_vocab", c.text_vocab);
        ck.set("text_encoder_layers", c.text_encoder_layers);
        ck.set("decoder_layers", c.decoder_layers);
        ck.set("model_dim", c.model_dim);
        ck.set("heads", c.heads);
        ck.set("ffn_mult", c.ffn_mult);
        ck.set("speech_vocab", c.speech_vocab);
        ck.set("gesture_vocab", c.gesture_vocab);
        ck.set("control_vocab", c.control_vocab);
        ck.set("context_length", c.context_length);
        ck.set("dropout", c.dropout);
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
        let cfg = BackboneConfig {
            text_vocab: parse_key(ck, "text_vocab")?,
            text_encoder_layers: parse_key(ck, "text_encoder_layers")?,
            decoder_layers: parse_key(ck, "decoder_layers")?,
            model_dim: parse_key(ck, "model_dim")?,
            heads: parse_key(ck, "heads")?,
            ffn_mult: parse_key(ck, "ffn_mult")?,
            speech_vocab: parse_key(ck, "speech_vocab")?,
            gesture_vocab: parse_key(ck, "gesture_vocab")?,
            control_vocab: parse_key(ck, "control_vocab")?,
            context_length: parse_key(ck, "context_length")?,
            dropout: parse_key(ck, "dropout")?,
        };
        let mut me = Self::new(cfg, 0)?;
        load_store(ck, &mut me.store)?;
        Ok(me)
    }
}

/// Greedy index of the largest value; lowest index on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature / top-k sampling. Temperature 0 is greedy.
pub fn sample<T: Scalar, R: Rng + ?Sized>(logits: &[T], s: Sampling, rng: &mut R) -> usize {
    if s.temperature <= 0.0 {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let k = if s.top_k == 0 { logits.len() } else { s.top_k.min(logits.len()) };
    let top = &order[..k];
    let mx = logits[top[0]].as_f64();
    let weights: Vec<f64> = top
        .iter()
        .map(|&i| ((logits[i].as_f64() - mx) / s.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (&i, &w) in top.iter().zip(&weights) {
        if r < w {
            return i;
        }
        r -= w;
    }
    top[0]
}
