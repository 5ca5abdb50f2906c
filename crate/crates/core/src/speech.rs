//! Speech codec interface and a small filterbank + k-means codec producing
//! single-level 75 Hz tokens from 24 kHz audio.

use std::sync::Arc;

use gelina_tensor::{Checkpoint, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::artifact::parse_key;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 24_000;
pub const SPEECH_TOKEN_RATE: u32 = 75;
/// Samples per token.
pub const HOP: usize = (SAMPLE_RATE / SPEECH_TOKEN_RATE) as usize;
pub const NUM_BANDS: usize = 16;
pub const CHECKPOINT_KIND: &str = "speech-codec";
pub const CHECKPOINT_VERSION: u32 = 1;

const ENERGY_FLOOR: f64 = 1e-6;
const KMEANS_ITERS: usize = 30;

/// Log band energies of one hop.
pub type FeatureFrame = [f64; NUM_BANDS];

/// Discrete speech tokens at 75 Hz.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeechTokens {
    pub ids: Vec<usize>,
    pub vocab: usize,
}

impl SpeechTokens {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                bound: vocab,
            });
        }
        Ok(Self { ids, vocab })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.ids.len() as f64 / SPEECH_TOKEN_RATE as f64
    }
}

/// What the rest of the pipeline needs from a speech codec.
pub trait SpeechCodec {
    fn vocab_size(&self) -> usize;
    fn sample_rate(&self) -> u32;
    /// Zero-pads the tail to a whole hop.
    fn encode_audio(&self, samples: &[f32], sample_rate: u32) -> Result<SpeechTokens>;
    fn decode_tokens(&self, tokens: &SpeechTokens) -> Result<Vec<f32>>;
}

/// Band edges over FFT bins `1..=HOP/2`, log-spaced and strictly increasing.
pub fn band_edges() -> [usize; NUM_BANDS + 1] {
    let top = HOP / 2 + 1;
    let mut edges = [0usize; NUM_BANDS + 1];
    edges[0] = 1;
    for b in 1..=NUM_BANDS {
        let raw = (top as f64).powf(b as f64 / NUM_BANDS as f64).round() as usize;
        let room = top - (NUM_BANDS - b);
        edges[b] = raw.max(edges[b - 1] + 1).min(room);
    }
    edges[NUM_BANDS] = top;
    edges
}

/// Stateless filterbank front end.
#[derive(Clone)]
pub struct Filterbank {
    fft: Arc<dyn Fft<f64>>,
    edges: [usize; NUM_BANDS + 1],
}

impl std::fmt::Debug for Filterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Filterbank").field("edges", &self.edges).finish()
    }
}

impl Default for Filterbank {
    fn default() -> Self {
        Self::new()
    }
}

impl Filterbank {
    pub fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(HOP),
            edges: band_edges(),
        }
    }

    /// `ln(mean |X_k|² / N² + 1e-6)` per band for one hop of samples.
    pub fn features(&self, hop: &[f32]) -> FeatureFrame {
        let mut buf: Vec<Complex<f64>> = (0..HOP)
            .map(|i| Complex::new(hop.get(i).map_or(0.0, |&s| s as f64), 0.0))
            .collect();
        self.fft.process(&mut buf);
        let norm = (HOP * HOP) as f64;
        let mut out = [0.0; NUM_BANDS];
        for (b, o) in out.iter_mut().enumerate() {
            let (lo, hi) = (self.edges[b], self.edges[b + 1]);
            let e: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>() / norm;
            *o = (e / (hi - lo) as f64 + ENERGY_FLOOR).ln();
        }
        out
    }

    /// One hop with a cosine at each band's center bin, scaled so that
    /// [`Filterbank::features`] returns `f` (bands at the floor stay silent).
    pub fn synthesize(&self, f: &FeatureFrame) -> Vec<f32> {
        let mut out = vec![0.0f64; HOP];
        for (b, &lf) in f.iter().enumerate() {
            let (lo, hi) = (self.edges[b], self.edges[b + 1]);
            let energy = (lf.exp() - ENERGY_FLOOR).max(0.0);
            if energy == 0.0 {
                continue;
            }
            let width = (hi - lo) as f64;
            let k = (lo + hi - 1) / 2;
            // a cosine of amplitude A at integer bin k has |X_k| = A·N/2
            let amp = if k == HOP / 2 {
                (energy * width).sqrt()
            } else {
                2.0 * (energy * width).sqrt()
            };
            for (n, o) in out.iter_mut().enumerate() {
                *o += amp * (2.0 * std::f64::consts::PI * (k * n) as f64 / HOP as f64).cos();
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    pub fn frames(&self, samples: &[f32]) -> Vec<FeatureFrame> {
        samples.chunks(HOP).map(|h| self.features(h)).collect()
    }
}

/// Filterbank features quantized against `vocab` k-means centroids.
#[derive(Clone, Debug)]
pub struct ToyCodec {
    centroids: Vec<FeatureFrame>,
    bank: Filterbank,
}

impl ToyCodec {
    pub fn from_centroids(centroids: Vec<FeatureFrame>) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(Error::Config("codec needs at least two centroids".into()));
        }
        Ok(Self {
            centroids,
            bank: Filterbank::new(),
        })
    }

    pub fn centroids(&self) -> &[FeatureFrame] {
        &self.centroids
    }

    pub fn filterbank(&self) -> &Filterbank {
        &self.bank
    }

    /// k-means++ seeding followed by Lloyd iterations; deterministic per seed.
    pub fn train(frames: &[FeatureFrame], vocab: usize, seed: u64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Config(format!("speech vocab {vocab} < 2")));
        }
        if frames.len() < vocab {
            return Err(Error::InsufficientData {
                needed: vocab,
                got: frames.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = vec![frames[rng.random_range(0..frames.len())]];
        let mut dist: Vec<f64> = frames.iter().map(|f| sq_dist(f, &centroids[0])).collect();
        while centroids.len() < vocab {
            let total: f64 = dist.iter().sum();
            let pick = if total > 0.0 {
                let mut r = rng.random_range(0.0..total);
                let mut idx = frames.len() - 1;
                for (i, &d) in dist.iter().enumerate() {
                    if r < d {
                        idx = i;
                        break;
                    }
                    r -= d;
                }
                idx
            } else {
                rng.random_range(0..frames.len())
            };
            let c = frames[pick];
            for (d, f) in dist.iter_mut().zip(frames) {
                *d = d.min(sq_dist(f, &c));
            }
            centroids.push(c);
        }
        let mut assign = vec![usize::MAX; frames.len()];
        for _ in 0..KMEANS_ITERS {
            let mut changed = false;
            for (a, f) in assign.iter_mut().zip(frames) {
                let k = nearest(&centroids, f).0;
                changed |= *a != k;
                *a = k;
            }
            let mut sums = vec![[0.0; NUM_BANDS]; vocab];
            let mut counts = vec![0usize; vocab];
            for (&k, f) in assign.iter().zip(frames) {
                counts[k] += 1;
                for (s, v) in sums[k].iter_mut().zip(f) {
                    *s += v;
                }
            }
            for k in 0..vocab {
                if counts[k] > 0 {
                    centroids[k] = sums[k].map(|s| s / counts[k] as f64);
                } else {
                    // empty cluster takes the frame farthest from its centroid
                    let far = (0..frames.len())
                        .max_by(|&i, &j| {
                            let di = sq_dist(&frames[i], &centroids[assign[i]]);
                            let dj = sq_dist(&frames[j], &centroids[assign[j]]);
                            di.total_cmp(&dj).then(j.cmp(&i))
                        })
                        .expect("nonempty");
                    centroids[k] = frames[far];
                    assign[far] = k;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        Self::from_centroids(centroids)
    }

    pub fn encode_features(&self, frames: &[FeatureFrame]) -> SpeechTokens {
        SpeechTokens {
            ids: frames.iter().map(|f| nearest(&self.centroids, f).0).collect(),
            vocab: self.centroids.len(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f64> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, CHECKPOINT_VERSION);
        ck.set("sample_rate", SAMPLE_RATE);
        ck.set("hop", HOP);
        ck.set("bands", NUM_BANDS);
        ck.set("vocab", self.centroids.len());
        ck.push_tensor(
            "centroids",
            Tensor::new(
                vec![self.centroids.len(), NUM_BANDS],
                self.centroids.iter().flatten().copied().collect(),
            ),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<f64>) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND || ck.kind_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "expected {CHECKPOINT_KIND} v{CHECKPOINT_VERSION}, found {} v{}",
                ck.kind, ck.kind_version
            )));
        }
        let rate: u32 = parse_key(ck, "sample_rate")?;
        if rate != SAMPLE_RATE {
            return Err(Error::SampleRateMismatch {
                expected: SAMPLE_RATE,
                got: rate,
            });
        }
        let vocab: usize = parse_key(ck, "vocab")?;
        let t = ck.tensor("centroids")?;
        if t.shape() != [vocab, NUM_BANDS] {
            return Err(Error::Format(format!("centroid shape {:?}", t.shape())));
        }
        let centroids = t
            .data()
            .chunks(NUM_BANDS)
            .map(|c| c.try_into().expect("band-sized chunk"))
            .collect();
        Self::from_centroids(centroids)
    }
}

impl SpeechCodec for ToyCodec {
    fn vocab_size(&self) -> usize {
        self.centroids.len()
    }

    fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    fn encode_audio(&self, samples: &[f32], sample_rate: u32) -> Result<SpeechTokens> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRateMismatch {
                expected: SAMPLE_RATE,
                got: sample_rate,
            });
        }
        Ok(self.encode_features(&self.bank.frames(samples)))
    }

    fn decode_tokens(&self, tokens: &SpeechTokens) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(tokens.len() * HOP);
        for &id in &tokens.ids {
            let c = self.centroids.get(id).ok_or(Error::IndexOutOfRange {
                index: id,
                bound: self.centroids.len(),
            })?;
            out.extend(self.bank.synthesize(c));
        }
        Ok(out)
    }
}

fn sq_dist(a: &FeatureFrame, b: &FeatureFrame) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(centroids: &[FeatureFrame], f: &FeatureFrame) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(f, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(bin: usize, amp: f32, hops: usize) -> Vec<f32> {
        (0..hops * HOP)
            .map(|n| amp * (2.0 * std::f32::consts::PI * (bin * n) as f32 / HOP as f32).sin())
            .collect()
    }

    fn two_signal_codec() -> ToyCodec {
        let bank = Filterbank::new();
        let mut frames = bank.frames(&tone(3, 0.5, 10));
        frames.extend(bank.frames(&tone(90, 0.2, 10)));
        ToyCodec::train(&frames, 2, 7).unwrap()
    }

    #[test]
    fn rate_and_padding() {
        assert_eq!(HOP, 320);
        let codec = two_signal_codec();
        let one_second = vec![0.0f32; SAMPLE_RATE as usize];
        assert_eq!(codec.encode_audio(&one_second, SAMPLE_RATE).unwrap().len(), 75);
        assert_eq!(codec.encode_audio(&[0.0; 321], SAMPLE_RATE).unwrap().len(), 2);
        assert!(codec.encode_audio(&[], SAMPLE_RATE).unwrap().is_empty());
        assert!(matches!(
            codec.encode_audio(&one_second, 16_000),
            Err(Error::SampleRateMismatch { .. })
        ));
    }

    #[test]
    fn band_edges_are_strictly_increasing() {
        let e = band_edges();
        assert_eq!(e[0], 1);
        assert_eq!(e[NUM_BANDS], HOP / 2 + 1);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn distinct_constant_signals_separate() {
        let codec = two_signal_codec();
        let a = codec.encode_audio(&tone(3, 0.5, 5), SAMPLE_RATE).unwrap();
        let b = codec.encode_audio(&tone(90, 0.2, 5), SAMPLE_RATE).unwrap();
        assert!(a.ids.iter().all(|&i| i == a.ids[0]));
        assert!(b.ids.iter().all(|&i| i == b.ids[0]));
        assert_ne!(a.ids[0], b.ids[0]);
    }

    #[test]
    fn silence_maps_to_one_token() {
        let codec = two_signal_codec();
        let t = codec.encode_audio(&vec![0.0; 20 * HOP], SAMPLE_RATE).unwrap();
        let zero_feature = Filterbank::new().features(&[0.0; HOP]);
        assert!(t.ids.iter().all(|&i| i == nearest(codec.centroids(), &zero_feature).0));
    }

    #[test]
    fn decode_then_encode_is_identity() {
        let codec = two_signal_codec();
        let t = SpeechTokens::new(vec![0, 1, 1, 0, 1], 2).unwrap();
        let wave = codec.decode_tokens(&t).unwrap();
        assert_eq!(wave.len(), 5 * HOP);
        assert_eq!(codec.encode_audio(&wave, SAMPLE_RATE).unwrap(), t);
        let empty = SpeechTokens::new(vec![], 2).unwrap();
        assert!(codec.decode_tokens(&empty).unwrap().is_empty());
        assert_eq!(
            codec
                .decode_tokens(&SpeechTokens::new(vec![0; 75], 2).unwrap())
                .unwrap()
                .len(),
            SAMPLE_RATE as usize
        );
    }

    #[test]
    fn synthesis_reproduces_features() {
        let bank = Filterbank::new();
        let f = bank.features(&tone(40, 0.3, 1));
        let g = bank.features(&bank.synthesize(&f));
        for (a, b) in f.iter().zip(&g) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn training_needs_enough_frames_and_is_deterministic() {
        let bank = Filterbank::new();
        let frames = bank.frames(&tone(3, 0.5, 3));
        assert!(matches!(
            ToyCodec::train(&frames, 4, 0),
            Err(Error::InsufficientData { needed: 4, got: 3 })
        ));
        let mut frames = bank.frames(&tone(3, 0.5, 4));
        frames.extend(bank.frames(&tone(50, 0.1, 4)));
        let a = ToyCodec::train(&frames, 3, 11).unwrap();
        let b = ToyCodec::train(&frames, 3, 11).unwrap();
        assert_eq!(a.centroids(), b.centroids());
        assert!(matches!(
            ToyCodec::decode_tokens(&a, &SpeechTokens { ids: vec![3], vocab: 3 }),
            Err(Error::IndexOutOfRange { index: 3, bound: 3 })
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let codec = two_signal_codec();
        let bytes = codec.to_checkpoint().to_bytes();
        let back = ToyCodec::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.centroids(), codec.centroids());
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }
}
