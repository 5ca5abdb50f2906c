//! Gesture evaluation: Fréchet gesture distance, beat consistency and
//! L1 diversity.

use gelina_tensor::nn::{Conv1d, Linear};
use gelina_tensor::{AdamW, Checkpoint, Graph, ParamStore, Scalar, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{load_store, parse_key, push_store, sha256_hex};
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, FEATURE_DIM};
use crate::rotation::geodesic_distance;

pub const CHECKPOINT_KIND: &str = "gesture-features";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_BEAT_SIGMA: f64 = 0.1;

/// Sample mean and unbiased covariance of clip embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::TooFewClips {
                needed: 2,
                got: rows.len(),
            });
        }
        let dim = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch(r.len(), dim));
        }
        let n = rows.len() as f64;
        let mut mean = DVector::zeros(dim);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(dim, dim);
        for r in rows {
            let d = DVector::from_column_slice(r) - &mean;
            cov += &d * d.transpose();
        }
        cov /= n - 1.0;
        Ok(Self {
            mean,
            cov,
            count: rows.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fewer samples than needed for a full-rank covariance.
    pub fn is_degenerate(&self) -> bool {
        self.count < self.dim() + 1
    }
}

/// Symmetrize, then rebuild with eigenvalues mapped through `f` after clamping at 0.
fn spectral(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| f(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|μ1 − μ2|² + tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^½)`, with the trace of the square root
/// taken from the eigenvalues of `Σ1^½ Σ2 Σ1^½`.
pub fn fgd(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch(a.dim(), b.dim()));
    }
    let diff = &a.mean - &b.mean;
    let root_a = spectral(&a.cov, f64::sqrt);
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .sum();
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Beat consistency with the detected gesture beats.
#[derive(Clone, Debug, PartialEq)]
pub struct BeatReport {
    pub score: f64,
    pub gesture_beats: Vec<f64>,
    /// No gesture beat was found; the score is 0 by convention.
    pub no_beats: bool,
}

/// Summed joint angular speed (rad/s) between consecutive frames. Sample `i`
/// sits halfway between frames `i` and `i + 1`. Invalid rotations contribute 0.
pub fn angular_speed<T: Scalar>(m: &MotionSequence<T>) -> Vec<f64> {
    let rots: Vec<_> = (0..m.num_frames())
        .map(|i| {
            let f = m.frame(i);
            f.joints.map(|j| crate::rotation::rot6d_to_matrix(&j).ok())
        })
        .collect();
    rots.windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => geodesic_distance(a, b).as_f64(),
                    _ => 0.0,
                })
                .sum::<f64>()
                * m.frame_rate()
        })
        .collect()
}

/// Times (s) of local minima of the angular speed that lie below its mean.
pub fn gesture_beats<T: Scalar>(m: &MotionSequence<T>) -> Vec<f64> {
    let v = angular_speed(m);
    if v.len() < 3 {
        return Vec::new();
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (1..v.len() - 1)
        .filter(|&i| v[i] < v[i - 1] && v[i] <= v[i + 1] && v[i] < mean)
        .map(|i| (i as f64 + 0.5) / m.frame_rate())
        .collect()
}

/// Mean over gesture beats of `exp(−d² / 2σ²)`, `d` the distance to the
/// nearest audio beat; 0 when either list is empty.
pub fn beat_score(gesture: &[f64], audio: &[f64], sigma: f64) -> f64 {
    if gesture.is_empty() || audio.is_empty() {
        return 0.0;
    }
    let total: f64 = gesture
        .iter()
        .map(|g| {
            let d = audio.iter().map(|a| (a - g).abs()).fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    total / gesture.len() as f64
}

pub fn beat_consistency<T: Scalar>(m: &MotionSequence<T>, audio_beats: &[f64], sigma: f64) -> BeatReport {
    let beats = gesture_beats(m);
    BeatReport {
        score: beat_score(&beats, audio_beats, sigma),
        no_beats: beats.is_empty(),
        gesture_beats: beats,
    }
}

/// Mean over unordered clip pairs of the mean absolute feature difference.
pub fn l1_diversity<T: Scalar>(clips: &[MotionSequence<T>]) -> Result<f64> {
    if clips.len() < 2 {
        return Err(Error::TooFewClips {
            needed: 2,
            got: clips.len(),
        });
    }
    let len = clips[0].data().len();
    if let Some(c) = clips.iter().find(|c| c.data().len() != len) {
        return Err(Error::LengthMismatch {
            expected: clips[0].num_frames(),
            got: c.num_frames(),
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..clips.len() {
        for j in i + 1..clips.len() {
            let d: f64 = clips[i]
                .data()
                .iter()
                .zip(clips[j].data())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .sum();
            total += d / len as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub embedding_dim: usize,
    pub clip_frames: usize,
    pub hidden: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            clip_frames: 80,
            hidden: 64,
        }
    }
}

/// Convolutional motion autoencoder whose bottleneck embeds fixed-length clips.
#[derive(Clone, Debug)]
pub struct GestureFeatureExtractor {
    cfg: ExtractorConfig,
    store: ParamStore<f32>,
    conv1: Conv1d,
    conv2: Conv1d,
    conv3: Conv1d,
    embed: Linear,
    expand: Linear,
    out1: Conv1d,
    out2: Conv1d,
}

impl GestureFeatureExtractor {
    pub fn new(cfg: ExtractorConfig, seed: u64) -> Result<Self> {
        if !cfg.clip_frames.is_multiple_of(4) || cfg.clip_frames == 0 || cfg.embedding_dim == 0 {
            return Err(Error::Config("clip_frames must be a positive multiple of 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let h = cfg.hidden;
        let conv1 = Conv1d::same(s, "enc.conv1", FEATURE_DIM, h, 3, &mut rng);
        let conv2 = Conv1d::new(s, "enc.conv2", h, h, 4, 2, 1, &mut rng);
        let conv3 = Conv1d::new(s, "enc.conv3", h, h, 4, 2, 1, &mut rng);
        let embed = Linear::new(s, "enc.embed", h, cfg.embedding_dim, true, &mut rng);
        let expand = Linear::new(s, "dec.expand", cfg.embedding_dim, h * cfg.clip_frames / 4, true, &mut rng);
        let out1 = Conv1d::same(s, "dec.out1", h, h, 3, &mut rng);
        let out2 = Conv1d::same(s, "dec.out2", h, FEATURE_DIM, 3, &mut rng);
        Ok(Self {
            cfg,
            store,
            conv1,
            conv2,
            conv3,
            embed,
            expand,
            out1,
            out2,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    fn encode_graph(&self, g: &mut Graph<'_, f32>, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = g.relu(h);
        let h = self.conv3.forward(g, h);
        let h = g.relu(h);
        let h = g.mean_time(h);
        self.embed.forward(g, h)
    }

    fn batch(&self, windows: &[&[f32]]) -> Tensor<f32> {
        let data = windows.iter().flat_map(|w| w.iter().copied()).collect();
        Tensor::new(vec![windows.len(), self.cfg.clip_frames, FEATURE_DIM], data)
    }

    /// Non-overlapping windows of `clip_frames` frames; shorter tails are dropped.
    pub fn windows<T: Scalar>(&self, clips: &[MotionSequence<T>]) -> Vec<Vec<f32>> {
        let n = self.cfg.clip_frames;
        clips
            .iter()
            .flat_map(|c| {
                (0..c.num_frames() / n).map(move |k| {
                    c.data()[k * n * FEATURE_DIM..(k + 1) * n * FEATURE_DIM]
                        .iter()
                        .map(|v| v.as_f64() as f32)
                        .collect()
                })
            })
            .collect()
    }

    /// Fit the autoencoder by reconstruction on windows of `clips`.
    pub fn train<T: Scalar>(
        &mut self,
        clips: &[MotionSequence<T>],
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let windows = self.windows(clips);
        if windows.is_empty() {
            return Err(Error::TooFewClips { needed: 1, got: 0 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut cursor = order.len();
        let mut opt = AdamW::new(0.0);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut pick = Vec::with_capacity(batch);
            while pick.len() < batch.min(windows.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                pick.push(windows[order[cursor]].as_slice());
                cursor += 1;
            }
            let x = self.batch(&pick);
            let grads = {
                let mut g = Graph::new(&self.store);
                let xv = g.constant(x);
                let z = self.encode_graph(&mut g, xv);
                let h = self.expand.forward(&mut g, z);
                let h = g.reshape(h, &[pick.len(), self.cfg.clip_frames / 4, self.cfg.hidden]);
                let h = g.upsample(h, 4);
                let h = self.out1.forward(&mut g, h);
                let h = g.relu(h);
                let y = self.out2.forward(&mut g, h);
                let d = g.sub(y, xv);
                let sq = g.square(d);
                let loss = g.mean_all(sq);
                let l = g.value(loss).data()[0] as f64;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss(format!("feature extractor: {l}")));
                }
                losses.push(l);
                g.backward(loss)
            };
            opt.step(&mut self.store, &grads, lr);
        }
        Ok(losses)
    }

    pub fn embed_windows(&self, windows: &[Vec<f32>]) -> Vec<Vec<f64>> {
        windows
            .chunks(64)
            .flat_map(|chunk| {
                let refs: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
                let mut g = Graph::inference(&self.store);
                let x = g.constant(self.batch(&refs));
                let z = self.encode_graph(&mut g, x);
                let e = self.cfg.embedding_dim;
                g.value(z)
                    .data()
                    .chunks(e)
                    .map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Short content hash identifying the trained weights.
    pub fn version(&self) -> String {
        sha256_hex(&self.to_checkpoint().to_bytes())[..16].to_string()
    }

    pub fn to_checkpoint(&self) -> Checkpoint<f32> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, CHECKPOINT_VERSION);
        ck.set("embedding_dim", self.cfg.embedding_dim);
        ck.set("clip_frames", self.cfg.clip_frames);
        ck.set("hidden", self.cfg.hidden);
        push_store(&mut ck, &self.store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND || ck.kind_version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "expected {CHECKPOINT_KIND} v{CHECKPOINT_VERSION}, found {} v{}",
                ck.kind, ck.kind_version
            )));
        }
        let cfg = ExtractorConfig {
            embedding_dim: parse_key(ck, "embedding_dim")?,
            clip_frames: parse_key(ck, "clip_frames")?,
            hidden: parse_key(ck, "hidden")?,
        };
        let mut me = Self::new(cfg, 0)?;
        load_store(ck, &mut me.store)?;
        Ok(me)
    }
}

/// Gaussian statistics of the extractor embeddings of all windows of `clips`.
pub fn extract_stats<T: Scalar>(
    clips: &[MotionSequence<T>],
    extractor: &GestureFeatureExtractor,
) -> Result<GaussianStats> {
    let windows = extractor.windows(clips);
    GaussianStats::from_rows(&extractor.embed_windows(&windows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: f64,
}

/// Machine-readable evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<MetricValue>,
    pub extractor_version: String,
    pub real_clips: usize,
    pub generated_clips: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("evaluation report: {e}")))
    }
}
