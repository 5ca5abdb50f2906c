//! Run configuration: typed sections, a `key = value` text form and
//! `--key value` overrides.
//!
//! Keys are dotted paths into the sections (`backbone.model_dim`,
//! `flow.lambda_geo`, ...). Lists are comma separated. Lines starting with
//! `#` are comments. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gelina_core::artifact::sha256_hex;
use gelina_core::backbone::{BackboneConfig, Sampling};
use gelina_core::corpus::LanguageSpec;
use gelina_core::flow::FlowConfig;
use gelina_core::interleave::CONTROL_VOCAB;
use gelina_core::metrics::ExtractorConfig;
use gelina_core::rvq::{RvqConfig, DOWNSAMPLE_FACTOR};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{PipelineError, Result};

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "GELINA_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub clips: usize,
    /// Trailing clips kept out of every training stage.
    pub holdout: usize,
    pub words: usize,
    pub speakers: usize,
    pub tokens_per_word: usize,
    pub speech_vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub speech_jitter: f64,
    pub pose_jitter: f64,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let s = LanguageSpec::default();
        Self {
            clips: 2000,
            holdout: 200,
            words: s.num_words,
            speakers: s.num_speakers,
            tokens_per_word: s.speech_tokens_per_word,
            speech_vocab: s.speech_vocab,
            min_words: s.min_words,
            max_words: s.max_words,
            speech_jitter: s.speech_jitter,
            pose_jitter: s.pose_jitter,
            amplitudes: s.amplitudes,
            phases: s.phases,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GestureSection {
    pub levels: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub ema_decay: f64,
    pub dead_after: u32,
    pub commitment_weight: f64,
    pub velocity_weight: f64,
    pub steps: usize,
    pub batch: usize,
    /// Training crop length in frames.
    pub window: usize,
    pub lr: f64,
}

impl Default for GestureSection {
    fn default() -> Self {
        let r = RvqConfig::desk();
        Self {
            levels: r.levels,
            codebook_size: r.codebook_size,
            latent_dim: r.latent_dim,
            hidden: r.hidden,
            ema_decay: r.ema_decay,
            dead_after: r.dead_after,
            commitment_weight: r.commitment_weight,
            velocity_weight: r.velocity_weight,
            steps: 2000,
            batch: 16,
            window: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeechSection {
    pub vocab: usize,
    /// Training clips rendered to audio for codebook fitting.
    pub train_clips: usize,
}

impl Default for SpeechSection {
    fn default() -> Self {
        Self {
            vocab: 256,
            train_clips: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    pub vocab: usize,
}

impl Default for TextSection {
    fn default() -> Self {
        Self { vocab: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub context_length: usize,
    pub dropout: f64,
    pub batch: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    /// Linear warmup length as a fraction of each stage's steps.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Draw fresh replacement gestures for every pretraining batch; when
    /// false each example keeps one fixed draw.
    pub resample_masks: bool,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::desk();
        Self {
            encoder_layers: b.text_encoder_layers,
            decoder_layers: b.decoder_layers,
            model_dim: b.model_dim,
            heads: b.heads,
            ffn_mult: b.ffn_mult,
            context_length: b.context_length,
            dropout: b.dropout,
            batch: 8,
            pretrain_steps: 500,
            finetune_steps: 1500,
            pretrain_lr: 1e-3,
            finetune_lr: 5e-4,
            warmup_fraction: 0.01,
            weight_decay: 0.01,
            resample_masks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub hidden: usize,
    pub heads: usize,
    pub kernel: usize,
    pub time_dim: usize,
    pub lambda_vel: f64,
    pub lambda_geo: f64,
    pub sampling_steps: usize,
    pub steps: usize,
    pub batch: usize,
    pub window: usize,
    pub lr: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        let f = FlowConfig::desk(1);
        Self {
            hidden: f.hidden,
            heads: f.heads,
            kernel: f.kernel,
            time_dim: f.time_dim,
            lambda_vel: f.lambda_vel,
            lambda_geo: f.lambda_geo,
            sampling_steps: f.sampling_steps,
            steps: 2000,
            batch: 8,
            window: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub embedding_dim: usize,
    pub clip_frames: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            clip_frames: 32,
            hidden: 64,
            steps: 1000,
            batch: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: f64,
    pub top_k: usize,
    /// Maximum generated body entries.
    pub max_len: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let s = Sampling::default();
        Self {
            temperature: s.temperature,
            top_k: s.top_k,
            max_len: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out clips used for evaluation.
    pub clips: usize,
    pub beat_sigma: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            clips: 100,
            beat_sigma: gelina_core::metrics::DEFAULT_BEAT_SIGMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub gesture: GestureSection,
    pub speech: SpeechSection,
    pub text: TextSection,
    pub backbone: BackboneSection,
    pub flow: FlowSection,
    pub extractor: ExtractorSection,
    pub sampling: SamplingSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("gelina-out"),
            corpus: CorpusSection::default(),
            gesture: GestureSection::default(),
            speech: SpeechSection::default(),
            text: TextSection::default(),
            backbone: BackboneSection::default(),
            flow: FlowSection::default(),
            extractor: ExtractorSection::default(),
            sampling: SamplingSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("sections are objects");
            }
        }
    }
    Value::Object(root)
}

fn parse_like(template: &Value, key: &str, raw: &str) -> Result<Value> {
    let bad = |what: &str| PipelineError::Usage(format!("{key}: expected {what}, got {raw:?}"));
    let float = |s: &str| -> Result<Value> {
        s.trim()
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| bad("a finite number"))
    };
    match template {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad("true or false")),
        Value::Number(n) if n.is_u64() => raw
            .parse::<u64>()
            .map(|v| Value::Number(v.into()))
            .map_err(|_| bad("a non-negative integer")),
        Value::Number(_) => float(raw),
        Value::Array(_) => raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(float)
            .collect::<Result<Vec<_>>>()
            .map(Value::Array),
        _ => Ok(Value::String(raw.to_string())),
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

impl RunConfig {
    fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Every configuration key, sorted.
    pub fn keys() -> Vec<String> {
        Self::default().flat().into_keys().collect()
    }

    /// Apply `key = value` assignments in order; unknown keys are rejected.
    pub fn apply<'a>(&mut self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut flat = self.flat();
        for (key, raw) in assignments {
            let template = flat
                .get(key)
                .ok_or_else(|| PipelineError::Usage(format!("unknown config key {key:?}")))?;
            let v = parse_like(template, key, raw.trim())?;
            flat.insert(key.to_string(), v);
        }
        *self = serde_json::from_value(unflatten(&flat)).map_err(|e| PipelineError::Usage(e.to_string()))?;
        self.validate()
    }

    /// Parse the text form on top of the defaults.
    pub fn from_text(s: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        let mut cfg = Self::default();
        cfg.apply(pairs)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Text form with every key, sorted.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# gelina run configuration\n");
        for (k, v) in self.flat() {
            s.push_str(&format!("{k} = {}\n", render_value(&v)));
        }
        s
    }

    /// Hash of every setting except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(c.to_text().as_bytes())[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.holdout >= c.clips {
            return Err(PipelineError::Usage(format!(
                "corpus.holdout {} leaves no training clips out of {}",
                c.holdout, c.clips
            )));
        }
        for (name, w) in [("gesture.window", self.gesture.window), ("flow.window", self.flow.window)] {
            if w == 0 || w % (2 * DOWNSAMPLE_FACTOR) != 0 {
                return Err(PipelineError::Usage(format!(
                    "{name} must be a positive multiple of {}",
                    2 * DOWNSAMPLE_FACTOR
                )));
            }
        }
        if self.extractor.clip_frames == 0 || !self.extractor.clip_frames.is_multiple_of(DOWNSAMPLE_FACTOR) {
            return Err(PipelineError::Usage(format!(
                "extractor.clip_frames must be a positive multiple of {DOWNSAMPLE_FACTOR}"
            )));
        }
        for (name, v) in [
            ("gesture.batch", self.gesture.batch),
            ("backbone.batch", self.backbone.batch),
            ("flow.batch", self.flow.batch),
            ("extractor.batch", self.extractor.batch),
        ] {
            if v == 0 {
                return Err(PipelineError::Usage(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.backbone.warmup_fraction) {
            return Err(PipelineError::Usage("backbone.warmup_fraction must lie in [0, 1]".into()));
        }
        self.language_spec().validate()?;
        self.rvq_config().validate()?;
        Ok(())
    }

    pub fn language_spec(&self) -> LanguageSpec {
        let c = &self.corpus;
        LanguageSpec {
            num_words: c.words,
            num_speakers: c.speakers,
            speech_tokens_per_word: c.tokens_per_word,
            speech_vocab: c.speech_vocab,
            min_words: c.min_words,
            max_words: c.max_words,
            speech_jitter: c.speech_jitter,
            pose_jitter: c.pose_jitter,
            amplitudes: c.amplitudes.clone(),
            phases: c.phases.clone(),
            seed: derive_seed(self.seed, "corpus"),
        }
    }

    pub fn rvq_config(&self) -> RvqConfig {
        let g = &self.gesture;
        RvqConfig {
            levels: g.levels,
            codebook_size: g.codebook_size,
            latent_dim: g.latent_dim,
            downsample_factor: DOWNSAMPLE_FACTOR,
            hidden: g.hidden,
            ema_decay: g.ema_decay,
            dead_after: g.dead_after,
            commitment_weight: g.commitment_weight,
            velocity_weight: g.velocity_weight,
        }
    }

    pub fn backbone_config(&self, text_vocab: usize, speech_vocab: usize, gesture_vocab: usize) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            text_vocab,
            text_encoder_layers: b.encoder_layers,
            decoder_layers: b.decoder_layers,
            model_dim: b.model_dim,
            heads: b.heads,
            ffn_mult: b.ffn_mult,
            speech_vocab,
            gesture_vocab,
            control_vocab: CONTROL_VOCAB,
            context_length: b.context_length,
            dropout: b.dropout,
        }
    }

    pub fn flow_config(&self, cond_dim: usize) -> FlowConfig {
        let f = &self.flow;
        FlowConfig {
            hidden: f.hidden,
            heads: f.heads,
            kernel: f.kernel,
            time_dim: f.time_dim,
            lambda_vel: f.lambda_vel,
            lambda_geo: f.lambda_geo,
            sampling_steps: f.sampling_steps,
            ..FlowConfig::desk(cond_dim)
        }
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        let e = &self.extractor;
        ExtractorConfig {
            embedding_dim: e.embedding_dim,
            clip_frames: e.clip_frames,
            hidden: e.hidden,
        }
    }

    pub fn sampling(&self, seed: u64) -> Sampling {
        Sampling {
            temperature: self.sampling.temperature,
            top_k: self.sampling.top_k,
            seed,
        }
    }
}

/// Independent per-purpose seed from the global one.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let h = sha256_hex(format!("{seed}/{purpose}").as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}
