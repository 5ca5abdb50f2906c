//! Pipeline stages over one output directory.
//!
//! ```text
//! corpus/                      manifest.jsonl, speech/*.tok, motion/*.mot, corpus.json
//! gesture_tokenizer.ckpt       tokenizer train gesture
//! speech_codec.ckpt            tokenizer train speech
//! text_bpe.txt                 tokenizer train text
//! backbone_pretrain.ckpt       backbone pretrain
//! backbone.ckpt                backbone finetune
//! flow.ckpt                    flow train
//! extractor.ckpt               extractor train
//! synth/<name>.{tok,wav,mot,stream}
//! eval/report.json
//! configs/<stage>.cfg          resolved config of the last run of each stage
//! logs/<stage>.log             training curves
//! ```
//!
//! Every artifact carries the hash of the run configuration that wrote it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gelina_core::artifact::CONFIG_HASH_KEY;
use gelina_core::backbone::{Backbone, Example};
use gelina_core::corpus::{
    self, gesture_amplitude, load_all, motion_to_bytes, speech_to_bytes, LanguageSpec, LoadedClip, Manifest,
    SyntheticLanguage, SyntheticVoice,
};
use gelina_core::flow::FlowNet;
use gelina_core::interleave::{build_stream, split_stream, TokenStream, BLOCK, SPEECH_PER_GESTURE};
use gelina_core::metrics::{
    beat_consistency, extract_stats, fgd, l1_diversity, EvalReport, GestureFeatureExtractor, MetricValue,
};
use gelina_core::motion::MotionSequence;
use gelina_core::rvq::{GestureTokenizer, GestureTokens, DOWNSAMPLE_FACTOR};
use gelina_core::speech::{Filterbank, SpeechCodec, SpeechTokens, ToyCodec, SAMPLE_RATE};
use gelina_core::text::BpeVocab;
use gelina_core::{backbone, flow, metrics, rvq, speech};
use gelina_tensor::checkpoint::write_atomic;
use gelina_tensor::optim::warmup_lr;
use gelina_tensor::{AdamW, Checkpoint, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, RunConfig};
use crate::error::{PipelineError, Result};

pub const CORPUS_DIR: &str = "corpus";
pub const CORPUS_STAMP: &str = "corpus.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Corpus,
    GestureTokenizer,
    SpeechTokenizer,
    TextTokenizer,
    Pretrain,
    Finetune,
    Flow,
    Extractor,
    Synthesize,
    Clone,
    SpeechToGesture,
    Evaluate,
}

impl Stage {
    pub fn command(self) -> &'static str {
        match self {
            Self::Corpus => "corpus gen",
            Self::GestureTokenizer => "tokenizer train gesture",
            Self::SpeechTokenizer => "tokenizer train speech",
            Self::TextTokenizer => "tokenizer train text",
            Self::Pretrain => "backbone pretrain",
            Self::Finetune => "backbone finetune",
            Self::Flow => "flow train",
            Self::Extractor => "extractor train",
            Self::Synthesize => "synthesize",
            Self::Clone => "clone",
            Self::SpeechToGesture => "s2g",
            Self::Evaluate => "evaluate",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Self::Corpus => "corpus",
            Self::GestureTokenizer => "gesture_tokenizer",
            Self::SpeechTokenizer => "speech_tokenizer",
            Self::TextTokenizer => "text_tokenizer",
            Self::Pretrain => "backbone_pretrain",
            Self::Finetune => "backbone_finetune",
            Self::Flow => "flow",
            Self::Extractor => "extractor",
            Self::Synthesize => "synthesize",
            Self::Clone => "clone",
            Self::SpeechToGesture => "s2g",
            Self::Evaluate => "evaluate",
        }
    }

    /// Artifact path relative to the output root and a short description.
    pub fn artifact(self) -> Option<(&'static str, &'static str)> {
        Some(match self {
            Self::Corpus => ("corpus/manifest.jsonl", "corpus"),
            Self::GestureTokenizer => ("gesture_tokenizer.ckpt", "gesture tokenizer"),
            Self::SpeechTokenizer => ("speech_codec.ckpt", "speech codec"),
            Self::TextTokenizer => ("text_bpe.txt", "text tokenizer"),
            Self::Pretrain => ("backbone_pretrain.ckpt", "pretrained backbone"),
            Self::Finetune => ("backbone.ckpt", "fine-tuned backbone"),
            Self::Flow => ("flow.ckpt", "flow decoder"),
            Self::Extractor => ("extractor.ckpt", "metrics feature extractor"),
            Self::Evaluate => ("eval/report.json", "evaluation report"),
            Self::Synthesize | Self::Clone | Self::SpeechToGesture => return None,
        })
    }
}

/// Generated speech and motion for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub text: String,
    /// Generated stream, BOS first; a cloned stream excludes the prompt.
    pub stream: TokenStream,
    pub speech: SpeechTokens,
    pub waveform: Vec<f32>,
    pub gestures: Vec<usize>,
    /// Flow-decoded motion; `None` when no gesture token was produced.
    pub motion: Option<MotionSequence<f32>>,
}

/// Everything needed to turn corpus clips into backbone examples.
pub struct Tokenizers {
    pub text: BpeVocab,
    pub speech: ToyCodec,
    pub gesture: GestureTokenizer<f32>,
    pub voice: SyntheticVoice,
    pub language: LanguageSpec,
}

impl Tokenizers {
    /// Codec tokens of the rendered waveform of corpus speech ids.
    pub fn codec_tokens(&self, ids: &SpeechTokens) -> Result<Vec<usize>> {
        let audio = self.voice.render(ids)?;
        Ok(self.speech.encode_audio(&audio, SAMPLE_RATE)?.ids)
    }

    pub fn gesture_tokens(&self, motion: &MotionSequence<f32>) -> Result<Vec<usize>> {
        Ok(self.gesture.tokenize(motion, 1)?.level(0).to_vec())
    }

    pub fn example(&self, clip: &LoadedClip) -> Result<Example> {
        let speech = self.codec_tokens(&clip.speech)?;
        let gesture = self.gesture_tokens(&clip.motion)?;
        Ok(Example {
            text: self.text.encode(&clip.text),
            stream: build_stream(&speech, &gesture)?,
        })
    }
}

/// Trained models for inference.
pub struct Models {
    pub tokenizers: Tokenizers,
    pub backbone: Backbone<f32>,
    pub flow: FlowNet<f32>,
    cfg: RunConfig,
}

impl Models {
    fn sampling(&self, seed: u64) -> gelina_core::backbone::Sampling {
        self.cfg.sampling(seed)
    }

    /// Flow-decode the gestures of `stream`, dropping the first `skip` rows.
    fn decode_motion(&self, text: &[u32], stream: &TokenStream, skip: usize, seed: u64) -> Result<Option<MotionSequence<f32>>> {
        let cond = self.backbone.conditioning(text, stream)?;
        if cond.rows() <= skip {
            return Ok(None);
        }
        let d = cond.cols();
        let rows = Tensor::new(vec![cond.rows() - skip, d], cond.data()[skip * d..].to_vec());
        Ok(Some(self.flow.sample(&rows, derive_seed(seed, "flow-noise"))?.projected()))
    }

    fn finish(&self, text: &str, stream: TokenStream, motion_text: &[u32], full: &TokenStream, skip: usize, seed: u64) -> Result<Synthesis> {
        let (speech, gestures) = split_stream(&stream)?;
        let speech = SpeechTokens::new(speech, self.tokenizers.speech.vocab_size())?;
        let waveform = self.tokenizers.speech.decode_tokens(&speech)?;
        let motion = self.decode_motion(motion_text, full, skip, seed)?;
        Ok(Synthesis {
            text: text.to_string(),
            stream,
            speech,
            waveform,
            gestures,
            motion,
        })
    }

    /// Text to speech and gesture.
    pub fn synthesize(&self, text: &str, seed: u64) -> Result<Synthesis> {
        let ids = self.tokenizers.text.encode(text);
        let stream = self.backbone.generate(&ids, self.sampling(seed), self.cfg.sampling.max_len)?;
        self.finish(text, stream.clone(), &ids, &stream, 0, seed)
    }

    /// Continue the first `prompt_words` words of a corpus clip with `text`.
    pub fn clone_from(&self, prompt: &LoadedClip, prompt_words: usize, text: &str, seed: u64) -> Result<Synthesis> {
        let words: Vec<&str> = prompt.text.split(' ').collect();
        if prompt_words == 0 || prompt_words > words.len() {
            return Err(PipelineError::Usage(format!(
                "prompt clip {} has {} words, asked for {prompt_words}",
                prompt.id,
                words.len()
            )));
        }
        let ex = self.tokenizers.example(prompt)?;
        let speech_len = prompt_words * self.tokenizers.language.speech_tokens_per_word;
        let blocks = speech_len / SPEECH_PER_GESTURE;
        let mut prompt_stream = ex.stream.clone();
        prompt_stream.entries.truncate(1 + blocks * BLOCK);
        prompt_stream.truncated = false;
        let prompt_text = self.tokenizers.text.encode(&words[..prompt_words].join(" "));
        // a leading space keeps the word boundary the tokenizer saw in training
        let target = self.tokenizers.text.encode(&format!(" {text}"));
        let cont = self.backbone.generate_cloned(
            &target,
            &prompt_text,
            &prompt_stream,
            self.sampling(seed),
            self.cfg.sampling.max_len,
        )?;
        let mut full = prompt_stream.clone();
        full.entries.extend_from_slice(&cont.entries[1..]);
        let mut full_text = prompt_text;
        full_text.extend_from_slice(&target);
        self.finish(text, cont, &full_text, &full, blocks, seed)
    }

    /// Ground-truth speech of a clip in, sampled gestures out.
    pub fn speech_to_gesture(&self, clip: &LoadedClip, seed: u64) -> Result<Synthesis> {
        let ids = self.tokenizers.text.encode(&clip.text);
        let speech = self.tokenizers.codec_tokens(&clip.speech)?;
        let gestures = self.backbone.generate_s2g(&ids, &speech, self.sampling(seed))?;
        let stream = build_stream(&speech, &gestures)?;
        self.finish(&clip.text, stream.clone(), &ids, &stream, 0, seed)
    }
}

/// Seeded epoch-shuffled index stream.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// Random gesture-aligned crop start for a clip of `frames` frames.
    fn crop(&mut self, frames: usize, window: usize) -> usize {
        self.rng.random_range(0..=(frames - window) / DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR
    }
}

pub struct Pipeline {
    cfg: RunConfig,
    root: PathBuf,
    hash: String,
    verbose: bool,
}

fn report_every(steps: usize) -> usize {
    (steps / 20).max(1)
}

impl Pipeline {
    /// Validate the config and resolve the output root.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = std::path::absolute(&cfg.out_dir)?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            root,
            verbose: true,
        })
    }

    /// Suppress progress output.
    pub fn quiet(mut self) -> Self {
        self.verbose = false;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn artifact_path(&self, stage: Stage) -> Option<PathBuf> {
        stage.artifact().map(|(rel, _)| self.root.join(rel))
    }

    fn progress(&self, stage: Stage, msg: impl std::fmt::Display) {
        if self.verbose {
            eprintln!("[{}] {msg}", stage.slug());
        }
    }

    fn begin(&self, stage: Stage) -> Result<()> {
        let dir = self.root.join("configs");
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(format!("{}.cfg", stage.slug())), self.cfg.to_text().as_bytes())?;
        self.progress(stage, format_args!("config {}", self.hash));
        Ok(())
    }

    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let (rel, what) = stage.artifact().expect("stage with an artifact");
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(PipelineError::MissingStage {
                what,
                command: stage.command(),
                path,
            });
        }
        Ok(path)
    }

    fn write_log(&self, stage: Stage, log: &str) -> Result<()> {
        let dir = self.root.join("logs");
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(format!("{}.log", stage.slug())), log.as_bytes())?;
        Ok(())
    }

    fn save_checkpoint<T: Scalar>(&self, stage: Stage, mut ck: Checkpoint<T>) -> Result<()> {
        ck.set(CONFIG_HASH_KEY, &self.hash);
        ck.set("run.seed", self.cfg.seed);
        let path = self.root.join(stage.artifact().expect("checkpoint stage").0);
        ck.save(&path)?;
        self.progress(stage, format_args!("wrote {}", path.display()));
        Ok(())
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, stage.slug())
    }

    pub fn language(&self) -> Result<SyntheticLanguage> {
        Ok(SyntheticLanguage::new(self.cfg.language_spec())?)
    }

    fn voice(&self) -> SyntheticVoice {
        let spec = self.cfg.language_spec();
        SyntheticVoice::new(spec.speech_vocab, spec.seed)
    }

    // ---- corpus ----------------------------------------------------------

    pub fn generate_corpus(&self) -> Result<Manifest> {
        self.begin(Stage::Corpus)?;
        let lang = self.language()?;
        let dir = self.root.join(CORPUS_DIR);
        let manifest = corpus::generate_corpus(&lang, self.cfg.corpus.clips, &dir)?;
        let stamp = serde_json::json!({
            CONFIG_HASH_KEY: self.hash,
            "clips": manifest.records.len(),
            "holdout": self.cfg.corpus.holdout,
            "seed": lang.spec().seed,
        });
        write_atomic(&dir.join(CORPUS_STAMP), (serde_json::to_string_pretty(&stamp).expect("json") + "\n").as_bytes())?;
        self.progress(Stage::Corpus, format_args!("{} clips in {}", manifest.records.len(), dir.display()));
        Ok(manifest)
    }

    /// All corpus clips, split into (training, held-out).
    pub fn load_corpus(&self) -> Result<(Vec<LoadedClip>, Vec<LoadedClip>)> {
        self.require(Stage::Corpus)?;
        let (_, mut clips) = load_all(&self.root.join(CORPUS_DIR))?;
        let holdout = self.cfg.corpus.holdout;
        if holdout >= clips.len() {
            return Err(gelina_core::Error::InsufficientData {
                needed: holdout + 1,
                got: clips.len(),
            }
            .into());
        }
        let held = clips.split_off(clips.len() - holdout);
        Ok((clips, held))
    }

    // ---- tokenizers ------------------------------------------------------

    pub fn train_gesture_tokenizer(&self) -> Result<()> {
        let stage = Stage::GestureTokenizer;
        self.begin(stage)?;
        let (train, _) = self.load_corpus()?;
        let g = &self.cfg.gesture;
        let clips: Vec<&MotionSequence<f32>> = train
            .iter()
            .map(|c| &c.motion)
            .filter(|m| m.num_frames() >= g.window)
            .collect();
        if clips.is_empty() {
            return Err(gelina_core::Error::InsufficientData { needed: 1, got: 0 }.into());
        }
        let seed = self.stage_seed(stage);
        let mut model = GestureTokenizer::<f32>::new(self.cfg.rvq_config(), seed)?;
        let mut opt = AdamW::new(0.0);
        let mut batches = Batches::new(clips.len(), derive_seed(seed, "batches"));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "codebooks"));
        let mut log = String::from("step reconstruction commitment total\n");
        for step in 0..g.steps {
            let batch: Vec<MotionSequence<f32>> = batches
                .next(g.batch)
                .into_iter()
                .map(|i| {
                    let start = batches.crop(clips[i].num_frames(), g.window);
                    clips[i].window(start, g.window)
                })
                .collect::<gelina_core::Result<_>>()?;
            let l = model.train_step(&batch, &mut opt, g.lr, &mut rng)?;
            let _ = writeln!(log, "{step} {:.6} {:.6} {:.6}", l.reconstruction, l.commitment, l.total);
            if step % report_every(g.steps) == 0 || step + 1 == g.steps {
                self.progress(stage, format_args!("step {step}/{} loss {:.4}", g.steps, l.total));
            }
        }
        self.write_log(stage, &log)?;
        self.save_checkpoint(stage, model.to_checkpoint())
    }

    pub fn train_speech_tokenizer(&self) -> Result<()> {
        let stage = Stage::SpeechTokenizer;
        self.begin(stage)?;
        let (train, _) = self.load_corpus()?;
        let voice = self.voice();
        let bank = Filterbank::new();
        let mut frames = Vec::new();
        for c in train.iter().take(self.cfg.speech.train_clips.max(1)) {
            frames.extend(bank.frames(&voice.render(&c.speech)?));
        }
        self.progress(stage, format_args!("fitting {} codewords to {} frames", self.cfg.speech.vocab, frames.len()));
        let codec = ToyCodec::train(&frames, self.cfg.speech.vocab, self.stage_seed(stage))?;
        self.save_checkpoint(stage, codec.to_checkpoint())
    }

    pub fn train_text_tokenizer(&self) -> Result<()> {
        let stage = Stage::TextTokenizer;
        self.begin(stage)?;
        let (train, _) = self.load_corpus()?;
        let texts: Vec<&str> = train.iter().map(|c| c.text.as_str()).collect();
        let vocab = BpeVocab::train(&texts, self.cfg.text.vocab)?;
        let path = self.root.join(stage.artifact().expect("artifact").0);
        let body = vocab.to_file_string_with(&[(CONFIG_HASH_KEY, &self.hash)]);
        write_atomic(&path, body.as_bytes())?;
        self.progress(stage, format_args!("{} tokens, wrote {}", vocab.vocab_size(), path.display()));
        Ok(())
    }

    pub fn tokenizers(&self) -> Result<Tokenizers> {
        let text = BpeVocab::load(&self.require(Stage::TextTokenizer)?)?;
        let speech = ToyCodec::from_checkpoint(&Checkpoint::<f64>::load_expect(
            &self.require(Stage::SpeechTokenizer)?,
            speech::CHECKPOINT_KIND,
            speech::CHECKPOINT_VERSION,
        )?)?;
        let gesture = GestureTokenizer::from_checkpoint(&Checkpoint::<f32>::load_expect(
            &self.require(Stage::GestureTokenizer)?,
            rvq::CHECKPOINT_KIND,
            rvq::CHECKPOINT_VERSION,
        )?)?;
        Ok(Tokenizers {
            text,
            speech,
            gesture,
            voice: self.voice(),
            language: self.cfg.language_spec(),
        })
    }

    fn examples(&self, tok: &Tokenizers, clips: &[LoadedClip]) -> Result<Vec<Example>> {
        clips.iter().map(|c| tok.example(c)).collect()
    }

    fn load_backbone(&self, stage: Stage) -> Result<Backbone<f32>> {
        Ok(Backbone::from_checkpoint(&Checkpoint::<f32>::load_expect(
            &self.require(stage)?,
            backbone::CHECKPOINT_KIND,
            backbone::CHECKPOINT_VERSION,
        )?)?)
    }

    // ---- backbone --------------------------------------------------------

    fn train_backbone(&self, stage: Stage, mut model: Backbone<f32>, examples: &[Example]) -> Result<()> {
        let b = &self.cfg.backbone;
        let (steps, base_lr) = match stage {
            Stage::Pretrain => (b.pretrain_steps, b.pretrain_lr),
            _ => (b.finetune_steps, b.finetune_lr),
        };
        let warmup = (b.warmup_fraction * steps as f64).ceil() as usize;
        let seed = self.stage_seed(stage);
        let mut batches = Batches::new(examples.len(), derive_seed(seed, "batches"));
        let mut opt = AdamW::new(b.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "steps"));
        let fixed_masks = derive_seed(seed, "fixed-masks");
        let mut log = String::from("step speech_loss gesture_loss lr\n");
        for step in 0..steps {
            let idx = batches.next(b.batch);
            let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
            let lr = warmup_lr(base_lr, step, warmup);
            let step_seed: u64 = rng.random();
            let l = match stage {
                Stage::Pretrain if b.resample_masks => model.pretrain_step(&batch, &mut opt, lr, step_seed)?,
                Stage::Pretrain => {
                    let seeds: Vec<u64> = idx.iter().map(|&i| derive_seed(fixed_masks, &i.to_string())).collect();
                    model.pretrain_step_seeded(&batch, &seeds, &mut opt, lr, step_seed)?
                }
                _ => model.finetune_step(&batch, &mut opt, lr, step_seed)?,
            };
            let _ = writeln!(log, "{step} {:.6} {:.6} {lr:.3e}", l.speech, l.gesture);
            if step % report_every(steps) == 0 || step + 1 == steps {
                self.progress(
                    stage,
                    format_args!("step {step}/{steps} speech {:.4} gesture {:.4}", l.speech, l.gesture),
                );
            }
        }
        self.write_log(stage, &log)?;
        self.save_checkpoint(stage, model.to_checkpoint())
    }

    pub fn pretrain_backbone(&self) -> Result<()> {
        let stage = Stage::Pretrain;
        self.begin(stage)?;
        let tok = self.tokenizers()?;
        let (train, _) = self.load_corpus()?;
        let examples = self.examples(&tok, &train)?;
        let cfg = self.cfg.backbone_config(
            tok.text.vocab_size(),
            tok.speech.vocab_size(),
            tok.gesture.config().codebook_size,
        );
        let model = Backbone::<f32>::new(cfg, self.stage_seed(stage))?;
        self.train_backbone(stage, model, &examples)
    }

    pub fn finetune_backbone(&self) -> Result<()> {
        let stage = Stage::Finetune;
        self.begin(stage)?;
        let model = self.load_backbone(Stage::Pretrain)?;
        let tok = self.tokenizers()?;
        let (train, _) = self.load_corpus()?;
        let examples = self.examples(&tok, &train)?;
        self.train_backbone(stage, model, &examples)
    }

    // ---- flow ------------------------------------------------------------

    pub fn train_flow(&self) -> Result<()> {
        let stage = Stage::Flow;
        self.begin(stage)?;
        let model = self.load_backbone(Stage::Finetune)?;
        let tok = self.tokenizers()?;
        let (train, _) = self.load_corpus()?;
        let f = &self.cfg.flow;
        self.progress(stage, format_args!("conditioning {} clips", train.len()));
        let mut pairs = Vec::new();
        for c in train.iter().filter(|c| c.motion.num_frames() >= f.window) {
            let ex = tok.example(c)?;
            let cond = model.conditioning(&ex.text, &ex.stream)?;
            pairs.push((c.motion.to_tensor(), cond));
        }
        if pairs.is_empty() {
            return Err(gelina_core::Error::InsufficientData { needed: 1, got: 0 }.into());
        }
        let seed = self.stage_seed(stage);
        let mut net = FlowNet::<f32>::new(self.cfg.flow_config(model.config().model_dim), seed)?;
        let mut opt = AdamW::new(0.0);
        let mut batches = Batches::new(pairs.len(), derive_seed(seed, "batches"));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "steps"));
        let steps_per = f.window / DOWNSAMPLE_FACTOR;
        let mut log = String::from("step fm vel geo total\n");
        for step in 0..f.steps {
            let batch: Vec<(Tensor<f32>, Tensor<f32>)> = batches
                .next(f.batch)
                .into_iter()
                .map(|i| {
                    let (m, c) = &pairs[i];
                    let start = batches.crop(m.rows(), f.window);
                    let (w, d) = (m.cols(), c.cols());
                    let s = start / DOWNSAMPLE_FACTOR;
                    (
                        Tensor::new(vec![f.window, w], m.data()[start * w..(start + f.window) * w].to_vec()),
                        Tensor::new(vec![steps_per, d], c.data()[s * d..(s + steps_per) * d].to_vec()),
                    )
                })
                .collect();
            let l = net.train_step(&batch, &mut opt, f.lr, rng.random())?;
            let _ = writeln!(log, "{step} {:.6} {:.6} {:.6} {:.6}", l.fm, l.vel, l.geo, l.total);
            if step % report_every(f.steps) == 0 || step + 1 == f.steps {
                self.progress(stage, format_args!("step {step}/{} loss {:.4}", f.steps, l.total));
            }
        }
        self.write_log(stage, &log)?;
        self.save_checkpoint(stage, net.to_checkpoint())
    }

    // ---- metrics extractor -----------------------------------------------

    pub fn train_extractor(&self) -> Result<()> {
        let stage = Stage::Extractor;
        self.begin(stage)?;
        let (train, _) = self.load_corpus()?;
        let e = &self.cfg.extractor;
        let seed = self.stage_seed(stage);
        let mut model = GestureFeatureExtractor::new(self.cfg.extractor_config(), seed)?;
        let clips: Vec<MotionSequence<f32>> = train.into_iter().map(|c| c.motion).collect();
        let losses = model.train(&clips, e.steps, e.batch, e.lr, derive_seed(seed, "train"))?;
        let mut log = String::from("step reconstruction\n");
        for (i, l) in losses.iter().enumerate() {
            let _ = writeln!(log, "{i} {l:.6}");
        }
        if let Some(l) = losses.last() {
            self.progress(stage, format_args!("final loss {l:.5}"));
        }
        self.write_log(stage, &log)?;
        self.save_checkpoint(stage, model.to_checkpoint())
    }

    fn load_extractor(&self) -> Result<GestureFeatureExtractor> {
        Ok(GestureFeatureExtractor::from_checkpoint(&Checkpoint::<f32>::load_expect(
            &self.require(Stage::Extractor)?,
            metrics::CHECKPOINT_KIND,
            metrics::CHECKPOINT_VERSION,
        )?)?)
    }

    // ---- inference -------------------------------------------------------

    pub fn models(&self) -> Result<Models> {
        let backbone = self.load_backbone(Stage::Finetune)?;
        let flow = FlowNet::from_checkpoint(&Checkpoint::<f32>::load_expect(
            &self.require(Stage::Flow)?,
            flow::CHECKPOINT_KIND,
            flow::CHECKPOINT_VERSION,
        )?)?;
        Ok(Models {
            tokenizers: self.tokenizers()?,
            backbone,
            flow,
            cfg: self.cfg.clone(),
        })
    }

    fn find_clip(&self, id: &str) -> Result<LoadedClip> {
        let (train, held) = self.load_corpus()?;
        train
            .into_iter()
            .chain(held)
            .find(|c| c.id == id)
            .ok_or_else(|| PipelineError::Usage(format!("no clip {id:?} in the corpus")))
    }

    /// Write `synth/<name>.{tok,wav,mot,stream}`.
    pub fn write_synthesis(&self, name: &str, s: &Synthesis) -> Result<PathBuf> {
        let dir = self.root.join("synth");
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(format!("{name}.tok")), &speech_to_bytes(&s.speech)?)?;
        write_atomic(&dir.join(format!("{name}.stream")), &s.stream.to_bytes()?)?;
        if let Some(m) = &s.motion {
            write_atomic(&dir.join(format!("{name}.mot")), &motion_to_bytes(m))?;
        }
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let tmp = dir.join(format!(".{name}.wav.tmp"));
        {
            let mut w = hound::WavWriter::create(&tmp, spec)?;
            for &v in &s.waveform {
                w.write_sample(v)?;
            }
            w.finalize()?;
        }
        std::fs::rename(&tmp, dir.join(format!("{name}.wav")))?;
        Ok(dir)
    }

    fn request_seed(&self, stage: Stage, name: &str) -> u64 {
        derive_seed(self.stage_seed(stage), name)
    }

    pub fn synthesize(&self, text: &str, name: &str) -> Result<Synthesis> {
        let stage = Stage::Synthesize;
        self.begin(stage)?;
        let s = self.models()?.synthesize(text, self.request_seed(stage, name))?;
        let dir = self.write_synthesis(name, &s)?;
        self.progress(stage, format_args!("{} speech tokens, {} gestures in {}", s.speech.len(), s.gestures.len(), dir.display()));
        Ok(s)
    }

    pub fn clone_clip(&self, prompt_id: &str, prompt_words: Option<usize>, text: &str, name: &str) -> Result<Synthesis> {
        let stage = Stage::Clone;
        self.begin(stage)?;
        let prompt = self.find_clip(prompt_id)?;
        let words = prompt_words.unwrap_or_else(|| prompt.text.split(' ').count());
        let s = self.models()?.clone_from(&prompt, words, text, self.request_seed(stage, name))?;
        let dir = self.write_synthesis(name, &s)?;
        self.progress(stage, format_args!("{} speech tokens, {} gestures in {}", s.speech.len(), s.gestures.len(), dir.display()));
        Ok(s)
    }

    pub fn speech_to_gesture(&self, clip_id: &str, name: &str) -> Result<Synthesis> {
        let stage = Stage::SpeechToGesture;
        self.begin(stage)?;
        let clip = self.find_clip(clip_id)?;
        let s = self.models()?.speech_to_gesture(&clip, self.request_seed(stage, name))?;
        let dir = self.write_synthesis(name, &s)?;
        self.progress(stage, format_args!("{} gestures in {}", s.gestures.len(), dir.display()));
        Ok(s)
    }

    // ---- evaluation ------------------------------------------------------

    pub fn evaluate(&self) -> Result<EvalReport> {
        let stage = Stage::Evaluate;
        self.begin(stage)?;
        let extractor = self.load_extractor()?;
        let models = self.models()?;
        let (train, held) = self.load_corpus()?;
        let held: Vec<LoadedClip> = held.into_iter().take(self.cfg.eval.clips).collect();
        let seed = self.stage_seed(stage);
        let lang = self.language()?;
        let sigma = self.cfg.eval.beat_sigma;
        let codebook = models.tokenizers.gesture.config().codebook_size;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-tokens"));

        let mut generated = Vec::new();
        let mut token_decoded = Vec::new();
        let mut random_decoded = Vec::new();
        let (mut valid, mut bc, mut bc_n) = (0usize, 0.0, 0usize);
        for (i, c) in held.iter().enumerate() {
            let s = models.synthesize(&c.text, derive_seed(seed, &format!("clip{i}")))?;
            valid += usize::from(s.stream.validate().is_ok());
            if let Some(m) = &s.motion {
                let r = beat_consistency(m, &lang.audio_beats(s.speech.duration()), sigma);
                bc += r.score;
                bc_n += 1;
                generated.push(m.clone());
                token_decoded.push(models.tokenizers.gesture.decode(&GestureTokens::single(s.gestures.clone()))?.projected());
            }
            let n = c.motion.num_frames() / DOWNSAMPLE_FACTOR;
            let ids = (0..n).map(|_| rng.random_range(0..codebook)).collect();
            random_decoded.push(models.tokenizers.gesture.decode(&GestureTokens::single(ids))?.projected());
            if (i + 1) % report_every(held.len()) == 0 {
                self.progress(stage, format_args!("generated {}/{}", i + 1, held.len()));
            }
        }
        let real: Vec<MotionSequence<f32>> = held.iter().map(|c| c.motion.clone()).collect();
        let reference: Vec<MotionSequence<f32>> = train.iter().take(held.len()).map(|c| c.motion.clone()).collect();
        let real_stats = extract_stats(&real, &extractor)?;
        let mut notes = vec![
            format!("{CONFIG_HASH_KEY}={}", self.hash),
            "fgd_random_tokens decodes uniform random level-0 tokens with the gesture tokenizer".into(),
            "audio beats are word onsets".into(),
        ];
        let mut metrics: Vec<(&str, f64)> = Vec::new();
        // metrics that need enough clips are skipped with a note instead of failing the run
        let mut record = |name: &'static str, v: gelina_core::Result<f64>| match v {
            Ok(v) => metrics.push((name, v)),
            Err(e) => notes.push(format!("{name} unavailable: {e}")),
        };
        let fgd_to_real = |clips: &[MotionSequence<f32>]| extract_stats(clips, &extractor).and_then(|s| fgd(&real_stats, &s));
        record("fgd", fgd_to_real(&generated));
        record("fgd_token_decoder", fgd_to_real(&token_decoded));
        record("fgd_random_tokens", fgd_to_real(&random_decoded));
        record("fgd_train_reference", fgd_to_real(&reference));
        if bc_n > 0 {
            record("beat_consistency", Ok(bc / bc_n as f64));
        }
        let real_bc = mean(
            real.iter()
                .map(|m| beat_consistency(m, &lang.audio_beats(m.duration()), sigma).score),
        );
        record("beat_consistency_real", Ok(real_bc));
        let frames = self.cfg.extractor.clip_frames;
        let crop = |clips: &[MotionSequence<f32>]| -> Vec<MotionSequence<f32>> {
            clips
                .iter()
                .filter(|m| m.num_frames() >= frames)
                .map(|m| m.window(0, frames).expect("long enough"))
                .collect()
        };
        record("l1_diversity", l1_diversity(&crop(&generated)));
        record("l1_diversity_real", l1_diversity(&crop(&real)));

        let tok = &models.tokenizers;
        let examples = self.examples(tok, &held)?;
        let (sh, sn, gh, gn) = models.backbone.teacher_forced_hits(&examples)?;
        let bcfg = models.backbone.config();
        for (name, v) in [
            ("speech_accuracy", sh as f64 / sn.max(1) as f64),
            ("speech_chance", 1.0 / bcfg.speech_vocab as f64),
            ("gesture_accuracy", gh as f64 / gn.max(1) as f64),
            ("gesture_chance", 1.0 / bcfg.gesture_vocab as f64),
            ("valid_stream_fraction", valid as f64 / held.len().max(1) as f64),
            ("generated_amplitude", mean(generated.iter().map(gesture_amplitude))),
            ("real_amplitude", mean(real.iter().map(gesture_amplitude))),
        ] {
            record(name, Ok(v));
        }
        let report = EvalReport {
            metrics: metrics
                .into_iter()
                .map(|(name, value)| MetricValue {
                    name: name.to_string(),
                    value,
                })
                .collect(),
            extractor_version: extractor.version(),
            real_clips: real.len(),
            generated_clips: generated.len(),
            seed: self.cfg.seed,
            notes,
        };
        let path = self.root.join(stage.artifact().expect("artifact").0);
        std::fs::create_dir_all(path.parent().expect("eval dir"))?;
        write_atomic(&path, (report.to_json() + "\n").as_bytes())?;
        for m in &report.metrics {
            self.progress(stage, format_args!("{} = {:.5}", m.name, m.value));
        }
        Ok(report)
    }

    /// Corpus, all training stages, then evaluation.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.generate_corpus()?;
        self.train_gesture_tokenizer()?;
        self.train_speech_tokenizer()?;
        self.train_text_tokenizer()?;
        self.pretrain_backbone()?;
        self.finetune_backbone()?;
        self.train_flow()?;
        self.train_extractor()?;
        self.evaluate()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

