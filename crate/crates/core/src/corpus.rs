//! Synthetic paired text / speech / gesture corpus and the on-disk dataset format.
//!
//! The language has a small vocabulary of invented words. Every word owns a
//! fixed speech-token motif and a target upper-body pose. A clip is a word
//! sequence: speech is the concatenation of the speaker-shifted motifs, motion
//! eases from one word's pose to the next, starting at each word onset, so
//! angular speed dips exactly at word boundaries.
//!
//! Files:
//! * motion: `GLNAMOTN`, u32 version, f32 frame rate, u32 frames, u32 width
//!   (157), then frames × width little-endian f32;
//! * speech tokens: `GLNASPCH`, u32 version, u32 token rate, u32 vocab,
//!   u32 count, then count little-endian u16;
//! * manifest: one JSON object per line, paths relative to the manifest.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{frame_to_feature, MotionFrame, MotionSequence, FEATURE_DIM, MOTION_FPS};
use crate::rotation::{axis_angle_to_matrix, geodesic_distance, matrix_to_rot6d, AxisAngle, RotationMatrix};
use crate::speech::{FeatureFrame, Filterbank, SpeechTokens, NUM_BANDS, SPEECH_TOKEN_RATE};
use crate::interleave::SPEECH_PER_GESTURE;
use crate::rvq::DOWNSAMPLE_FACTOR;

pub const MOTION_MAGIC: &[u8; 8] = b"GLNAMOTN";
pub const SPEECH_MAGIC: &[u8; 8] = b"GLNASPCH";
pub const FILE_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Joints driven by gesture motifs: spine, neck, head, collars and arms.
pub const GESTURE_JOINTS: [usize; 13] = [3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21];

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub num_words: usize,
    pub num_speakers: usize,
    /// Speech tokens per word; a multiple of 15.
    pub speech_tokens_per_word: usize,
    pub speech_vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a motif token is nudged to a neighbouring id.
    pub speech_jitter: f64,
    /// Standard deviation (rad) of per-occurrence pose noise.
    pub pose_jitter: f64,
    /// Per-speaker gesture amplitude multipliers.
    pub amplitudes: Vec<f64>,
    /// Per-speaker movement delay as a fraction of the word.
    pub phases: Vec<f64>,
    pub seed: u64,
}

impl Default for LanguageSpec {
    fn default() -> Self {
        Self {
            num_words: 32,
            num_speakers: 2,
            speech_tokens_per_word: 30,
            speech_vocab: 256,
            min_words: 4,
            max_words: 6,
            speech_jitter: 0.03,
            pose_jitter: 0.03,
            amplitudes: vec![1.0, 0.5],
            phases: vec![0.0, 0.125],
            seed: 0,
        }
    }
}

impl LanguageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speech_tokens_per_word == 0 || !self.speech_tokens_per_word.is_multiple_of(SPEECH_PER_GESTURE) {
            return Err(Error::Config(format!(
                "speech_tokens_per_word {} must be a positive multiple of {SPEECH_PER_GESTURE}",
                self.speech_tokens_per_word
            )));
        }
        if self.num_speakers == 0 || self.speech_vocab / self.num_speakers < 2 {
            return Err(Error::Config("each speaker needs a speech band of at least 2 ids".into()));
        }
        if self.amplitudes.len() != self.num_speakers || self.phases.len() != self.num_speakers {
            return Err(Error::Config("one amplitude and phase per speaker".into()));
        }
        if self.phases.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("phases must lie in [0, 1)".into()));
        }
        if self.num_words == 0 || self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config("word counts must be positive and ordered".into()));
        }
        if self.num_words > 14 * 5 * 14 * 5 {
            return Err(Error::Config("too many words for two-syllable spellings".into()));
        }
        Ok(())
    }

    /// Motion frames per word (20 fps at the 75 Hz speech rate).
    pub fn frames_per_word(&self) -> usize {
        self.speech_tokens_per_word / SPEECH_PER_GESTURE * DOWNSAMPLE_FACTOR
    }

    pub fn word_duration(&self) -> f64 {
        self.speech_tokens_per_word as f64 / SPEECH_TOKEN_RATE as f64
    }

    fn band(&self) -> usize {
        self.speech_vocab / self.num_speakers
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Word {
    pub text: String,
    /// Motif ids inside one speaker band.
    pub motif: Vec<usize>,
    /// Axis-angle target per gesture joint.
    pub pose: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    spec: LanguageSpec,
    words: Vec<Word>,
}

/// One generated clip held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub text: String,
    pub words: Vec<usize>,
    pub speaker: usize,
    pub speech: SpeechTokens,
    pub motion: MotionSequence<f32>,
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    (0.5 * PI * u).sin().powi(2)
}

impl SyntheticLanguage {
    pub fn new(spec: LanguageSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        const CONS: &[u8] = b"bdfgklmnprstvz";
        const VOWS: &[u8] = b"aeiou";
        let mut spellings: Vec<String> = Vec::new();
        while spellings.len() < spec.num_words {
            let w: String = (0..2)
                .flat_map(|_| {
                    [
                        CONS[rng.random_range(0..CONS.len())] as char,
                        VOWS[rng.random_range(0..VOWS.len())] as char,
                    ]
                })
                .collect();
            if !spellings.contains(&w) {
                spellings.push(w);
            }
        }
        let band = spec.band();
        let words = spellings
            .into_iter()
            .map(|text| {
                let motif = (0..spec.speech_tokens_per_word)
                    .map(|_| rng.random_range(0..band))
                    .collect();
                let pose = GESTURE_JOINTS
                    .iter()
                    .map(|&j| {
                        // the trunk moves less than the arms
                        let reach = if j < 13 { 0.15 } else { 0.6 };
                        [0; 3].map(|_| rng.random_range(-reach..reach))
                    })
                    .collect();
                Word { text, motif, pose }
            })
            .collect();
        Ok(Self { spec, words })
    }

    pub fn spec(&self) -> &LanguageSpec {
        &self.spec
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    /// Speaker-shifted speech for a word sequence, with seeded jitter.
    pub fn speak(&self, words: &[usize], speaker: usize, rng: &mut impl Rng) -> Vec<usize> {
        let band = self.spec.band();
        let mut out = Vec::with_capacity(words.len() * self.spec.speech_tokens_per_word);
        for &w in words {
            for &m in &self.words[w].motif {
                let mut id = m;
                if rng.random::<f64>() < self.spec.speech_jitter {
                    id = if rng.random::<bool>() { (m + 1) % band } else { (m + band - 1) % band };
                }
                out.push(speaker * band + id);
            }
        }
        out
    }

    /// Motion for a word sequence: from rest, ease into each word's pose
    /// starting at its onset (delayed by the speaker phase).
    pub fn gesture(&self, words: &[usize], speaker: usize, rng: &mut impl Rng) -> MotionSequence<f32> {
        let fpw = self.spec.frames_per_word();
        let amp = self.spec.amplitudes[speaker];
        let phase = self.spec.phases[speaker];
        let mut prev = vec![[0.0; 3]; GESTURE_JOINTS.len()];
        let mut data = Vec::with_capacity(words.len() * fpw * FEATURE_DIM);
        for &w in words {
            let target: Vec<[f64; 3]> = self.words[w]
                .pose
                .iter()
                .map(|p| {
                    p.map(|c| amp * (c + self.spec.pose_jitter * rng.sample::<f64, _>(StandardNormal)))
                })
                .collect();
            for k in 0..fpw {
                let u = k as f64 / fpw as f64;
                let s = smoothstep((u - phase) / (1.0 - phase));
                let mut f = MotionFrame::<f64>::rest();
                f.foot_contacts = [1.0; 4];
                for (i, &j) in GESTURE_JOINTS.iter().enumerate() {
                    let aa = [0, 1, 2].map(|c| prev[i][c] + s * (target[i][c] - prev[i][c]));
                    f.joints[j] = matrix_to_rot6d(&axis_angle_to_matrix(AxisAngle(aa)));
                }
                data.extend(frame_to_feature(&f).iter().map(|&v| v as f32));
            }
            prev = target;
        }
        MotionSequence::new(data, MOTION_FPS).expect("whole frames")
    }

    pub fn text(&self, words: &[usize]) -> String {
        words
            .iter()
            .map(|&w| self.words[w].text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Word onset times (s) of a clip lasting `duration` seconds.
    pub fn audio_beats(&self, duration: f64) -> Vec<f64> {
        let step = self.spec.word_duration();
        (0..)
            .map(|i| i as f64 * step)
            .take_while(|&t| t < duration - 1e-9)
            .collect()
    }

    /// Clip `index`, deterministic in (spec seed, index). Speakers alternate.
    pub fn clip(&self, index: usize) -> SyntheticClip {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
        let n = rng.random_range(self.spec.min_words..=self.spec.max_words);
        let words: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.words.len())).collect();
        self.clip_from_words(index, &words, index % self.spec.num_speakers, &mut rng)
    }

    pub fn clip_from_words(&self, index: usize, words: &[usize], speaker: usize, rng: &mut impl Rng) -> SyntheticClip {
        let speech = self.speak(words, speaker, rng);
        let motion = self.gesture(words, speaker, rng);
        SyntheticClip {
            id: format!("clip{index:05}"),
            text: self.text(words),
            words: words.to_vec(),
            speaker,
            speech: SpeechTokens::new(speech, self.spec.speech_vocab).expect("band ids in range"),
            motion,
        }
    }
}

/// Mean rotation angle (rad) of all joints over all frames.
pub fn gesture_amplitude<T: crate::Scalar>(m: &MotionSequence<T>) -> f64 {
    let id = RotationMatrix::<T>::identity();
    let mut total = 0.0;
    let mut n = 0usize;
    for f in 0..m.num_frames() {
        let frame = m.frame(f);
        for j in &frame.joints {
            if let Ok(r) = crate::rotation::rot6d_to_matrix(j) {
                total += geodesic_distance(&id, &r).as_f64();
            }
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Mean joint amplitude of every clip by one speaker, per speaker.
pub fn speaker_amplitudes(clips: &[SyntheticClip], num_speakers: usize) -> Vec<f64> {
    (0..num_speakers)
        .map(|s| {
            let v: Vec<f64> = clips
                .iter()
                .filter(|c| c.speaker == s)
                .map(|c| gesture_amplitude(&c.motion))
                .collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

/// Speech waveform rendering: one fixed log-band spectrum per speech id.
#[derive(Clone, Debug)]
pub struct SyntheticVoice {
    table: Vec<FeatureFrame>,
    bank: Filterbank,
}

impl SyntheticVoice {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0076_6f69_6365);
        let table = (0..vocab)
            .map(|_| [0.0; NUM_BANDS].map(|_: f64| rng.random_range(-9.0..-3.0)))
            .collect();
        Self {
            table,
            bank: Filterbank::new(),
        }
    }

    pub fn table(&self) -> &[FeatureFrame] {
        &self.table
    }

    pub fn render(&self, tokens: &SpeechTokens) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for &id in &tokens.ids {
            let f = self.table.get(id).ok_or(Error::IndexOutOfRange {
                index: id,
                bound: self.table.len(),
            })?;
            out.extend(self.bank.synthesize(f));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub text: String,
    pub speech: String,
    pub motion: String,
    pub speaker: usize,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        gelina_tensor::checkpoint::write_atomic(&dir.join(MANIFEST_NAME), self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

pub fn motion_to_bytes(m: &MotionSequence<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * m.data().len());
    out.extend_from_slice(MOTION_MAGIC);
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.frame_rate() as f32).to_le_bytes());
    out.extend_from_slice(&(m.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn header<'a>(bytes: &'a [u8], magic: &[u8; 8], len: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < len || &bytes[..8] != magic {
        return Err(Error::VersionMismatch(format!("not a {what} file")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FILE_VERSION {
        return Err(Error::VersionMismatch(format!("{what} file version {version}, expected {FILE_VERSION}")));
    }
    Ok(&bytes[..len])
}

fn word(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn motion_from_bytes(bytes: &[u8]) -> Result<MotionSequence<f32>> {
    let h = header(bytes, MOTION_MAGIC, 24, "motion")?;
    let fps = f32::from_le_bytes(h[12..16].try_into().unwrap()) as f64;
    let frames = word(h, 16) as usize;
    let width = word(h, 20) as usize;
    if width != FEATURE_DIM {
        return Err(Error::LengthMismatch {
            expected: FEATURE_DIM,
            got: width,
        });
    }
    let body = &bytes[24..];
    let expected = frames * width * 4;
    if body.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            got: body.len(),
        });
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    MotionSequence::new(data, fps)
}

pub fn speech_to_bytes(s: &SpeechTokens) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + 2 * s.len());
    out.extend_from_slice(SPEECH_MAGIC);
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&SPEECH_TOKEN_RATE.to_le_bytes());
    out.extend_from_slice(&(s.vocab as u32).to_le_bytes());
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    for &id in &s.ids {
        let v = u16::try_from(id).map_err(|_| Error::IndexOutOfRange {
            index: id,
            bound: u16::MAX as usize + 1,
        })?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn speech_from_bytes(bytes: &[u8]) -> Result<SpeechTokens> {
    let h = header(bytes, SPEECH_MAGIC, 24, "speech token")?;
    let rate = word(h, 12);
    if rate != SPEECH_TOKEN_RATE {
        return Err(Error::SampleRateMismatch {
            expected: SPEECH_TOKEN_RATE,
            got: rate,
        });
    }
    let vocab = word(h, 16) as usize;
    let count = word(h, 20) as usize;
    let body = &bytes[24..];
    if body.len() != count * 2 {
        return Err(Error::LengthMismatch {
            expected: count * 2,
            got: body.len(),
        });
    }
    let ids = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    SpeechTokens::new(ids, vocab)
}

/// A clip as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedClip {
    pub id: String,
    pub text: String,
    pub speaker: usize,
    pub speech: SpeechTokens,
    pub motion: MotionSequence<f32>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

/// Load one manifest record relative to `root`; speech and motion durations
/// must agree with each other and the record within one motion frame.
pub fn load_clip(root: &Path, r: &ManifestRecord) -> Result<LoadedClip> {
    let speech = speech_from_bytes(&read(&root.join(&r.speech))?)?;
    let motion = motion_from_bytes(&read(&root.join(&r.motion))?)?;
    let tol = 1.0 / MOTION_FPS + 1e-9;
    if (speech.duration() - motion.duration()).abs() > tol || (r.duration - motion.duration()).abs() > tol {
        return Err(Error::DurationMismatch {
            speech_s: speech.duration(),
            motion_s: motion.duration(),
        });
    }
    Ok(LoadedClip {
        id: r.id.clone(),
        text: r.text.clone(),
        speaker: r.speaker,
        speech,
        motion,
    })
}

pub fn load_all(root: &Path) -> Result<(Manifest, Vec<LoadedClip>)> {
    let m = Manifest::load(root)?;
    let clips = m.records.iter().map(|r| load_clip(root, r)).collect::<Result<_>>()?;
    Ok((m, clips))
}

/// Write a clip's files under `root` and return its manifest record.
pub fn write_clip(root: &Path, id: &str, text: &str, speaker: usize, speech: &SpeechTokens, motion: &MotionSequence<f32>) -> Result<ManifestRecord> {
    let speech_rel = format!("speech/{id}.tok");
    let motion_rel = format!("motion/{id}.mot");
    for dir in ["speech", "motion"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    gelina_tensor::checkpoint::write_atomic(&root.join(&speech_rel), &speech_to_bytes(speech)?)?;
    gelina_tensor::checkpoint::write_atomic(&root.join(&motion_rel), &motion_to_bytes(motion))?;
    Ok(ManifestRecord {
        id: id.to_string(),
        text: text.to_string(),
        speech: speech_rel,
        motion: motion_rel,
        speaker,
        duration: motion.duration(),
    })
}

/// Generate `n_clips` clips into `root` with a manifest.
pub fn generate_corpus(lang: &SyntheticLanguage, n_clips: usize, root: &Path) -> Result<Manifest> {
    if n_clips == 0 {
        return Err(Error::TooFewClips { needed: 1, got: 0 });
    }
    std::fs::create_dir_all(root)?;
    let mut manifest = Manifest::default();
    for i in 0..n_clips {
        let c = lang.clip(i);
        manifest
            .records
            .push(write_clip(root, &c.id, &c.text, c.speaker, &c.speech, &c.motion)?);
    }
    manifest.save(root)?;
    Ok(manifest)
}

/// Importing real BEAT2 recordings is not supported. A converter would
/// resample SMPL-X poses to 20 fps, keep the 25 joints of
/// [`crate::motion::JOINT_NAMES`] as 6D rotations with the four foot contacts
/// and root translation (157 values per frame), tokenize 24 kHz audio with a
/// trained speech codec, and emit the files above through [`write_clip`].
pub fn import_beat2(dir: &Path) -> Result<Manifest> {
    Err(Error::Config(format!(
        "BEAT2 import is not implemented ({}); convert clips with write_clip",
        dir.display()
    )))
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_NAME)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::NUM_JOINTS;

    #[test]
    fn rates_line_up() {
        let spec = LanguageSpec::default();
        assert_eq!(spec.frames_per_word(), 8);
        assert!((spec.word_duration() - 0.4).abs() < 1e-12);
        let lang = SyntheticLanguage::new(spec).unwrap();
        let c = lang.clip(3);
        assert_eq!(c.speech.len() * DOWNSAMPLE_FACTOR, c.motion.num_frames() * SPEECH_PER_GESTURE);
        assert_eq!(c.text.split(' ').count(), c.words.len());
    }

    #[test]
    fn three_words_of_45_tokens() {
        let spec = LanguageSpec {
            speech_tokens_per_word: 45,
            ..LanguageSpec::default()
        };
        let lang = SyntheticLanguage::new(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = lang.clip_from_words(0, &[0, 1, 2], 0, &mut rng);
        assert_eq!(c.speech.len(), 135);
        assert_eq!(c.speech.len() / SPEECH_PER_GESTURE, 9);
        assert_eq!(c.motion.num_frames(), 36);
    }

    #[test]
    fn bad_motif_length() {
        let spec = LanguageSpec {
            speech_tokens_per_word: 20,
            ..LanguageSpec::default()
        };
        assert!(SyntheticLanguage::new(spec).is_err());
    }

    #[test]
    fn speakers_use_separate_bands() {
        let lang = SyntheticLanguage::new(LanguageSpec::default()).unwrap();
        let a = lang.clip(0);
        let b = lang.clip(1);
        assert!(a.speech.ids.iter().all(|&i| i < 128));
        assert!(b.speech.ids.iter().all(|&i| (128..256).contains(&i)));
    }

    #[test]
    fn voice_renders_exact_features() {
        let voice = SyntheticVoice::new(8, 1);
        let t = SpeechTokens::new(vec![3, 1, 7], 8).unwrap();
        let w = voice.render(&t).unwrap();
        let frames = Filterbank::new().frames(&w);
        for (f, &id) in frames.iter().zip(&t.ids) {
            for (a, b) in f.iter().zip(&voice.table()[id]) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn rest_has_zero_amplitude() {
        let m = MotionSequence::<f32>::from_frames(&vec![MotionFrame::rest(); 4], MOTION_FPS).unwrap();
        assert_eq!(gesture_amplitude(&m), 0.0);
        assert_eq!(NUM_JOINTS, 25);
    }
}
