//! Interleaved speech/gesture token streams.
//!
//! After BOS the body repeats blocks of 15 speech entries followed by one
//! gesture entry, so body position `p` holds a gesture iff `(p + 1) % 16 == 0`.
//! In stream indices (BOS at 0) that is: index `i > 0` is a gesture slot iff
//! `i % 16 == 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SPEECH_PER_GESTURE: usize = 15;
pub const BLOCK: usize = SPEECH_PER_GESTURE + 1;
/// Control vocabulary ids.
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const CONTROL_VOCAB: usize = 2;

pub const STREAM_MAGIC: &[u8; 8] = b"GLNASTRM";
pub const STREAM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Speech,
    Gesture,
    Bos,
    Eos,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Speech => 0,
            Modality::Gesture => 1,
            Modality::Bos => 2,
            Modality::Eos => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => Modality::Speech,
            1 => Modality::Gesture,
            2 => Modality::Bos,
            3 => Modality::Eos,
            _ => return None,
        })
    }
}

/// Modality required at stream index `i` (BOS at 0) by the positional law.
pub fn slot_modality(i: usize) -> Modality {
    match i {
        0 => Modality::Bos,
        i if i % BLOCK == 0 => Modality::Gesture,
        _ => Modality::Speech,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamEntry {
    pub modality: Modality,
    pub token: usize,
}

impl StreamEntry {
    pub fn speech(token: usize) -> Self {
        Self {
            modality: Modality::Speech,
            token,
        }
    }

    pub fn gesture(token: usize) -> Self {
        Self {
            modality: Modality::Gesture,
            token,
        }
    }

    pub fn bos() -> Self {
        Self {
            modality: Modality::Bos,
            token: BOS_ID,
        }
    }

    pub fn eos() -> Self {
        Self {
            modality: Modality::Eos,
            token: EOS_ID,
        }
    }
}

/// BOS, body, and optionally EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub entries: Vec<StreamEntry>,
    /// Generation stopped at the length limit rather than at EOS.
    pub truncated: bool,
}

/// Per-position flag: `true` positions are scored as targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    pub fn count_false(&self) -> usize {
        self.0.iter().filter(|&&b| !b).count()
    }
}

impl TokenStream {
    /// A stream holding only BOS, ready for generation.
    pub fn start() -> Self {
        Self {
            entries: vec![StreamEntry::bos()],
            truncated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn body(&self) -> &[StreamEntry] {
        let end = if self.is_terminated() {
            self.entries.len() - 1
        } else {
            self.entries.len()
        };
        &self.entries[1.min(end)..end]
    }

    pub fn is_terminated(&self) -> bool {
        self.entries.len() > 1 && self.entries.last().map(|e| e.modality) == Some(Modality::Eos)
    }

    pub fn gesture_count(&self) -> usize {
        self.body()
            .iter()
            .filter(|e| e.modality == Modality::Gesture)
            .count()
    }

    /// Check BOS, the positional law, EOS placement, and that no gesture slot
    /// is left dangling before the end. Errors carry the first offending body
    /// position.
    pub fn validate(&self) -> Result<()> {
        match self.entries.first() {
            Some(e) if e.modality == Modality::Bos => {}
            _ => return Err(Error::MalformedStream(0)),
        }
        let body = self.body();
        for (p, e) in body.iter().enumerate() {
            if e.modality != slot_modality(p + 1) {
                return Err(Error::MalformedStream(p));
            }
        }
        // a body ending right before a gesture slot is missing that gesture
        if self.is_terminated() && !body.is_empty() && slot_modality(body.len() + 1) == Modality::Gesture {
            return Err(Error::MalformedStream(body.len()));
        }
        Ok(())
    }

    /// Also check token ranges for the given vocab sizes.
    pub fn validate_vocab(&self, speech_vocab: usize, gesture_vocab: usize) -> Result<()> {
        self.validate()?;
        for e in self.body() {
            let bound = match e.modality {
                Modality::Speech => speech_vocab,
                _ => gesture_vocab,
            };
            if e.token >= bound {
                return Err(Error::IndexOutOfRange {
                    index: e.token,
                    bound,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 3 * self.entries.len());
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let id = u16::try_from(e.token).map_err(|_| Error::IndexOutOfRange {
                index: e.token,
                bound: u16::MAX as usize + 1,
            })?;
            out.push(e.modality.tag());
            out.extend_from_slice(&id.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != STREAM_MAGIC {
            return Err(Error::Format("not a token stream".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != STREAM_VERSION {
            return Err(Error::VersionMismatch(format!(
                "stream version {version}, expected {STREAM_VERSION}"
            )));
        }
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let rest = &bytes[16..];
        if rest.len() != n.checked_mul(3).ok_or_else(|| Error::Format("stream count overflow".into()))? {
            return Err(Error::Format(format!("stream body of {} bytes for {n} entries", rest.len())));
        }
        let entries = rest
            .chunks_exact(3)
            .map(|c| {
                let modality = Modality::from_tag(c[0])
                    .ok_or_else(|| Error::Format(format!("unknown modality tag {}", c[0])))?;
                Ok(StreamEntry {
                    modality,
                    token: u16::from_le_bytes([c[1], c[2]]) as usize,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            entries,
            truncated: false,
        })
    }
}

/// Interleave with each gesture token placed after its 15 speech tokens; BOS
/// first, EOS last.
pub fn build_stream(speech: &[usize], gesture: &[usize]) -> Result<TokenStream> {
    let expected = speech.len() / SPEECH_PER_GESTURE;
    if gesture.len() != expected {
        return Err(Error::RatioMismatch {
            expected,
            got: gesture.len(),
        });
    }
    let mut entries = Vec::with_capacity(speech.len() + gesture.len() + 2);
    entries.push(StreamEntry::bos());
    for (i, &s) in speech.iter().enumerate() {
        entries.push(StreamEntry::speech(s));
        if (i + 1) % SPEECH_PER_GESTURE == 0 {
            entries.push(StreamEntry::gesture(gesture[i / SPEECH_PER_GESTURE]));
        }
    }
    entries.push(StreamEntry::eos());
    Ok(TokenStream {
        entries,
        truncated: false,
    })
}

/// Inverse of [`build_stream`]: `(speech, gesture)` tokens.
pub fn split_stream(s: &TokenStream) -> Result<(Vec<usize>, Vec<usize>)> {
    s.validate()?;
    let mut speech = Vec::new();
    let mut gesture = Vec::new();
    for e in s.body() {
        match e.modality {
            Modality::Speech => speech.push(e.token),
            _ => gesture.push(e.token),
        }
    }
    Ok((speech, gesture))
}

/// Replace every gesture token by a uniform draw from the gesture vocabulary
/// and mask those positions out of the loss.
pub fn mask_for_pretrain(s: &TokenStream, gesture_vocab: usize, seed: u64) -> (TokenStream, LossMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = s.clone();
    let mut mask = vec![true; s.len()];
    for (e, m) in out.entries.iter_mut().zip(&mut mask) {
        if e.modality == Modality::Gesture {
            e.token = rng.random_range(0..gesture_vocab);
            *m = false;
        }
    }
    (out, LossMask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_blocks() {
        let s = build_stream(&[7; 75], &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(s.body().len(), 80);
        let at: Vec<usize> = s
            .body()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.modality == Modality::Gesture)
            .map(|(p, _)| p)
            .collect();
        assert_eq!(at, vec![15, 31, 47, 63, 79]);
        assert_eq!(s.len(), 82);
    }

    #[test]
    fn empty_stream_is_bos_eos() {
        let s = build_stream(&[], &[]).unwrap();
        assert_eq!(s.entries, vec![StreamEntry::bos(), StreamEntry::eos()]);
        assert_eq!(split_stream(&s).unwrap(), (vec![], vec![]));
    }

    #[test]
    fn ratio_is_enforced() {
        assert!(matches!(
            build_stream(&[0; 30], &[1]),
            Err(Error::RatioMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn misplaced_gesture_is_reported() {
        let mut s = build_stream(&[0; 15], &[3]).unwrap();
        s.entries[4] = StreamEntry::gesture(1);
        assert!(matches!(split_stream(&s), Err(Error::MalformedStream(3))));
    }

    #[test]
    fn dangling_gesture_slot_is_reported() {
        let mut s = build_stream(&[0; 15], &[3]).unwrap();
        s.entries.remove(16);
        assert!(matches!(s.validate(), Err(Error::MalformedStream(15))));
    }

    #[test]
    fn partial_trailing_block_has_no_gesture() {
        let s = build_stream(&[0; 20], &[9]).unwrap();
        assert_eq!(s.gesture_count(), 1);
        assert_eq!(s.body().len(), 21);
        s.validate().unwrap();
    }

    #[test]
    fn masking() {
        let s = build_stream(&[0; 75], &[1, 2, 3, 4, 5]).unwrap();
        let (m, mask) = mask_for_pretrain(&s, 64, 9);
        assert_eq!(mask.count_false(), 5);
        for (i, e) in m.entries.iter().enumerate() {
            assert_eq!(e.modality, s.entries[i].modality);
            assert_eq!(mask.0[i], e.modality != Modality::Gesture);
        }
        assert_eq!(mask_for_pretrain(&s, 64, 9), (m, mask));
        let plain = build_stream(&[0; 10], &[]).unwrap();
        let (same, all) = mask_for_pretrain(&plain, 64, 1);
        assert_eq!(same, plain);
        assert!(all.0.iter().all(|&b| b));
    }

    #[test]
    fn binary_roundtrip() {
        let s = build_stream(&[300; 30], &[2, 511]).unwrap();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(bytes.len(), 16 + 3 * s.len());
        assert_eq!(TokenStream::from_bytes(&bytes).unwrap(), s);
        for cut in 0..bytes.len() {
            assert!(TokenStream::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
