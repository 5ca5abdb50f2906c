//! Byte-level byte-pair encoding.
//!
//! Text is split into chunks before every space (the space stays with the
//! word that follows it); merges never cross a chunk boundary. Ids 0..=255 are
//! raw bytes, later ids are merged tokens in creation order.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const VOCAB_FILE_HEADER: &str = "gelina-bpe";
pub const VOCAB_FILE_VERSION: u32 = 1;

/// One merge rule: adjacent `left right` becomes `result`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<Merge>,
    ranks: HashMap<(u32, u32), usize>,
    by_bytes: HashMap<Vec<u8>, u32>,
}

fn chunks(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..text.len() {
        if text[i] == b' ' {
            out.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl BpeVocab {
    fn bytes_only() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let by_bytes = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
            by_bytes,
        }
    }

    /// Register a merge; a pair whose bytes already name a token reuses that id.
    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let result = match self.by_bytes.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.by_bytes.insert(bytes.clone(), id);
                self.tokens.push(bytes);
                id
            }
        };
        self.ranks.insert((left, right), self.merges.len());
        self.merges.push(Merge {
            left,
            right,
            result,
        });
        result
    }

    /// Learn merges until `vocab_size` tokens exist or no adjacent pair is left.
    ///
    /// Each round merges the most frequent pair; ties go to the
    /// lexicographically smallest merged byte string, then the smallest ids.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size <= 256 {
            return Err(Error::VocabTooSmall(vocab_size));
        }
        let mut vocab = Self::bytes_only();
        let mut words: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        for text in corpus {
            for c in chunks(text.as_ref().as_bytes()) {
                *words.entry(c.iter().map(|&b| b as u32).collect()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = words.into_iter().collect();
        while vocab.tokens.len() < vocab_size {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, n) in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += n;
                }
            }
            let best = counts.iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ma = [&vocab.tokens[pa.0 as usize][..], &vocab.tokens[pa.1 as usize][..]].concat();
                    let mb = [&vocab.tokens[pb.0 as usize][..], &vocab.tokens[pb.1 as usize][..]].concat();
                    // smaller string and smaller ids rank higher
                    mb.cmp(&ma).then(pb.cmp(pa))
                })
            });
            let Some((&(l, r), _)) = best else { break };
            let id = vocab.push_merge(l, r);
            for (w, _) in &mut words {
                *w = apply_merge(w, l, r, id);
            }
        }
        Ok(vocab)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len());
        for c in chunks(text.as_bytes()) {
            let mut ids: Vec<u32> = c.iter().map(|&b| b as u32).collect();
            // apply merges in training order: always the lowest-ranked pair present
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, p[0], p[1])))
                    .min();
                let Some((rank, l, r)) = best else { break };
                ids = apply_merge(&ids, l, r, self.merges[rank].result);
            }
            out.extend(ids);
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.tokens.get(id as usize).ok_or(Error::IndexOutOfRange {
                index: id as usize,
                bound: self.tokens.len(),
            })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| Error::Format(format!("decoded bytes are not UTF-8: {e}")))
    }

    /// Text form: a `gelina-bpe <version>` header, then one merge per line as
    /// two escaped byte strings separated by a single space. Bytes outside
    /// `!`..=`~`, and the backslash itself, are written as `\xHH`.
    pub fn to_file_string(&self) -> String {
        self.to_file_string_with(&[])
    }

    /// As [`Self::to_file_string`], with `key=value` attributes appended to the
    /// header line. Keys and values must not contain whitespace or `=`.
    pub fn to_file_string_with(&self, attrs: &[(&str, &str)]) -> String {
        let mut s = format!("{VOCAB_FILE_HEADER} {VOCAB_FILE_VERSION}");
        for (k, v) in attrs {
            let _ = write!(s, " {k}={v}");
        }
        s.push('\n');
        for m in &self.merges {
            let _ = writeln!(
                s,
                "{} {}",
                escape(&self.tokens[m.left as usize]),
                escape(&self.tokens[m.right as usize])
            );
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        Self::header_attributes(lines.next().unwrap_or_default())?;
        let mut vocab = Self::bytes_only();
        for (n, line) in lines.enumerate() {
            let bad = || Error::Format(format!("bad merge on line {}: {line:?}", n + 2));
            let (l, r) = line.split_once(' ').ok_or_else(bad)?;
            let l = *vocab.by_bytes.get(&unescape(l).ok_or_else(bad)?).ok_or_else(bad)?;
            let r = *vocab.by_bytes.get(&unescape(r).ok_or_else(bad)?).ok_or_else(bad)?;
            vocab.push_merge(l, r);
        }
        Ok(vocab)
    }

    /// Header attributes of a vocabulary file.
    pub fn file_attributes(s: &str) -> Result<Vec<(String, String)>> {
        Self::header_attributes(s.lines().next().unwrap_or_default())
    }

    fn header_attributes(header: &str) -> Result<Vec<(String, String)>> {
        let expected = format!("{VOCAB_FILE_HEADER} {VOCAB_FILE_VERSION}");
        let mut parts = header.split(' ');
        let head = [parts.next(), parts.next()];
        if head != [Some(VOCAB_FILE_HEADER), Some(VOCAB_FILE_VERSION.to_string().as_str())] {
            return Err(Error::VersionMismatch(format!(
                "vocab header {header:?}, expected {expected:?}"
            )));
        }
        parts
            .map(|p| {
                p.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("bad header attribute {p:?}")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        gelina_tensor::checkpoint::write_atomic(path, self.to_file_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }
}

fn apply_merge(ids: &[u32], l: u32, r: u32, to: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
            out.push(to);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        if (b'!'..=b'~').contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'\\' {
            let hex = s.get(i + 2..i + 4)?;
            if b.get(i + 1) != Some(&b'x') {
                return None;
            }
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 4;
        } else {
            out.push(b[i]);
            i += 1;
        }
    }
    (!out.is_empty()).then_some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_merge_from_aaaa() {
        let v = BpeVocab::train(&["aaaa"], 257).unwrap();
        assert_eq!(
            v.merges(),
            &[Merge {
                left: b'a' as u32,
                right: b'a' as u32,
                result: 256
            }]
        );
        assert_eq!(v.encode("aa"), vec![256]);
        assert_eq!(v.encode("aaa"), vec![256, b'a' as u32]);
    }

    #[test]
    fn vocab_must_exceed_bytes() {
        assert!(matches!(BpeVocab::train(&["abc"], 256), Err(Error::VocabTooSmall(256))));
    }

    #[test]
    fn empty_roundtrip() {
        let v = BpeVocab::train(&["hello world"], 300).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn ties_prefer_smaller_merged_string() {
        // "cd", "da" and "ab" all occur once
        let v = BpeVocab::train(&["cdab"], 257).unwrap();
        assert_eq!(v.token_bytes(256), Some(&b"ab"[..]));
    }

    #[test]
    fn spaces_start_chunks() {
        assert_eq!(chunks(b"a bc  d"), vec![&b"a"[..], b" bc", b" ", b" d"]);
        assert_eq!(chunks(b" x"), vec![&b" x"[..]]);
    }

    #[test]
    fn decode_rejects_unknown_ids() {
        let v = BpeVocab::train(&["aaaa"], 257).unwrap();
        assert!(matches!(v.decode(&[257]), Err(Error::IndexOutOfRange { index: 257, bound: 257 })));
    }

    #[test]
    fn file_roundtrip_with_escapes() {
        let v = BpeVocab::train(&["a\\b a\\b  \n\t\u{e9}\u{e9} x y x y"], 280).unwrap();
        let s = v.to_file_string();
        assert!(s.lines().skip(1).all(|l| l.split(' ').count() == 2));
        let back = BpeVocab::from_file_string(&s).unwrap();
        assert_eq!(back, v);
        assert!(BpeVocab::from_file_string("gelina-bpe 2\n").is_err());
    }
}
