//! Byte-piece tokenizers: raw bytes, whitespace-split BPE, or an external vocabulary.
//!
//! All three kinds share one representation: every id decodes to a byte string
//! ("piece"), ids `0..256` are the raw bytes, and the three special tokens
//! (bos, eos, pad) come last. Encoding tracks the byte range each token covers so
//! loss masks can be projected from character spans onto tokens.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("token id {0} out of range")]
    UnknownId(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    ByteLevel,
    WhitespaceBpe,
    ExternalVocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub kind: TokenizerKind,
    pub vocab_size: u32,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    kind: TokenizerKind,
    /// Byte string of every non-special id.
    pieces: Vec<Vec<u8>>,
    /// BPE merge list; merge `k` produces id `256 + k`.
    #[serde(default)]
    merges: Vec<(u32, u32)>,
    #[serde(skip)]
    index: PieceIndex,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct PieceIndex {
    merge_rank: HashMap<(u32, u32), u32>,
    by_bytes: HashMap<Vec<u8>, u32>,
    max_piece_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::byte_level()
    }
}

impl Tokenizer {
    /// 256 byte tokens followed by bos, eos, pad (vocab 259).
    pub fn byte_level() -> Self {
        Self::from_parts(TokenizerKind::ByteLevel, byte_pieces(), Vec::new())
    }

    /// Learns `n_merges` byte-pair merges over whitespace-delimited chunks of `texts`.
    pub fn train_bpe<'a>(texts: impl IntoIterator<Item = &'a str>, n_merges: usize) -> Self {
        let mut words: HashMap<Vec<u32>, usize> = HashMap::new();
        for t in texts {
            for chunk in split_chunks(t) {
                let ids = t.as_bytes()[chunk].iter().map(|&b| b as u32).collect();
                *words.entry(ids).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = words.into_iter().collect();
        words.sort();
        let mut pieces = byte_pieces();
        let mut merges = Vec::new();
        for _ in 0..n_merges {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, c) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += c;
                }
            }
            // most frequent; ties broken by the smaller pair
            let Some((&best, &n)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                break;
            };
            if n < 2 {
                break;
            }
            let new_id = pieces.len() as u32;
            let mut piece = pieces[best.0 as usize].clone();
            piece.extend_from_slice(&pieces[best.1 as usize]);
            pieces.push(piece);
            merges.push(best);
            for (w, _) in words.iter_mut() {
                *w = apply_merge(w, best, new_id);
            }
        }
        Self::from_parts(TokenizerKind::WhitespaceBpe, pieces, merges)
    }

    /// Byte tokens plus the given multi-byte pieces, encoded by greedy longest match.
    pub fn from_vocab(entries: &[String]) -> Result<Self, TokenizeError> {
        let mut pieces = byte_pieces();
        let mut seen: std::collections::HashSet<&[u8]> = std::collections::HashSet::new();
        for e in entries {
            if e.is_empty() {
                return Err(TokenizeError::InvalidVocab("empty entry".into()));
            }
            if e.len() == 1 || !seen.insert(e.as_bytes()) {
                continue;
            }
            pieces.push(e.as_bytes().to_vec());
        }
        Ok(Self::from_parts(TokenizerKind::ExternalVocab, pieces, Vec::new()))
    }

    fn from_parts(kind: TokenizerKind, pieces: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Self {
        let mut tok = Tokenizer { kind, pieces, merges, index: PieceIndex::default() };
        tok.rebuild_index();
        tok
    }

    /// Must be called after deserializing.
    pub fn rebuild_index(&mut self) {
        let merge_rank = self.merges.iter().enumerate().map(|(r, &p)| (p, r as u32)).collect();
        let by_bytes = self.pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        let max_piece_len = self.pieces.iter().map(Vec::len).max().unwrap_or(1);
        self.index = PieceIndex { merge_rank, by_bytes, max_piece_len };
    }

    pub fn spec(&self) -> TokenizerSpec {
        let n = self.pieces.len() as u32;
        TokenizerSpec { kind: self.kind, vocab_size: n + 3, bos: n, eos: n + 1, pad: n + 2 }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len() + 3
    }
    pub fn bos(&self) -> u32 {
        self.pieces.len() as u32
    }
    pub fn eos(&self) -> u32 {
        self.pieces.len() as u32 + 1
    }
    pub fn pad(&self) -> u32 {
        self.pieces.len() as u32 + 2
    }

    pub fn is_special(&self, id: u32) -> bool {
        id as usize >= self.pieces.len()
    }

    /// Token ids with the byte range of `text` each one covers.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<(u32, Range<usize>)> {
        let bytes = text.as_bytes();
        match self.kind {
            TokenizerKind::ByteLevel => bytes.iter().enumerate().map(|(i, &b)| (b as u32, i..i + 1)).collect(),
            TokenizerKind::WhitespaceBpe => {
                let mut out = Vec::with_capacity(bytes.len());
                for chunk in split_chunks(text) {
                    out.extend(self.bpe_chunk(&bytes[chunk.clone()], chunk.start));
                }
                out
            }
            TokenizerKind::ExternalVocab => {
                let mut out = Vec::with_capacity(bytes.len());
                let mut i = 0;
                while i < bytes.len() {
                    let max = self.index.max_piece_len.min(bytes.len() - i);
                    let (id, len) = (1..=max)
                        .rev()
                        .find_map(|len| self.index.by_bytes.get(&bytes[i..i + len]).map(|&id| (id, len)))
                        .unwrap_or((bytes[i] as u32, 1));
                    out.push((id, i..i + len));
                    i += len;
                }
                out
            }
        }
    }

    fn bpe_chunk(&self, bytes: &[u8], base: usize) -> Vec<(u32, Range<usize>)> {
        let mut toks: Vec<(u32, Range<usize>)> =
            bytes.iter().enumerate().map(|(i, &b)| (b as u32, base + i..base + i + 1)).collect();
        loop {
            let best = toks
                .windows(2)
                .enumerate()
                .filter_map(|(pos, w)| self.index.merge_rank.get(&(w[0].0, w[1].0)).map(|&r| (r, pos)))
                .min();
            let Some((rank, pos)) = best else { break };
            let span = toks[pos].1.start..toks[pos + 1].1.end;
            toks[pos] = (256 + rank, span);
            toks.remove(pos + 1);
        }
        toks
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_offsets(text).into_iter().map(|(id, _)| id).collect()
    }

    pub fn count(&self, text: &str) -> usize {
        match self.kind {
            TokenizerKind::ByteLevel => text.len(),
            _ => self.encode_with_offsets(text).len(),
        }
    }

    /// Raw bytes of `ids`; special tokens decode to nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if let Some(p) = self.pieces.get(id as usize) {
                out.extend_from_slice(p);
            }
        }
        out
    }

    /// Lossy UTF-8 decode.
    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    pub fn piece(&self, id: u32) -> Result<&[u8], TokenizeError> {
        self.pieces.get(id as usize).map(Vec::as_slice).ok_or(TokenizeError::UnknownId(id))
    }
}

fn byte_pieces() -> Vec<Vec<u8>> {
    (0..=255u8).map(|b| vec![b]).collect()
}

fn apply_merge(w: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    out
}

/// Splits `text` into chunks that each start at a whitespace run preceding a word
/// (the run stays attached to the following word).
/// Words with their trailing whitespace: a new chunk starts wherever non-whitespace
/// follows whitespace, so any text ending in whitespace ends on a chunk boundary.
fn split_chunks(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_space = false;
    for (i, c) in text.char_indices() {
        let space = c.is_whitespace();
        if !space && prev_space && i > start {
            out.push(start..i);
            start = i;
        }
        prev_space = space;
    }
    if start < text.len() {
        out.push(start..text.len());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_level_layout() {
        let t = Tokenizer::byte_level();
        let s = t.spec();
        assert_eq!(s.vocab_size, 259);
        assert_eq!((s.bos, s.eos, s.pad), (256, 257, 258));
        assert_eq!(t.encode("ab"), vec![97, 98]);
    }

    #[test]
    fn bpe_merges_frequent_pairs() {
        let corpus = ["the cat the hat the bat", "the mat"];
        let t = Tokenizer::train_bpe(corpus.iter().copied(), 10);
        let ids = t.encode("the cat");
        assert!(ids.len() < 7, "{ids:?}");
        assert_eq!(t.decode(&ids), "the cat");
        assert_eq!(t.spec().kind, TokenizerKind::WhitespaceBpe);
    }

    #[test]
    fn vocab_longest_match() {
        let t = Tokenizer::from_vocab(&["th".into(), "the".into(), " cat".into()]).unwrap();
        let toks = t.encode_with_offsets("the cat");
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0].1, 0..3);
        assert_eq!(toks[1].1, 3..7);
    }

    #[test]
    fn serde_roundtrip_rebuilds_index() {
        let t = Tokenizer::train_bpe(["aaa bbb aaa bbb"].iter().copied(), 4);
        let mut back: Tokenizer = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        back.rebuild_index();
        assert_eq!(back.encode("aaa bbb"), t.encode("aaa bbb"));
    }

    proptest! {
        #[test]
        fn byte_level_roundtrip(s in "\\PC*") {
            let t = Tokenizer::byte_level();
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }

        #[test]
        fn offsets_tile_the_input(s in "[a-z ]{0,40}") {
            let t = Tokenizer::train_bpe(["ab ab abc abc a b"].iter().copied(), 5);
            let toks = t.encode_with_offsets(&s);
            let mut pos = 0;
            for (id, r) in &toks {
                prop_assert_eq!(r.start, pos);
                prop_assert_eq!(t.piece(*id).unwrap(), &s.as_bytes()[r.clone()]);
                pos = r.end;
            }
            prop_assert_eq!(pos, s.len());
        }
    }
}
