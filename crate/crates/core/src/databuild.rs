//! Tokenization with loss masks and concatenate-and-chunk packing.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::templates::{TrainingSample, ANSWER_DELIMITER, RESPONSE_HEADER};
use crate::tokenizer::{Tokenizer, TokenizerKind, TokenizerSpec};

#[derive(Debug, Error)]
pub enum DataBuildError {
    #[error("sample {pair_ref}: loss span {start}..{end} invalid for text of {len} bytes")]
    BadSpan { pair_ref: String, start: usize, end: usize, len: usize },
    #[error("answer tail needs {needed} tokens but the budget is {budget}")]
    Truncation { needed: usize, budget: usize },
    #[error("batch_size and seq_len must be at least 1")]
    ZeroShape,
    #[error("packed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedTokenSeq {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl MaskedTokenSeq {
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&b| b).count()
    }
}

/// Encodes `sample.full_text`, marks every token overlapping the loss span and appends eos (unmasked).
pub fn tokenize_with_mask(sample: &TrainingSample, tok: &Tokenizer) -> Result<MaskedTokenSeq, DataBuildError> {
    let (start, end) = (sample.loss_start, sample.loss_end);
    let text = &sample.full_text;
    if start >= end || end > text.len() || !text.is_char_boundary(start) || !text.is_char_boundary(end) {
        return Err(DataBuildError::BadSpan { pair_ref: sample.pair_ref.clone(), start, end, len: text.len() });
    }
    let toks = tok.encode_with_offsets(text);
    let mut ids = Vec::with_capacity(toks.len() + 1);
    let mut loss_mask = Vec::with_capacity(toks.len() + 1);
    for (id, r) in toks {
        ids.push(id);
        loss_mask.push(r.start < end && r.end > start);
    }
    ids.push(tok.eos());
    loss_mask.push(false);
    Ok(MaskedTokenSeq { ids, loss_mask })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Segment {
    /// `(ids, mask)` slices for each row of `seq_len` tokens.
    pub fn rows(&self, seq_len: usize) -> impl Iterator<Item = (&[u32], &[bool])> {
        self.ids.chunks(seq_len).zip(self.mask.chunks(seq_len))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackHeader {
    pub batch_size: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub order_seed: u64,
    pub tokenizer_kind: TokenizerKind,
    pub n_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatchSet {
    pub batch_size: usize,
    pub seq_len: usize,
    pub order_seed: u64,
    pub vocab_size: usize,
    pub tokenizer_kind: TokenizerKind,
    pub segments: Vec<Segment>,
}

/// Sequence order used by [`pack_and_chunk`] for `n` inputs.
pub fn packing_order(n: usize, order_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    order
}

/// Shuffles by `order_seed`, concatenates and cuts into `batch_size * seq_len` segments.
/// The last segment is filled with pad tokens carrying no loss.
pub fn pack_and_chunk(
    seqs: &[MaskedTokenSeq],
    batch_size: usize,
    seq_len: usize,
    order_seed: u64,
    tok: &TokenizerSpec,
) -> Result<PackedBatchSet, DataBuildError> {
    if batch_size == 0 || seq_len == 0 {
        return Err(DataBuildError::ZeroShape);
    }
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for i in packing_order(seqs.len(), order_seed) {
        ids.extend_from_slice(&seqs[i].ids);
        mask.extend_from_slice(&seqs[i].loss_mask);
    }
    let seg = batch_size * seq_len;
    let n_segments = ids.len().div_ceil(seg);
    ids.resize(n_segments * seg, tok.pad);
    mask.resize(n_segments * seg, false);
    let segments = ids
        .chunks(seg)
        .zip(mask.chunks(seg))
        .map(|(i, m)| Segment { ids: i.to_vec(), mask: m.to_vec() })
        .collect();
    Ok(PackedBatchSet {
        batch_size,
        seq_len,
        order_seed,
        vocab_size: tok.vocab_size as usize,
        tokenizer_kind: tok.kind,
        segments,
    })
}

/// Byte offset where the protected ` ANSWER: {response}` tail starts, if any.
fn answer_tail_start(text: &str) -> Option<usize> {
    let from = text.find(RESPONSE_HEADER).map(|i| i + RESPONSE_HEADER.len()).unwrap_or(0);
    text[from..].find(ANSWER_DELIMITER).map(|i| from + i)
}

/// Byte offset at which the left-truncated text starts (0 when it already fits).
fn truncation_cut(text: &str, budget: usize, tok: &Tokenizer) -> Result<usize, DataBuildError> {
    let budget = budget.max(1);
    let toks = tok.encode_with_offsets(text);
    if toks.len() <= budget {
        return Ok(0);
    }
    if let Some(tail) = answer_tail_start(text) {
        let needed = tok.count(&text[tail..]);
        if needed > budget {
            return Err(DataBuildError::Truncation { needed, budget });
        }
    }
    let mut k = toks.len() - budget;
    loop {
        let mut cut = toks[k].1.start;
        while !text.is_char_boundary(cut) {
            cut += 1;
        }
        if tok.count(&text[cut..]) <= budget {
            return Ok(cut);
        }
        k += 1;
    }
}

/// Drops tokens from the left until `full_text` fits in `budget` tokens; the answer tail is kept intact.
pub fn left_truncate_to_budget(full_text: &str, budget: usize, tok: &Tokenizer) -> Result<String, DataBuildError> {
    let cut = truncation_cut(full_text, budget, tok)?;
    Ok(full_text[cut..].to_string())
}

/// [`left_truncate_to_budget`] applied to a sample, shifting its loss span.
pub fn truncate_sample(sample: &TrainingSample, budget: usize, tok: &Tokenizer) -> Result<TrainingSample, DataBuildError> {
    let cut = truncation_cut(&sample.full_text, budget, tok)?;
    if cut == 0 {
        return Ok(sample.clone());
    }
    let mut out = sample.clone();
    out.full_text = sample.full_text[cut..].to_string();
    out.loss_start = sample.loss_start.saturating_sub(cut).max(0);
    out.loss_end = sample.loss_end - cut.min(sample.loss_end);
    if out.loss_start >= out.loss_end {
        return Err(DataBuildError::Truncation { needed: tok.count(sample.loss_text()), budget });
    }
    Ok(out)
}

const BINARY_MAGIC: &[u8; 8] = b"SIUPACK1";

impl PackedBatchSet {
    pub fn header(&self) -> PackHeader {
        PackHeader {
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            order_seed: self.order_seed,
            tokenizer_kind: self.tokenizer_kind,
            n_segments: self.segments.len(),
        }
    }

    pub fn segment_len(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn total_masked(&self) -> usize {
        self.segments.iter().map(|s| s.mask.iter().filter(|&&b| b).count()).sum()
    }

    /// Every row of every segment.
    pub fn all_rows(&self) -> impl Iterator<Item = (&[u32], &[bool])> {
        self.segments.iter().flat_map(move |s| s.rows(self.seq_len))
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> io::Result<()> {
        serde_json::to_writer(&mut *w, &self.header())?;
        w.write_all(b"\n")?;
        for s in &self.segments {
            let mask: String = s.mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
            serde_json::to_writer(&mut *w, &serde_json::json!({ "ids": s.ids, "mask": mask }))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, DataBuildError> {
        #[derive(Deserialize)]
        struct Line {
            ids: Vec<u32>,
            mask: String,
        }
        let mut lines = r.lines();
        let head = lines.next().ok_or_else(|| DataBuildError::Format("empty file".into()))??;
        let header: PackHeader = serde_json::from_str(&head).map_err(|e| DataBuildError::Format(e.to_string()))?;
        let mut segments = Vec::with_capacity(header.n_segments);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line).map_err(|e| DataBuildError::Format(e.to_string()))?;
            let mask = l
                .mask
                .chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(DataBuildError::Format(format!("bad mask char {c:?}"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            segments.push(Segment { ids: l.ids, mask });
        }
        Self::from_parts(header, segments)
    }

    /// Magic, u32 header length, JSON header, then per segment little-endian u32 ids and an LSB-first mask bitmap.
    pub fn write_binary(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        let head = serde_json::to_vec(&self.header())?;
        w.write_all(&(head.len() as u32).to_le_bytes())?;
        w.write_all(&head)?;
        for s in &self.segments {
            for id in &s.ids {
                w.write_all(&id.to_le_bytes())?;
            }
            let mut bits = vec![0u8; s.mask.len().div_ceil(8)];
            for (i, &m) in s.mask.iter().enumerate() {
                if m {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&bits)?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self, DataBuildError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(DataBuildError::Format("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut head = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut head)?;
        let header: PackHeader = serde_json::from_slice(&head).map_err(|e| DataBuildError::Format(e.to_string()))?;
        let n = header.batch_size * header.seq_len;
        let mut segments = Vec::with_capacity(header.n_segments);
        let mut id_buf = vec![0u8; 4 * n];
        let mut bits = vec![0u8; n.div_ceil(8)];
        for _ in 0..header.n_segments {
            r.read_exact(&mut id_buf)?;
            r.read_exact(&mut bits)?;
            let ids = id_buf.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let mask = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            segments.push(Segment { ids, mask });
        }
        Self::from_parts(header, segments)
    }

    fn from_parts(h: PackHeader, segments: Vec<Segment>) -> Result<Self, DataBuildError> {
        let n = h.batch_size * h.seq_len;
        if segments.len() != h.n_segments {
            return Err(DataBuildError::Format(format!("expected {} segments, found {}", h.n_segments, segments.len())));
        }
        if let Some(bad) = segments.iter().position(|s| s.ids.len() != n || s.mask.len() != n) {
            return Err(DataBuildError::Format(format!("segment {bad} is not {n} tokens")));
        }
        Ok(PackedBatchSet {
            batch_size: h.batch_size,
            seq_len: h.seq_len,
            order_seed: h.order_seed,
            vocab_size: h.vocab_size,
            tokenizer_kind: h.tokenizer_kind,
            segments,
        })
    }

    /// Writes JSONL or binary depending on the extension (`.bin` is binary).
    pub fn save(&self, path: &Path) -> Result<(), DataBuildError> {
        let mut w = BufWriter::new(File::create(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(&mut w)?;
        } else {
            self.write_jsonl(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataBuildError> {
        let r = BufReader::new(File::open(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_binary(r)
        } else {
            Self::read_jsonl(r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::{render_context_aware, TemplateKind};
    use crate::{Article, InstructionResponsePair, PairOrigin};

    fn sample(text: &str, start: usize, end: usize) -> TrainingSample {
        TrainingSample {
            pair_ref: "p".into(),
            template_kind: TemplateKind::Naive,
            full_text: text.into(),
            loss_start: start,
            loss_end: end,
        }
    }

    fn seq(n: usize) -> MaskedTokenSeq {
        MaskedTokenSeq { ids: vec![1; n], loss_mask: (0..n).map(|i| i % 2 == 0).collect() }
    }

    #[test]
    fn mask_over_response_byte() {
        let tok = Tokenizer::byte_level();
        let s = tokenize_with_mask(&sample("ab", 1, 2), &tok).unwrap();
        assert_eq!(s.ids, vec![97, 98, 257]);
        assert_eq!(s.loss_mask, vec![false, true, false]);
    }

    #[test]
    fn empty_span_rejected() {
        let tok = Tokenizer::byte_level();
        assert!(matches!(tokenize_with_mask(&sample("ab", 1, 1), &tok), Err(DataBuildError::BadSpan { .. })));
    }

    #[test]
    fn straddling_tokens_count_as_in_span() {
        let tok = Tokenizer::from_vocab(&["abcd".into()]).unwrap();
        let s = tokenize_with_mask(&sample("abcdx", 3, 5), &tok).unwrap();
        assert_eq!(s.loss_mask, vec![true, true, false]);
    }

    #[test]
    fn twelve_tokens_two_segments() {
        let spec = Tokenizer::byte_level().spec();
        let p = pack_and_chunk(&[seq(4), seq(4), seq(4)], 2, 3, 0, &spec).unwrap();
        assert_eq!(p.segments.len(), 2);
        assert!(p.segments.iter().all(|s| s.ids.len() == 6));
    }

    #[test]
    fn thirteen_tokens_padded() {
        let spec = Tokenizer::byte_level().spec();
        let p = pack_and_chunk(&[seq(4), seq(4), seq(5)], 2, 3, 7, &spec).unwrap();
        assert_eq!(p.segments.len(), 3);
        let last = &p.segments[2];
        assert_eq!(last.ids[1..], [spec.pad; 5]);
        assert!(last.mask[1..].iter().all(|&m| !m));
    }

    #[test]
    fn zero_shape_rejected() {
        let spec = Tokenizer::byte_level().spec();
        assert!(matches!(pack_and_chunk(&[seq(2)], 0, 3, 0, &spec), Err(DataBuildError::ZeroShape)));
    }

    #[test]
    fn truncation_identity_when_fits() {
        let tok = Tokenizer::byte_level();
        assert_eq!(left_truncate_to_budget("short", 100, &tok).unwrap(), "short");
    }

    #[test]
    fn truncation_keeps_answer() {
        let tok = Tokenizer::byte_level();
        let pair = InstructionResponsePair {
            instruction: "Who?".into(),
            response: "Pep".into(),
            source_article_id: Some("a".into()),
            origin: PairOrigin::SelfGenerated,
        };
        let art = Article::new("a", "x".repeat(500));
        let s = render_context_aware(&pair, Some(&art)).unwrap();
        let t = truncate_sample(&s, 100, &tok).unwrap();
        assert!(t.full_text.len() <= 100);
        assert!(t.full_text.ends_with(" ANSWER: Pep"));
        assert!(t.full_text.starts_with('x'));
        assert!(t.loss_text().ends_with(" ANSWER: Pep"));
        assert_eq!(t.loss_start, 0);
    }

    #[test]
    fn truncation_error_when_answer_too_long() {
        let tok = Tokenizer::byte_level();
        let text = format!("{}{}", "ctx".repeat(10), " ANSWER: a long answer here");
        assert!(matches!(left_truncate_to_budget(&text, 5, &tok), Err(DataBuildError::Truncation { .. })));
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        let tok = Tokenizer::byte_level();
        let out = left_truncate_to_budget("ééééé ANSWER: a", 12, &tok).unwrap();
        assert!(out.len() <= 12);
        assert!(out.ends_with(" ANSWER: a"));
    }

    #[test]
    fn binary_and_jsonl_roundtrip() {
        let spec = Tokenizer::byte_level().spec();
        let p = pack_and_chunk(&[seq(5), seq(9), seq(3)], 2, 4, 11, &spec).unwrap();
        let mut bin = Vec::new();
        p.write_binary(&mut bin).unwrap();
        assert_eq!(PackedBatchSet::read_binary(&bin[..]).unwrap(), p);
        let mut js = Vec::new();
        p.write_jsonl(&mut js).unwrap();
        assert_eq!(PackedBatchSet::read_jsonl(&js[..]).unwrap(), p);
    }

    #[test]
    fn corrupt_binary_rejected() {
        assert!(matches!(PackedBatchSet::read_binary(&b"NOTMAGIC...."[..]), Err(DataBuildError::Format(_))));
    }
}
