#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siu_core::corpus::Article;
use siu_core::databuild::{pack_and_chunk, packing_order, tokenize_with_mask, PackedBatchSet};
use siu_core::selfdata::{InstructionResponsePair, PairOrigin};
use siu_core::templates::{render_context_aware, render_naive, TrainingSample};
use siu_core::tokenizer::Tokenizer;

const WORDS: &[&str] = &["manager", "club", "Bayern", "news", "é", "coach", "日本", "league", "x", "Therefore"];

fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..8);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// A random mix of naïve and context-aware samples, grounded or not.
pub fn random_samples(seed: u64) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..20);
    (0..n)
        .map(|i| {
            let article = rng.random_bool(0.5).then(|| Article {
                id: format!("a{i}"),
                body: phrase(&mut rng),
                title: None,
                published_at: None,
                source_tag: None,
            });
            let pair = InstructionResponsePair {
                instruction: phrase(&mut rng),
                response: phrase(&mut rng),
                source_article_id: article.as_ref().map(|a| a.id.clone()),
                origin: PairOrigin::SelfGenerated,
            };
            if rng.random_bool(0.5) {
                render_naive(&pair).unwrap()
            } else {
                render_context_aware(&pair, article.as_ref()).unwrap()
            }
        })
        .collect()
}

pub fn serialize(p: &PackedBatchSet) -> Vec<u8> {
    let mut buf = Vec::new();
    p.write_binary(&mut buf).unwrap();
    p.write_jsonl(&mut buf).unwrap();
    buf
}

/// Conservation, segment shape, serialization stability and mask provenance for one
/// randomized sample set under the byte-level tokenizer.
pub fn check_packing(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let tok = Tokenizer::byte_level();
    let samples = random_samples(seed);
    let seqs: Vec<_> = samples.iter().map(|s| tokenize_with_mask(s, &tok).unwrap()).collect();
    let (batch, seq_len) = (rng.random_range(1..5), rng.random_range(1..96));
    let order_seed = rng.random();
    let packed = pack_and_chunk(&seqs, batch, seq_len, order_seed, &tok.spec()).map_err(|e| e.to_string())?;

    let before: usize = seqs.iter().map(|s| s.masked_count()).sum();
    if packed.total_masked() != before {
        return Err(format!("seed {seed}: mask count {} != {before}", packed.total_masked()));
    }
    for seg in &packed.segments {
        if seg.ids.len() != batch * seq_len || seg.mask.len() != batch * seq_len {
            return Err(format!("seed {seed}: segment of {} tokens, expected {}", seg.ids.len(), batch * seq_len));
        }
    }
    let again = pack_and_chunk(&seqs, batch, seq_len, order_seed, &tok.spec()).unwrap();
    if serialize(&packed) != serialize(&again) {
        return Err(format!("seed {seed}: serialization differs between runs"));
    }
    // Masked bytes, read in packed order, are exactly the loss spans in packing order.
    let masked: Vec<u8> = packed
        .segments
        .iter()
        .flat_map(|s| s.ids.iter().zip(&s.mask))
        .filter(|(_, &m)| m)
        .flat_map(|(&id, _)| tok.piece(id).unwrap().to_vec())
        .collect();
    let spans: Vec<u8> =
        packing_order(samples.len(), order_seed).into_iter().flat_map(|i| samples[i].loss_text().as_bytes().to_vec()).collect();
    if masked != spans {
        return Err(format!("seed {seed}: masked tokens are not the loss spans"));
    }
    Ok(())
}

fn golden(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Renders the two worked example pairs under both templates and compares with the stored files.
pub fn check_goldens() -> Result<(), String> {
    let article = Article {
        id: "guardiola".into(),
        body: golden("article_body.txt"),
        title: None,
        published_at: None,
        source_tag: None,
    };
    let related = InstructionResponsePair {
        instruction: "How has Bayern Munich changed since Thomas Tuchel took over as manager?".into(),
        response: "The club has returned to the top of the league and is under the guidance of former Chelsea coach Thomas Tuchel."
            .into(),
        source_article_id: Some(article.id.clone()),
        origin: PairOrigin::SelfGenerated,
    };
    let unrelated = InstructionResponsePair {
        instruction: "Tell me which of the following are science fiction TV shows: Lost, The X-Files, The Mandalorian, Millennium, Game of Thrones."
            .into(),
        response: "All except Game of Thrones are classified as science fiction. Game of Thrones is considered high fantasy.".into(),
        source_article_id: None,
        origin: PairOrigin::FixedUnrelated,
    };
    let rendered = [
        ("naive_related.txt", render_naive(&related).unwrap(), related.response.clone()),
        ("naive_unrelated.txt", render_naive(&unrelated).unwrap(), unrelated.response.clone()),
        ("context_aware_related.txt", render_context_aware(&related, Some(&article)).unwrap(), String::new()),
        ("context_aware_unrelated.txt", render_context_aware(&unrelated, None).unwrap(), String::new()),
    ];
    for (file, sample, naive_target) in rendered {
        let want = golden(file);
        if sample.full_text != want {
            return Err(format!("{file}: rendered text differs from golden"));
        }
        // naïve: loss on the response only; context-aware: on the whole constructed response field
        let expected_loss = if naive_target.is_empty() { sample.response_field().to_string() } else { naive_target };
        if sample.loss_text() != expected_loss || !sample.full_text.ends_with(&expected_loss) {
            return Err(format!("{file}: loss span {:?} is not the response field", sample.loss_text()));
        }
    }
    for delim in ["The instruction is related to recent news: ", ". Therefore, ", " ANSWER: "] {
        if !golden("context_aware_related.txt").contains(delim) || !golden("context_aware_unrelated.txt").contains(delim) {
            return Err(format!("delimiter {delim:?} missing"));
        }
    }
    Ok(())
}
