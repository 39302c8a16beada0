//! Self data creation: instruction and answer generation grounded to articles.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, GenerationRequest, LanguageModel};
use crate::corpus::{Article, Corpus};
use crate::templates::alpaca_prompt;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    SelfGenerated,
    FixedUnrelated,
    EvalReference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionResponsePair {
    pub instruction: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_article_id: Option<String>,
    pub origin: PairOrigin,
}

impl InstructionResponsePair {
    pub fn is_related(&self) -> bool {
        self.source_article_id.is_some()
    }

    /// Stable content-derived identifier.
    pub fn pair_ref(&self) -> String {
        let mut buf = Vec::new();
        buf.extend_from_slice(self.instruction.as_bytes());
        buf.push(0);
        buf.extend_from_slice(self.response.as_bytes());
        buf.push(0);
        buf.extend_from_slice(self.source_article_id.as_deref().unwrap_or("").as_bytes());
        text::sha256_hex(&buf)[..16].to_string()
    }
}

pub const INSTRUCTION_GEN_PREFIX: &str = "Generate questions related to the facts in the following information. ";
pub const ANSWER_GEN_PREFIX: &str = "Answer the question based on the facts from the input. ";

const QUESTION_STARTERS: &[&str] = &[
    "who", "whom", "whose", "what", "when", "where", "which", "why", "how", "is", "are", "was", "were", "do", "does",
    "did", "can", "could", "will", "would", "should", "shall", "may", "might", "has", "have", "had", "describe",
    "explain", "list", "name", "identify", "compare", "summarize", "give", "tell", "state",
];

#[derive(Debug, Error)]
pub enum SelfDataError {
    #[error("article {article_id}: {source}")]
    Backend { article_id: String, source: BackendError },
    #[error("unrelated_count {requested} exceeds the pool of {available} pairs")]
    Config { requested: usize, available: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Alpaca prompt asking the model for questions about `article`.
pub fn build_instruction_prompt(article: &Article) -> String {
    alpaca_prompt(&format!("{INSTRUCTION_GEN_PREFIX}{}", article.body))
}

/// Alpaca prompt asking the model to answer `question` from `article`.
pub fn build_answer_prompt(question: &str, article: &Article) -> String {
    alpaca_prompt(&format!("{ANSWER_GEN_PREFIX}{} {}", question.trim(), article.body))
}

fn strip_item_marker(line: &str) -> &str {
    let line = line.trim();
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    for bullet in ["- ", "* ", "• "] {
        if let Some(r) = line.strip_prefix(bullet) {
            return r.trim_start();
        }
    }
    line
}

fn looks_like_question(item: &str) -> bool {
    if item.ends_with('?') {
        return true;
    }
    let first: String = item
        .split_whitespace()
        .next()
        .unwrap_or("")
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    QUESTION_STARTERS.contains(&first.as_str())
}

/// Splits a completion into questions, one per line or numbered item.
pub fn parse_questions(completion: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in completion.lines() {
        let item = strip_item_marker(line).trim();
        if item.is_empty() || !looks_like_question(item) {
            continue;
        }
        if !out.iter().any(|q| q == item) {
            out.push(item.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenStep {
    Instructions,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLogRecord {
    pub article_id: String,
    pub step: GenStep,
    pub prompt: String,
    pub completion: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub article_id: String,
    pub pairs: Vec<InstructionResponsePair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub temperature: f64,
    pub max_total_tokens: usize,
    /// Completion budget per call when the backend can count prompt tokens.
    pub completion_tokens: usize,
    pub seed: u64,
    pub workers: usize,
    pub log_path: Option<PathBuf>,
    pub manifest_path: Option<PathBuf>,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            temperature: 0.1,
            max_total_tokens: 1024,
            completion_tokens: 256,
            seed: 0,
            workers: 4,
            log_path: None,
            manifest_path: None,
        }
    }
}

fn request_seed(base: u64, article_id: &str, step: GenStep, index: usize) -> u64 {
    let tag = format!("{base}\0{article_id}\0{step:?}\0{index}");
    let digest = Sha256::digest(tag.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn call(
    backend: &dyn LanguageModel,
    params: &GenParams,
    prompt: String,
    seed: u64,
) -> Result<(String, String), BackendError> {
    let max_total_tokens = match backend.tokenizer() {
        Some(tok) => params.max_total_tokens.min(tok.count(&prompt) + params.completion_tokens),
        None => params.max_total_tokens,
    };
    let req = GenerationRequest {
        prompt,
        max_total_tokens,
        temperature: params.temperature,
        stop_sequences: Vec::new(),
        seed: Some(seed),
    };
    let out = backend.generate(&req)?;
    Ok((req.prompt, out.text))
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, SelfDataError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    text::read_jsonl::<ManifestEntry>(path)?
        .into_iter()
        .map(|(line, r)| r.map_err(|e| SelfDataError::Manifest { line, message: e.to_string() }))
        .collect()
}

fn log_record(params: &GenParams, rec: &GenerationLogRecord) -> io::Result<()> {
    match &params.log_path {
        Some(p) => text::append_jsonl(p, rec),
        None => Ok(()),
    }
}

fn pairs_for_article(
    backend: &dyn LanguageModel,
    article: &Article,
    params: &GenParams,
    pool: &rayon::ThreadPool,
) -> Result<Vec<InstructionResponsePair>, SelfDataError> {
    let wrap = |source| SelfDataError::Backend { article_id: article.id.clone(), source };
    let seed = request_seed(params.seed, &article.id, GenStep::Instructions, 0);
    let (prompt, completion) = call(backend, params, build_instruction_prompt(article), seed).map_err(wrap)?;
    let questions = parse_questions(&completion);
    log_record(
        params,
        &GenerationLogRecord {
            article_id: article.id.clone(),
            step: GenStep::Instructions,
            prompt,
            completion,
            timestamp: now_secs(),
        },
    )?;
    if questions.is_empty() {
        log::warn!("article {}: no questions parsed", article.id);
        return Ok(Vec::new());
    }
    let answers: Vec<Result<(String, String), BackendError>> = pool.install(|| {
        questions
            .par_iter()
            .enumerate()
            .map(|(qi, q)| {
                let seed = request_seed(params.seed, &article.id, GenStep::Answer, qi);
                call(backend, params, build_answer_prompt(q, article), seed)
            })
            .collect()
    });
    let mut pairs = Vec::new();
    for (q, ans) in questions.into_iter().zip(answers) {
        let (prompt, completion) = ans.map_err(wrap)?;
        log_record(
            params,
            &GenerationLogRecord {
                article_id: article.id.clone(),
                step: GenStep::Answer,
                prompt,
                completion: completion.clone(),
                timestamp: now_secs(),
            },
        )?;
        let response = completion.trim();
        if response.is_empty() {
            log::info!("article {}: dropped empty answer to {q:?}", article.id);
            continue;
        }
        pairs.push(InstructionResponsePair {
            instruction: q,
            response: response.to_string(),
            source_article_id: Some(article.id.clone()),
            origin: PairOrigin::SelfGenerated,
        });
    }
    Ok(pairs)
}

/// Two-step self data creation: questions per article, then one answer per question.
///
/// Completed articles are appended to `params.manifest_path`; a rerun with the same
/// manifest skips them. Output is ordered by (article id, question index).
pub fn generate_pairs(
    corpus: &Corpus,
    backend: &dyn LanguageModel,
    params: &GenParams,
) -> Result<Vec<InstructionResponsePair>, SelfDataError> {
    let mut done: HashMap<String, Vec<InstructionResponsePair>> = HashMap::new();
    if let Some(path) = &params.manifest_path {
        for entry in read_manifest(path)? {
            done.insert(entry.article_id, entry.pairs);
        }
        if !done.is_empty() {
            log::info!("resuming: {} articles already complete", done.len());
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.workers.max(1))
        .build()
        .map_err(|e| SelfDataError::Pool(e.to_string()))?;
    let mut all = Vec::new();
    for article in &corpus.articles {
        if let Some(pairs) = done.remove(&article.id) {
            all.extend(pairs);
            continue;
        }
        let pairs = pairs_for_article(backend, article, params, &pool)?;
        if let Some(path) = &params.manifest_path {
            text::append_jsonl(path, &ManifestEntry { article_id: article.id.clone(), pairs: pairs.clone() })?;
        }
        all.extend(pairs);
    }
    Ok(all)
}

/// Fine-tuning set: all related pairs plus a seeded sample of unrelated ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub related: Vec<InstructionResponsePair>,
    pub unrelated: Vec<InstructionResponsePair>,
    /// Union of both, shuffled by the assembly seed.
    pub pairs: Vec<InstructionResponsePair>,
}

/// Default unrelated sample size: one per related pair.
pub fn default_unrelated_count(related: &[InstructionResponsePair]) -> usize {
    related.len()
}

pub fn assemble_dataset(
    related: &[InstructionResponsePair],
    unrelated: &[InstructionResponsePair],
    unrelated_count: usize,
    seed: u64,
) -> Result<Dataset, SelfDataError> {
    if unrelated_count > unrelated.len() {
        return Err(SelfDataError::Config { requested: unrelated_count, available: unrelated.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, unrelated.len(), unrelated_count).into_vec();
    picked.sort_unstable();
    let sampled: Vec<InstructionResponsePair> = picked.into_iter().map(|i| unrelated[i].clone()).collect();
    let mut pairs: Vec<InstructionResponsePair> = related.iter().chain(&sampled).cloned().collect();
    pairs.shuffle(&mut rng);
    Ok(Dataset { related: related.to_vec(), unrelated: sampled, pairs })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::backend::{FinishReason, GenerationResult, ScoreRequest};

    /// Scripted backend: question prompts get two numbered questions, answers echo the question.
    struct Scripted {
        calls: AtomicUsize,
        fail_after: Option<usize>,
    }

    impl LanguageModel for Scripted {
        fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail_after.is_some_and(|k| n >= k) {
                return Err(BackendError::Unavailable("down".into()));
            }
            let text = if req.prompt.contains(INSTRUCTION_GEN_PREFIX) {
                if req.prompt.contains("silent") {
                    "Nothing to ask.".to_string()
                } else {
                    "1. Who won?\n2) When was it?\nA remark.\n1. Who won?".to_string()
                }
            } else if req.prompt.contains("When was it?") && req.prompt.contains("blank") {
                "   ".to_string()
            } else {
                let q = req.prompt.split(ANSWER_GEN_PREFIX).nth(1).unwrap().split('?').next().unwrap();
                format!("answer to {q} (seed {})", req.seed.unwrap())
            };
            Ok(GenerationResult { text, finish_reason: FinishReason::Stop, token_count: 1, stop_sequence: None })
        }

        fn score_logprob(&self, _: &ScoreRequest) -> Result<f64, BackendError> {
            Err(BackendError::Unsupported("score".into()))
        }
    }

    fn scripted(fail_after: Option<usize>) -> Scripted {
        Scripted { calls: AtomicUsize::new(0), fail_after }
    }

    fn corpus() -> Corpus {
        Corpus::from_articles(
            "t",
            vec![Article::new("a1", "Body one."), Article::new("a2", "blank body"), Article::new("a3", "silent"), Article::new("a4", "Four.")],
        )
        .unwrap()
    }

    fn pair(i: usize) -> InstructionResponsePair {
        InstructionResponsePair {
            instruction: format!("u{i}"),
            response: format!("r{i}"),
            source_article_id: None,
            origin: PairOrigin::FixedUnrelated,
        }
    }

    #[test]
    fn prompts_are_literal() {
        let a = Article::new("x", "B");
        let p = build_instruction_prompt(&a);
        assert!(p.contains("### Instruction:\nGenerate questions related to the facts in the following information. B\n\n### Response:\n"));
        assert!(p.ends_with("### Response:\n"));
        assert_eq!(p, build_instruction_prompt(&a));
        let q = build_answer_prompt("Q?  \n", &a);
        assert!(q.contains("Answer the question based on the facts from the input. Q? B\n\n### Response:\n"));
    }

    #[test]
    fn parses_numbered_questions() {
        assert_eq!(parse_questions("1. Who won?\n2. When?"), vec!["Who won?", "When?"]);
        assert!(parse_questions("no questions here.").is_empty());
        assert_eq!(parse_questions("3) Describe the match.\nfiller\n- What next?\n3) Describe the match."), vec!["Describe the match.", "What next?"]);
    }

    #[test]
    fn pairs_are_grounded_and_ordered() {
        let pairs = generate_pairs(&corpus(), &scripted(None), &GenParams::default()).unwrap();
        let got: Vec<(&str, &str)> =
            pairs.iter().map(|p| (p.source_article_id.as_deref().unwrap(), p.instruction.as_str())).collect();
        // a2 loses its empty answer; a3 yields no questions.
        assert_eq!(got, vec![("a1", "Who won?"), ("a1", "When was it?"), ("a2", "Who won?"), ("a4", "Who won?"), ("a4", "When was it?")]);
        assert!(pairs.iter().all(|p| p.origin == PairOrigin::SelfGenerated));
        corpus().check_grounding(&pairs).unwrap();
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let one = generate_pairs(&corpus(), &scripted(None), &GenParams { workers: 1, ..Default::default() }).unwrap();
        let many = generate_pairs(&corpus(), &scripted(None), &GenParams { workers: 8, ..Default::default() }).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn resume_after_crash_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let full = generate_pairs(&corpus(), &scripted(None), &GenParams::default()).unwrap();

        let params = GenParams {
            log_path: Some(dir.path().join("gen.jsonl")),
            manifest_path: Some(dir.path().join("manifest.jsonl")),
            ..Default::default()
        };
        // a1 takes 3 calls, a2 takes 3, so the crash hits during a3.
        let err = generate_pairs(&corpus(), &scripted(Some(6)), &params).unwrap_err();
        assert!(matches!(err, SelfDataError::Backend { ref article_id, .. } if article_id == "a3"), "{err}");
        assert_eq!(read_manifest(params.manifest_path.as_ref().unwrap()).unwrap().len(), 2);

        let resumed_backend = scripted(None);
        let resumed = generate_pairs(&corpus(), &resumed_backend, &params).unwrap();
        assert_eq!(resumed, full);
        // Only a3 (1 call) and a4 (3 calls) are regenerated.
        assert_eq!(resumed_backend.calls.load(Ordering::SeqCst), 4);
        let manifest = read_manifest(params.manifest_path.as_ref().unwrap()).unwrap();
        let ids: Vec<&str> = manifest.iter().map(|m| m.article_id.as_str()).collect();
        assert_eq!(ids, vec!["a1", "a2", "a3", "a4"]);

        let log: Vec<GenerationLogRecord> = text::read_jsonl(params.log_path.as_ref().unwrap())
            .unwrap()
            .into_iter()
            .map(|(_, r)| r.unwrap())
            .collect();
        for p in &resumed {
            assert!(log.iter().any(|r| r.step == GenStep::Answer
                && r.prompt.contains(&p.instruction)
                && r.completion.trim() == p.response));
        }
    }

    #[test]
    fn assemble_counts_and_determinism() {
        let related = vec![InstructionResponsePair {
            instruction: "q".into(),
            response: "a".into(),
            source_article_id: Some("n1".into()),
            origin: PairOrigin::SelfGenerated,
        }];
        let pool: Vec<_> = (0..50).map(pair).collect();
        let only = assemble_dataset(&related, &pool, 0, 1).unwrap();
        assert_eq!(only.pairs, related);
        let d = assemble_dataset(&related, &pool, 20, 1).unwrap();
        assert_eq!((d.pairs.len(), d.unrelated.len()), (21, 20));
        assert_eq!(d, assemble_dataset(&related, &pool, 20, 1).unwrap());
        assert_ne!(d.pairs, assemble_dataset(&related, &pool, 20, 2).unwrap().pairs);
        assert!(matches!(assemble_dataset(&related, &pool, 51, 1), Err(SelfDataError::Config { requested: 51, available: 50 })));
        assert_eq!(default_unrelated_count(&related), 1);
    }
}
