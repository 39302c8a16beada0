//! Response generation under the evaluation decoding settings, the re-prompt
//! fallback, consistency scoring, RELATED-HARD selection, grounding checks and
//! report aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, GenerationRequest, LanguageModel, RemoteBackend};
use crate::corpus::Corpus;
use crate::templates::{alpaca_prompt, extract_context, forcing_suffix, strip_answer, ExtractedContext};
use crate::text::collapse_whitespace;
use crate::tokenizer::Tokenizer;

pub const ANSWER_CONSISTENCY: &str = "answer_consistency";
pub const CONTEXT_CONSISTENCY: &str = "context_consistency";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("consistency scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("record {id}: {message}")]
    Schema { id: String, message: String },
    #[error("cannot score empty {0}")]
    EmptyText(&'static str),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub max_total_tokens: usize,
    /// Instructions longer than this are cut from the left.
    pub instruction_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { temperature: 0.1, max_total_tokens: 1024, instruction_tokens: 128, seed: 0 }
    }
}

/// Keeps the last `limit` tokens of `instruction`.
pub fn truncate_instruction(instruction: &str, limit: usize, tok: &Tokenizer) -> String {
    let pieces = tok.encode_with_offsets(instruction);
    if pieces.len() <= limit {
        return instruction.to_string();
    }
    let start = pieces[pieces.len() - limit].1.start;
    instruction[start..].to_string()
}

/// Instruction as the model sees it. Backends without a local tokenizer get it whole.
fn presented(backend: &dyn LanguageModel, instruction: &str, cfg: &DecodeConfig) -> String {
    match backend.tokenizer() {
        Some(tok) => truncate_instruction(instruction, cfg.instruction_tokens, tok),
        None => instruction.to_string(),
    }
}

fn request_seed(base: u64, instruction: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(instruction.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn request(prompt: String, instruction: &str, cfg: &DecodeConfig) -> GenerationRequest {
    GenerationRequest {
        temperature: cfg.temperature,
        seed: Some(request_seed(cfg.seed, instruction)),
        ..GenerationRequest::greedy(prompt, cfg.max_total_tokens)
    }
}

/// Raw completion for an Alpaca-wrapped instruction.
pub fn generate_response(backend: &dyn LanguageModel, instruction: &str, cfg: &DecodeConfig) -> Result<String, EvalError> {
    let shown = presented(backend, instruction, cfg);
    Ok(backend.generate(&request(alpaca_prompt(&shown), instruction, cfg))?.text)
}

/// Re-prompts with the "None" forcing suffix when `raw_output` never restates the
/// instruction. The returned text then starts with the suffix, so it carries the
/// answer marker.
pub fn reprompt_fallback(
    backend: &dyn LanguageModel,
    instruction: &str,
    raw_output: &str,
    cfg: &DecodeConfig,
) -> Result<(String, bool), EvalError> {
    let shown = presented(backend, instruction, cfg);
    if collapse_whitespace(raw_output).contains(&collapse_whitespace(&shown)) {
        return Ok((raw_output.to_string(), false));
    }
    let suffix = forcing_suffix(&shown);
    let prompt = format!("{}{suffix} ", alpaca_prompt(&shown));
    let cont = backend.generate(&request(prompt, instruction, cfg))?.text;
    Ok((format!("{suffix} {cont}"), true))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    LexicalOverlap,
    /// Server speaking `POST /v1/consistency`.
    Remote { endpoint: String },
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec::LexicalOverlap
    }
}

#[derive(Debug, Clone)]
pub enum Scorer {
    Lexical,
    Remote(RemoteBackend),
}

#[derive(Serialize)]
struct ConsistencyRequest<'a> {
    output: &'a str,
    reference: &'a str,
}

#[derive(Deserialize)]
struct ConsistencyResponse {
    score: f64,
}

impl Scorer {
    pub fn from_spec(spec: &ScorerSpec) -> Self {
        match spec {
            ScorerSpec::LexicalOverlap => Scorer::Lexical,
            ScorerSpec::Remote { endpoint } => Scorer::Remote(RemoteBackend::new(endpoint)),
        }
    }

    pub fn score(&self, output: &str, reference: &str) -> Result<f64, EvalError> {
        if output.trim().is_empty() {
            return Err(EvalError::EmptyText("output"));
        }
        if reference.trim().is_empty() {
            return Err(EvalError::EmptyText("reference"));
        }
        match self {
            Scorer::Lexical => Ok(lexical_overlap(output, reference)),
            Scorer::Remote(client) => {
                let r: ConsistencyResponse = client
                    .post_json("/v1/consistency", &ConsistencyRequest { output, reference })
                    .map_err(|e| EvalError::ScorerUnavailable(e.to_string()))?;
                if !(0.0..=1.0).contains(&r.score) {
                    return Err(EvalError::ScorerUnavailable(format!("score {} outside [0, 1]", r.score)));
                }
                Ok(r.score)
            }
        }
    }
}

pub fn consistency_score(output: &str, reference: &str, scorer: &ScorerSpec) -> Result<f64, EvalError> {
    Scorer::from_spec(scorer).score(output, reference)
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "been", "but", "by", "did", "do", "does", "for", "from", "had", "has",
    "have", "he", "her", "his", "i", "in", "is", "it", "its", "of", "on", "or", "she", "so", "that", "the", "their",
    "them", "they", "this", "to", "was", "we", "were", "what", "which", "who", "will", "with", "you",
];

fn words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn counts(ws: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for w in ws {
        *m.entry(w.as_str()).or_insert(0) += 1;
    }
    m
}

/// F1 of clipped unigram matches over lowercased, punctuation-free content words.
/// When either side has no content words, every word counts.
pub fn lexical_overlap(output: &str, reference: &str) -> f64 {
    let (all_o, all_r) = (words(output), words(reference));
    let content = |ws: &[String]| ws.iter().filter(|w| !STOPWORDS.contains(&w.as_str())).cloned().collect::<Vec<_>>();
    let (co, cr) = (content(&all_o), content(&all_r));
    let (o, r) = if co.is_empty() || cr.is_empty() { (all_o, all_r) } else { (co, cr) };
    if o.is_empty() || r.is_empty() {
        return if o.is_empty() && r.is_empty() && output.trim() == reference.trim() { 1.0 } else { 0.0 };
    }
    let (mo, mr) = (counts(&o), counts(&r));
    let common: usize = mo.iter().map(|(w, &n)| n.min(mr.get(w).copied().unwrap_or(0))).sum();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / o.len() as f64;
    let rc = common as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Subset {
    Related,
    RelatedHard,
    Unrelated,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Related, Subset::RelatedHard, Subset::Unrelated];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Related => "RELATED",
            Subset::RelatedHard => "RELATED_HARD",
            Subset::Unrelated => "UNRELATED",
        }
    }
}

/// An evaluation question with its reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub instruction: String,
    pub reference_answer: String,
    #[serde(default)]
    pub source_article_id: Option<String>,
    #[serde(default)]
    pub subsets: Vec<Subset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub method: String,
    pub instruction: String,
    pub raw_output: String,
    pub answer: String,
    #[serde(default)]
    pub extracted_context: Option<String>,
    /// The model answered "None" for the context.
    #[serde(default)]
    pub context_none: bool,
    pub reference_answer: String,
    #[serde(default)]
    pub source_article_id: Option<String>,
    pub scores: BTreeMap<String, f64>,
    pub fallback_used: bool,
    #[serde(default)]
    pub subsets: Vec<Subset>,
}

/// Builds the record for one generated output; context-aware outputs are read
/// through the answer marker and context delimiters.
pub fn score_output(
    item: &EvalItem,
    method: &str,
    raw_output: String,
    fallback_used: bool,
    corpus: &Corpus,
    scorer: &Scorer,
) -> Result<EvalRecord, EvalError> {
    let stripped = strip_answer(&raw_output);
    let answer = if stripped.missing_marker { raw_output.trim().to_string() } else { stripped.answer };
    let (extracted_context, context_none) = match extract_context(&raw_output) {
        Some(ExtractedContext::Text(t)) => (Some(t), false),
        Some(ExtractedContext::NoneSentinel) => (None, true),
        None => (None, false),
    };
    let mut scores = BTreeMap::new();
    let score_or_zero = |out: &str, reference: &str| -> Result<f64, EvalError> {
        if out.trim().is_empty() {
            Ok(0.0)
        } else {
            scorer.score(out, reference)
        }
    };
    scores.insert(ANSWER_CONSISTENCY.to_string(), score_or_zero(&answer, &item.reference_answer)?);
    if let Some(id) = &item.source_article_id {
        let article = corpus.get(id).ok_or_else(|| EvalError::Schema {
            id: item.id.clone(),
            message: format!("source article {id} not in corpus"),
        })?;
        scores.insert(CONTEXT_CONSISTENCY.to_string(), score_or_zero(&answer, &article.body)?);
    }
    Ok(EvalRecord {
        id: item.id.clone(),
        method: method.to_string(),
        instruction: item.instruction.clone(),
        raw_output,
        answer,
        extracted_context,
        context_none,
        reference_answer: item.reference_answer.clone(),
        source_article_id: item.source_article_id.clone(),
        scores,
        fallback_used,
        subsets: item.subsets.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub scorer: ScorerSpec,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { decode: DecodeConfig::default(), scorer: ScorerSpec::default(), workers: 4 }
    }
}

/// Generates and scores every item with one method's backend. Context-aware
/// methods go through the re-prompt fallback. Records come back in item order.
pub fn evaluate_method(
    backend: &dyn LanguageModel,
    method: &str,
    context_aware: bool,
    items: &[EvalItem],
    corpus: &Corpus,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>, EvalError> {
    let scorer = Scorer::from_spec(&cfg.scorer);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                let raw = generate_response(backend, &item.instruction, &cfg.decode)?;
                let (out, fallback) = if context_aware {
                    reprompt_fallback(backend, &item.instruction, &raw, &cfg.decode)?
                } else {
                    (raw, false)
                };
                score_output(item, method, out, fallback, corpus, &scorer)
            })
            .collect()
    })
}

fn required(record: &EvalRecord, metric: &str) -> Result<f64, EvalError> {
    record.scores.get(metric).copied().ok_or_else(|| EvalError::Schema {
        id: record.id.clone(),
        message: format!("missing {metric}"),
    })
}

/// Ids whose answer and context consistency are both strictly below `threshold`.
/// Scores should come from the model before the update.
pub fn build_related_hard(base_records: &[EvalRecord], threshold: f64) -> Result<BTreeSet<String>, EvalError> {
    let mut out = BTreeSet::new();
    for r in base_records {
        let a = required(r, ANSWER_CONSISTENCY)?;
        let c = required(r, CONTEXT_CONSISTENCY)?;
        if a < threshold && c < threshold {
            out.insert(r.id.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "match", content = "score", rename_all = "snake_case")]
pub enum GroundingMatch {
    Exact,
    Partial(f64),
    None,
}

/// Compares a context-aware record's self-generated context with its source article.
pub fn grounding_match(record: &EvalRecord, corpus: &Corpus, scorer: &Scorer) -> Result<GroundingMatch, EvalError> {
    let (Some(ctx), Some(id)) = (&record.extracted_context, &record.source_article_id) else {
        return Ok(GroundingMatch::None);
    };
    let Some(article) = corpus.get(id) else {
        return Ok(GroundingMatch::None);
    };
    let (ctx, body) = (collapse_whitespace(ctx), collapse_whitespace(&article.body));
    if ctx == body {
        return Ok(GroundingMatch::Exact);
    }
    if ctx.is_empty() {
        return Ok(GroundingMatch::None);
    }
    Ok(GroundingMatch::Partial(scorer.score(&ctx, &body)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSummary {
    pub n: usize,
    pub exact_match_ratio: Option<f64>,
    /// Mean consistency over non-exact records, a missing context counting 0.
    pub non_exact_consistency: Option<f64>,
}

pub fn grounding_summary(matches: &[GroundingMatch]) -> GroundingSummary {
    let n = matches.len();
    let exact = matches.iter().filter(|m| **m == GroundingMatch::Exact).count();
    let rest: Vec<f64> = matches
        .iter()
        .filter_map(|m| match m {
            GroundingMatch::Exact => None,
            GroundingMatch::Partial(s) => Some(*s),
            GroundingMatch::None => Some(0.0),
        })
        .collect();
    GroundingSummary {
        n,
        exact_match_ratio: (n > 0).then(|| exact as f64 / n as f64),
        non_exact_consistency: (!rest.is_empty()).then(|| rest.iter().sum::<f64>() / rest.len() as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub subset: Subset,
    pub metric: String,
    pub method: String,
    pub n: usize,
    /// `None` when no record of this method falls in the subset.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub methods: Vec<String>,
    pub metrics: Vec<String>,
    pub cells: Vec<ReportCell>,
}

/// Mean of every metric per subset and method. Methods keep first-seen order.
pub fn aggregate_report(records: &[EvalRecord]) -> Report {
    let mut methods: Vec<String> = Vec::new();
    let mut metrics = BTreeSet::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        metrics.extend(r.scores.keys().cloned());
    }
    let metrics: Vec<String> = metrics.into_iter().collect();
    let mut cells = Vec::new();
    for subset in Subset::ALL {
        for metric in &metrics {
            for method in &methods {
                let vals: Vec<f64> = records
                    .iter()
                    .filter(|r| &r.method == method && r.subsets.contains(&subset))
                    .filter_map(|r| r.scores.get(metric).copied())
                    .collect();
                cells.push(ReportCell {
                    subset,
                    metric: metric.clone(),
                    method: method.clone(),
                    n: vals.len(),
                    mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                });
            }
        }
    }
    Report { methods, metrics, cells }
}

impl Report {
    pub fn cell(&self, subset: Subset, metric: &str, method: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.subset == subset && c.metric == metric && c.method == method)
    }

    pub fn to_jsonl(&self) -> String {
        self.cells.iter().map(|c| serde_json::to_string(c).expect("cells serialize") + "\n").collect()
    }

    /// One table per subset: methods as rows, metrics as columns.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        for subset in Subset::ALL {
            let _ = writeln!(s, "### {}\n", subset.as_str());
            let _ = writeln!(s, "| method | {} |", self.metrics.join(" | "));
            let _ = writeln!(s, "|---|{}", "---|".repeat(self.metrics.len()));
            for method in &self.methods {
                let row: Vec<String> = self
                    .metrics
                    .iter()
                    .map(|m| match self.cell(subset, m, method).and_then(|c| c.mean) {
                        Some(v) => format!("{v:.3}"),
                        None => "n/a".into(),
                    })
                    .collect();
                let _ = writeln!(s, "| {method} | {} |", row.join(" | "));
            }
            s.push('\n');
        }
        s
    }
}

/// Published 7B-scale scores (subset, method, answer consistency, context
/// consistency). Kept for comparison; the toy model does not reproduce them.
pub const PUBLISHED_REFERENCE: &[(Subset, &str, f64, f64)] = &[
    (Subset::Related, "mixinst", 0.394, 0.626),
    (Subset::Related, "fact_ft", 0.438, 0.626),
    (Subset::Related, "naive", 0.425, 0.629),
    (Subset::Related, "context_aware", 0.445, 0.771),
    (Subset::RelatedHard, "mixinst", 0.132, 0.404),
    (Subset::RelatedHard, "fact_ft", 0.278, 0.489),
    (Subset::RelatedHard, "naive", 0.374, 0.541),
    (Subset::RelatedHard, "context_aware", 0.425, 0.706),
];
