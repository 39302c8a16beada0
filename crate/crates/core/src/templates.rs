//! Alpaca-wrapped training samples for naïve and context-aware distillation.
//!
//! All delimiter strings live here. Loss spans are byte offsets into `full_text`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Article;
use crate::selfdata::InstructionResponsePair;

pub const ALPACA_PREAMBLE: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n\n";
pub const INSTRUCTION_HEADER: &str = "### Instruction:\n";
pub const RESPONSE_HEADER: &str = "\n\n### Response:\n";

pub const CONTEXT_PREFIX: &str = "The instruction is related to recent news: ";
pub const THEREFORE: &str = ". Therefore, ";
pub const ANSWER_DELIMITER: &str = " ANSWER: ";
/// Marker searched for when reading answers back out of generated text.
pub const ANSWER_MARKER: &str = "ANSWER:";
/// Context placeholder for instructions unrelated to the update corpus.
pub const NONE_CONTEXT: &str = "None";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("pair grounded to {0} but no article supplied")]
    MissingArticle(String),
    #[error("unrelated pair supplied with article {0}")]
    UnexpectedArticle(String),
    #[error("pair grounded to {expected} but article {got} supplied")]
    ArticleMismatch { expected: String, got: String },
    #[error("empty {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Naive,
    ContextAware,
    /// Raw article text with loss everywhere (continual language modeling baseline).
    Fact,
}

/// Which part of a context-aware response receives loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    FullResponse,
    AnswerOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub pair_ref: String,
    pub template_kind: TemplateKind,
    pub full_text: String,
    pub loss_start: usize,
    pub loss_end: usize,
}

impl TrainingSample {
    pub fn loss_text(&self) -> &str {
        &self.full_text[self.loss_start..self.loss_end]
    }

    /// The text after the `### Response:` header.
    pub fn response_field(&self) -> &str {
        match self.full_text.find(RESPONSE_HEADER) {
            Some(i) => &self.full_text[i + RESPONSE_HEADER.len()..],
            None => &self.full_text,
        }
    }
}

/// Alpaca prompt up to and including the response header.
pub fn alpaca_prompt(instruction: &str) -> String {
    let mut s = String::with_capacity(
        ALPACA_PREAMBLE.len() + INSTRUCTION_HEADER.len() + instruction.len() + RESPONSE_HEADER.len(),
    );
    s.push_str(ALPACA_PREAMBLE);
    s.push_str(INSTRUCTION_HEADER);
    s.push_str(instruction);
    s.push_str(RESPONSE_HEADER);
    s
}

/// Full Alpaca text and the byte span of `response` inside it.
pub fn render_alpaca(instruction: &str, response: &str) -> (String, std::ops::Range<usize>) {
    let mut text = alpaca_prompt(instruction);
    let start = text.len();
    text.push_str(response);
    let end = text.len();
    (text, start..end)
}

/// `The instruction is related to recent news: {context}. Therefore, {instruction} ANSWER: {response}`
pub fn context_aware_response(context: Option<&str>, instruction: &str, response: &str) -> String {
    let context = context.unwrap_or(NONE_CONTEXT);
    let mut s = String::with_capacity(
        CONTEXT_PREFIX.len() + context.len() + THEREFORE.len() + instruction.len() + ANSWER_DELIMITER.len() + response.len(),
    );
    s.push_str(CONTEXT_PREFIX);
    s.push_str(context);
    s.push_str(THEREFORE);
    s.push_str(instruction);
    s.push_str(ANSWER_DELIMITER);
    s.push_str(response);
    s
}

/// Text the model is forced to continue from when it fails to address the instruction.
pub fn forcing_suffix(instruction: &str) -> String {
    format!("{CONTEXT_PREFIX}{NONE_CONTEXT}{THEREFORE}{instruction} {ANSWER_MARKER}")
}

pub fn render_naive(pair: &InstructionResponsePair) -> Result<TrainingSample, TemplateError> {
    check_nonempty(pair)?;
    let (full_text, span) = render_alpaca(&pair.instruction, &pair.response);
    Ok(TrainingSample {
        pair_ref: pair.pair_ref(),
        template_kind: TemplateKind::Naive,
        full_text,
        loss_start: span.start,
        loss_end: span.end,
    })
}

pub fn render_context_aware(
    pair: &InstructionResponsePair,
    article: Option<&Article>,
) -> Result<TrainingSample, TemplateError> {
    render_context_aware_with(pair, article, LossScope::FullResponse)
}

pub fn render_context_aware_with(
    pair: &InstructionResponsePair,
    article: Option<&Article>,
    scope: LossScope,
) -> Result<TrainingSample, TemplateError> {
    check_nonempty(pair)?;
    match (&pair.source_article_id, article) {
        (Some(src), None) => return Err(TemplateError::MissingArticle(src.clone())),
        (None, Some(a)) => return Err(TemplateError::UnexpectedArticle(a.id.clone())),
        (Some(src), Some(a)) if *src != a.id => {
            return Err(TemplateError::ArticleMismatch { expected: src.clone(), got: a.id.clone() })
        }
        _ => {}
    }
    let response = context_aware_response(article.map(|a| a.body.as_str()), &pair.instruction, &pair.response);
    let (full_text, span) = render_alpaca(&pair.instruction, &response);
    let loss_start = match scope {
        LossScope::FullResponse => span.start,
        LossScope::AnswerOnly => span.end - pair.response.len(),
    };
    Ok(TrainingSample {
        pair_ref: pair.pair_ref(),
        template_kind: TemplateKind::ContextAware,
        full_text,
        loss_start,
        loss_end: span.end,
    })
}

pub fn render_fact(article: &Article) -> TrainingSample {
    TrainingSample {
        pair_ref: article.id.clone(),
        template_kind: TemplateKind::Fact,
        full_text: article.body.clone(),
        loss_start: 0,
        loss_end: article.body.len(),
    }
}

fn check_nonempty(pair: &InstructionResponsePair) -> Result<(), TemplateError> {
    if pair.instruction.is_empty() {
        return Err(TemplateError::Empty("instruction"));
    }
    if pair.response.is_empty() {
        return Err(TemplateError::Empty("response"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrippedAnswer {
    pub answer: String,
    pub missing_marker: bool,
}

/// Text after the first `ANSWER:`, trimmed. Without a marker the input comes back unchanged.
pub fn strip_answer(generated: &str) -> StrippedAnswer {
    match generated.find(ANSWER_MARKER) {
        Some(i) => StrippedAnswer { answer: generated[i + ANSWER_MARKER.len()..].trim().to_string(), missing_marker: false },
        None => StrippedAnswer { answer: generated.to_string(), missing_marker: true },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractedContext {
    Text(String),
    /// The model declared the instruction unrelated to recent news.
    NoneSentinel,
}

/// Context sentence emitted by a context-aware model, if the output has that shape.
pub fn extract_context(generated: &str) -> Option<ExtractedContext> {
    let start = generated.find(CONTEXT_PREFIX)? + CONTEXT_PREFIX.len();
    let rest = &generated[start..];
    let region = match rest.find(ANSWER_MARKER) {
        Some(i) => &rest[..i],
        None => rest,
    };
    let end = region.rfind(THEREFORE)?;
    let ctx = &region[..end];
    Some(if ctx == NONE_CONTEXT { ExtractedContext::NoneSentinel } else { ExtractedContext::Text(ctx.to_string()) })
}
