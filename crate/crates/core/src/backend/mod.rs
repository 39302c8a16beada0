//! Language-model interface shared by the built-in toy model and remote servers.

pub(crate) mod remote;
mod toy;

pub use remote::RemoteBackend;
pub use toy::ToyBackend;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Tokenizer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("prompt needs {prompt_tokens} tokens but the budget is {budget}")]
    Budget { prompt_tokens: usize, budget: usize },
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend does not support {0}")]
    Unsupported(String),
    #[error("request rejected: {0}")]
    Rejected(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_total_tokens: usize,
    pub temperature: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn greedy(prompt: impl Into<String>, max_total_tokens: usize) -> Self {
        GenerationRequest { prompt: prompt.into(), max_total_tokens, temperature: 0.0, stop_sequences: Vec::new(), seed: None }
    }

    fn check(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::Rejected(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        if self.max_total_tokens == 0 {
            return Err(BackendError::Rejected("max_total_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub token_count: usize,
    /// The stop sequence that ended generation, when the backend reports it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_sequence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub context: String,
    pub continuation: String,
}

impl ScoreRequest {
    pub fn new(context: impl Into<String>, continuation: impl Into<String>) -> Self {
        ScoreRequest { context: context.into(), continuation: continuation.into() }
    }
}

pub trait LanguageModel: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    /// Sum of natural-log probabilities of `continuation` given `context`.
    fn score_logprob(&self, req: &ScoreRequest) -> Result<f64, BackendError>;

    /// Local tokenizer, when the backend exposes one.
    fn tokenizer(&self) -> Option<&Tokenizer> {
        None
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(req)
    }

    fn score_logprob(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        (**self).score_logprob(req)
    }

    fn tokenizer(&self) -> Option<&Tokenizer> {
        (**self).tokenizer()
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).generate(req)
    }

    fn score_logprob(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        (**self).score_logprob(req)
    }

    fn tokenizer(&self) -> Option<&Tokenizer> {
        (**self).tokenizer()
    }
}
