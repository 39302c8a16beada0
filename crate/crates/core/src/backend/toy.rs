use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackendError, FinishReason, GenerationRequest, GenerationResult, LanguageModel, ScoreRequest};
use crate::model::ToyLm;
use crate::tokenizer::Tokenizer;

/// In-process backend over a [`ToyLm`].
///
/// Every sequence is prefixed with the eos id, the same separator that precedes a
/// sample inside packed training rows. The prefix counts against `seq_len` but not
/// against `max_total_tokens`.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    model: ToyLm,
    tokenizer: Tokenizer,
}

impl ToyBackend {
    pub fn new(model: ToyLm, tokenizer: Tokenizer) -> Result<Self, BackendError> {
        if model.config().vocab_size != tokenizer.vocab_size() {
            return Err(BackendError::Rejected(format!(
                "model vocab {} does not match tokenizer vocab {}",
                model.config().vocab_size,
                tokenizer.vocab_size()
            )));
        }
        Ok(ToyBackend { model, tokenizer })
    }

    pub fn model(&self) -> &ToyLm {
        &self.model
    }

    fn prefixed(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![self.tokenizer.eos()];
        ids.extend(self.tokenizer.encode(text));
        ids
    }
}

fn log_softmax_at(logits: ArrayView1<f64>, idx: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits[idx] - lse
}

fn pick(logits: ArrayView1<f64>, temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let weights: Vec<f64> = logits.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i as u32;
        }
    }
    (weights.len() - 1) as u32
}

fn earliest_stop<'a>(bytes: &[u8], stops: &'a [String]) -> Option<(usize, &'a String)> {
    stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| bytes.windows(s.len()).position(|w| w == s.as_bytes()).map(|at| (at, s)))
        .min_by_key(|&(at, _)| at)
}

impl LanguageModel for ToyBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.check()?;
        let ids = self.prefixed(&req.prompt);
        let prompt_tokens = ids.len() - 1;
        let budget = req.max_total_tokens.min(self.model.config().seq_len - 1);
        if prompt_tokens >= budget {
            return Err(BackendError::Budget { prompt_tokens, budget });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed.unwrap_or(0));
        let mut state = self.model.start_decode();
        let mut logits = None;
        for &id in &ids {
            logits = Some(self.model.decode_step(&mut state, id));
        }
        let mut logits = logits.expect("prefix is non-empty");
        let mut out = Vec::new();
        let mut bytes = Vec::new();
        let mut finish = FinishReason::Length;
        let mut matched = None;
        while prompt_tokens + out.len() < budget {
            let next = pick(logits.view(), req.temperature, &mut rng);
            if self.tokenizer.is_special(next) {
                finish = FinishReason::Stop;
                break;
            }
            out.push(next);
            bytes.extend_from_slice(self.tokenizer.piece(next).expect("model emits ids inside the vocab"));
            if let Some((at, stop)) = earliest_stop(&bytes, &req.stop_sequences) {
                bytes.truncate(at);
                matched = Some(stop.clone());
                finish = FinishReason::Stop;
                break;
            }
            if prompt_tokens + out.len() < budget {
                logits = self.model.decode_step(&mut state, next);
            }
        }
        Ok(GenerationResult {
            text: String::from_utf8_lossy(&bytes).into_owned(),
            finish_reason: finish,
            token_count: out.len(),
            stop_sequence: matched,
        })
    }

    fn score_logprob(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        let cont = self.tokenizer.encode(&req.continuation);
        if cont.is_empty() {
            return Err(BackendError::Rejected("continuation must be non-empty".into()));
        }
        let mut ids = self.prefixed(&req.context);
        let n_ctx = ids.len();
        ids.extend_from_slice(&cont);
        let seq_len = self.model.config().seq_len;
        // The last continuation token is only a target, never an input.
        if ids.len() - 1 > seq_len {
            return Err(BackendError::Budget { prompt_tokens: ids.len() - 2, budget: seq_len - 1 });
        }
        let logits = self.model.forward(&ids[..ids.len() - 1]).logits;
        Ok((0..cont.len()).map(|j| log_softmax_at(logits.row(n_ctx - 1 + j), cont[j] as usize)).sum())
    }

    fn tokenizer(&self) -> Option<&Tokenizer> {
        Some(&self.tokenizer)
    }
}
