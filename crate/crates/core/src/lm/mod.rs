//! Language-model backends.
//!
//! Every backend implements [`LanguageModel`]: one greedy or sampled
//! completion, `n` sampled completions, and scoring of a fixed completion
//! under a prompt (mean per-token log-probability).

mod http;
mod retry;
mod scripted;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpConfig};
pub use retry::RetryPolicy;
pub use scripted::{Matcher, Script, ScriptRule, ScriptedBackend, ScoreEntry, SimulatedError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited{}", .retry_after.map(|d| format!(" (retry after {:.1}s)", d.as_secs_f64())).unwrap_or_default())]
    RateLimited { retry_after: Option<Duration> },
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("prompt needs ~{prompt_tokens} tokens but the context limit is {limit}")]
    ContextOverflow { prompt_tokens: usize, limit: usize },
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("request rejected ({status}): {message}")]
    Api { status: u16, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("script error: {0}")]
    Script(String),
}

impl LmError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            LmError::Transport(_) | LmError::RateLimited { .. } | LmError::Server { .. }
        )
    }

    /// Delay advised by the server, if any.
    pub fn advised_delay(&self) -> Option<Duration> {
        match self {
            LmError::RateLimited { retry_after } => *retry_after,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Nucleus,
}

/// Decoding settings. `top_p` and `temperature` only apply in nucleus mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self::greedy()
    }
}

impl DecodeParams {
    pub fn greedy() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            top_p: 1.0,
            temperature: 1.0,
            max_tokens: 64,
            stop_sequences: vec!["\n\n".into()],
        }
    }

    pub fn nucleus(top_p: f64, temperature: f64) -> Self {
        Self {
            mode: DecodeMode::Nucleus,
            top_p,
            temperature,
            ..Self::greedy()
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.max_tokens == 0 {
            return Err(LmError::Precondition("max_tokens must be at least 1".into()));
        }
        if self.mode == DecodeMode::Nucleus {
            if !(self.top_p > 0.0 && self.top_p <= 1.0) {
                return Err(LmError::Precondition(format!(
                    "top_p must be in (0, 1], got {}",
                    self.top_p
                )));
            }
            if !(self.temperature > 0.0) {
                return Err(LmError::Precondition(format!(
                    "temperature must be positive, got {}",
                    self.temperature
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub finish_reason: FinishReason,
}

impl Generation {
    pub fn mean_logprob(&self) -> Option<f64> {
        let lps = self.token_logprobs.as_ref()?;
        if lps.is_empty() {
            return None;
        }
        Some(lps.iter().map(|t| t.logprob).sum::<f64>() / lps.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionScore {
    pub mean_logprob: f64,
    pub num_tokens: usize,
}

impl CompletionScore {
    pub fn from_logprobs(lps: &[f64]) -> Result<Self, LmError> {
        if lps.is_empty() {
            return Err(LmError::Protocol("no completion tokens to score".into()));
        }
        if let Some(bad) = lps.iter().find(|&&l| !(l <= 0.0)) {
            return Err(LmError::Protocol(format!("log-probability {bad} is not <= 0")));
        }
        Ok(Self {
            mean_logprob: lps.iter().sum::<f64>() / lps.len() as f64,
            num_tokens: lps.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub supports_logprobs: bool,
    pub supports_sampling: bool,
    pub max_context_tokens: usize,
}

pub trait LanguageModel: Send + Sync {
    fn name(&self) -> String;

    fn capabilities(&self) -> BackendCapabilities;

    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<Generation, LmError>;

    fn sample_n(
        &self,
        prompt: &str,
        n: usize,
        params: &DecodeParams,
    ) -> Result<Vec<Generation>, LmError> {
        check_sampling(self.capabilities(), n, params)?;
        (0..n).map(|_| self.generate(prompt, params)).collect()
    }

    fn score_completion(&self, prompt: &str, completion: &str) -> Result<CompletionScore, LmError>;
}

pub(crate) fn check_sampling(
    caps: BackendCapabilities,
    n: usize,
    params: &DecodeParams,
) -> Result<(), LmError> {
    if n == 0 {
        return Err(LmError::Precondition("n must be at least 1".into()));
    }
    if params.mode != DecodeMode::Nucleus {
        return Err(LmError::Precondition("sampling requires nucleus decoding".into()));
    }
    if !caps.supports_sampling {
        return Err(LmError::Unsupported("sampling"));
    }
    params.validate()
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn capabilities(&self) -> BackendCapabilities {
        (**self).capabilities()
    }
    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<Generation, LmError> {
        (**self).generate(prompt, params)
    }
    fn sample_n(&self, prompt: &str, n: usize, params: &DecodeParams) -> Result<Vec<Generation>, LmError> {
        (**self).sample_n(prompt, n, params)
    }
    fn score_completion(&self, prompt: &str, completion: &str) -> Result<CompletionScore, LmError> {
        (**self).score_completion(prompt, completion)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn capabilities(&self) -> BackendCapabilities {
        (**self).capabilities()
    }
    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<Generation, LmError> {
        (**self).generate(prompt, params)
    }
    fn sample_n(&self, prompt: &str, n: usize, params: &DecodeParams) -> Result<Vec<Generation>, LmError> {
        (**self).sample_n(prompt, n, params)
    }
    fn score_completion(&self, prompt: &str, completion: &str) -> Result<CompletionScore, LmError> {
        (**self).score_completion(prompt, completion)
    }
}
