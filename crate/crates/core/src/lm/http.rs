//! Client for OpenAI-compatible `/completions` endpoints.
//!
//! Request fields: `model`, `prompt`, `max_tokens`, `temperature`, `top_p`,
//! `n`, `logprobs`, `echo`, `stop`. From the response we read
//! `choices[].text`, `choices[].finish_reason` and
//! `choices[].logprobs.{tokens, token_logprobs, text_offset}`.
//!
//! Completion scoring sends `prompt + " " + completion` with `echo: true` and
//! averages the logprobs of echoed tokens whose `text_offset` (in characters)
//! falls inside the completion span. The scored span includes the joining
//! space so BPE-style leading-space tokens are kept intact.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{
    check_sampling, BackendCapabilities, CompletionScore, DecodeMode, DecodeParams, FinishReason,
    Generation, LanguageModel, LmError, RetryPolicy, TokenLogprob,
};

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Set to false for endpoints that cannot echo prompt logprobs.
    pub supports_logprobs: bool,
    pub supports_sampling: bool,
    pub max_context_tokens: usize,
    /// Characters per token used to estimate prompt length.
    pub chars_per_token: f64,
    pub max_in_flight: usize,
    pub requests_per_minute: Option<u32>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: String::new(),
            api_key_env: default_api_key_env(),
            supports_logprobs: true,
            supports_sampling: true,
            max_context_tokens: 4096,
            chars_per_token: 4.0,
            max_in_flight: 8,
            requests_per_minute: None,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    top_p: f64,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
    echo: bool,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: usize,
    text: String,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: ErrorDetail,
}

#[derive(Debug, Deserialize)]
struct ErrorDetail {
    #[serde(default)]
    message: String,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    client: Client,
    in_flight: InFlight,
    next_slot: Mutex<Instant>,
}

impl HttpBackend {
    /// Reads the API key from `config.api_key_env`; a missing variable means
    /// unauthenticated requests (useful for local servers).
    pub fn from_env(config: HttpConfig) -> Result<Self, LmError> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::new(config, api_key)
    }

    pub fn new(config: HttpConfig, api_key: Option<String>) -> Result<Self, LmError> {
        if config.model.is_empty() {
            return Err(LmError::Precondition("HTTP backend needs a model name".into()));
        }
        if config.max_context_tokens == 0 || config.chars_per_token <= 0.0 {
            return Err(LmError::Precondition(
                "max_context_tokens and chars_per_token must be positive".into(),
            ));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LmError::Transport(e.to_string()))?;
        Ok(Self {
            in_flight: InFlight {
                used: Mutex::new(0),
                freed: Condvar::new(),
                cap: config.max_in_flight.max(1),
            },
            next_slot: Mutex::new(Instant::now()),
            config,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn estimate_tokens(&self, text: &str) -> usize {
        (text.chars().count() as f64 / self.config.chars_per_token).ceil() as usize
    }

    fn check_context(&self, prompt: &str, max_tokens: u32) -> Result<(), LmError> {
        let prompt_tokens = self.estimate_tokens(prompt) + max_tokens as usize;
        if prompt_tokens > self.config.max_context_tokens {
            return Err(LmError::ContextOverflow {
                prompt_tokens,
                limit: self.config.max_context_tokens,
            });
        }
        Ok(())
    }

    /// Block until the requests-per-minute budget allows another request.
    fn pace(&self) {
        let Some(rpm) = self.config.requests_per_minute.filter(|&r| r > 0) else {
            return;
        };
        let interval = Duration::from_secs_f64(60.0 / f64::from(rpm));
        let wait = {
            let mut next = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, req: &CompletionRequest<'_>) -> Result<CompletionResponse, LmError> {
        self.config.retry.run(|_| {
            let _permit = self.in_flight.acquire();
            self.pace();
            let mut builder = self.client.post(self.endpoint()).json(req);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let resp = builder.send().map_err(|e| LmError::Transport(e.to_string()))?;
            let status = resp.status();
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(Duration::from_secs_f64);
            let body = resp.text().map_err(|e| LmError::Transport(e.to_string()))?;
            if status.is_success() {
                return serde_json::from_str(&body).map_err(|e| LmError::Protocol(e.to_string()));
            }
            Err(classify(status, retry_after, &body))
        })
    }

    fn decode_choice(&self, choice: Choice) -> Generation {
        let token_logprobs = choice.logprobs.map(|lp| {
            lp.tokens
                .into_iter()
                .zip(lp.token_logprobs)
                .filter_map(|(token, l)| l.map(|logprob| TokenLogprob { token, logprob }))
                .collect()
        });
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Other,
        };
        Generation {
            text: choice.text,
            token_logprobs,
            finish_reason,
        }
    }

    fn request<'a>(&'a self, prompt: &'a str, params: &'a DecodeParams, n: usize) -> CompletionRequest<'a> {
        let (temperature, top_p) = match params.mode {
            DecodeMode::Greedy => (0.0, 1.0),
            DecodeMode::Nucleus => (params.temperature, params.top_p),
        };
        CompletionRequest {
            model: &self.config.model,
            prompt,
            max_tokens: params.max_tokens,
            temperature,
            top_p,
            n,
            logprobs: self.config.supports_logprobs.then_some(1),
            echo: false,
            stop: &params.stop_sequences,
        }
    }
}

fn classify(status: StatusCode, retry_after: Option<Duration>, body: &str) -> LmError {
    let message = serde_json::from_str::<ErrorBody>(body)
        .map(|b| b.error.message)
        .unwrap_or_else(|_| body.chars().take(500).collect());
    if status == StatusCode::TOO_MANY_REQUESTS {
        return LmError::RateLimited { retry_after };
    }
    if status.is_server_error() {
        return LmError::Server {
            status: status.as_u16(),
            message,
        };
    }
    let lower = message.to_lowercase();
    if lower.contains("context length") || lower.contains("maximum context") {
        return LmError::ContextOverflow {
            prompt_tokens: 0,
            limit: 0,
        };
    }
    LmError::Api {
        status: status.as_u16(),
        message,
    }
}

impl LanguageModel for HttpBackend {
    fn name(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_logprobs: self.config.supports_logprobs,
            supports_sampling: self.config.supports_sampling,
            max_context_tokens: self.config.max_context_tokens,
        }
    }

    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<Generation, LmError> {
        params.validate()?;
        if params.mode == DecodeMode::Nucleus && !self.config.supports_sampling {
            return Err(LmError::Unsupported("sampling"));
        }
        self.check_context(prompt, params.max_tokens)?;
        let resp = self.post(&self.request(prompt, params, 1))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LmError::Protocol("response has no choices".into()))?;
        Ok(self.decode_choice(choice))
    }

    fn sample_n(&self, prompt: &str, n: usize, params: &DecodeParams) -> Result<Vec<Generation>, LmError> {
        check_sampling(self.capabilities(), n, params)?;
        self.check_context(prompt, params.max_tokens)?;
        let mut choices = self.post(&self.request(prompt, params, n))?.choices;
        if choices.len() != n {
            return Err(LmError::Protocol(format!(
                "asked for {n} choices, got {}",
                choices.len()
            )));
        }
        choices.sort_by_key(|c| c.index);
        Ok(choices.into_iter().map(|c| self.decode_choice(c)).collect())
    }

    fn score_completion(&self, prompt: &str, completion: &str) -> Result<CompletionScore, LmError> {
        if !self.config.supports_logprobs {
            return Err(LmError::Unsupported("log-probabilities"));
        }
        let completion = completion.trim();
        if completion.is_empty() {
            return Err(LmError::Precondition("completion must be non-empty".into()));
        }
        let full = format!("{prompt} {completion}");
        self.check_context(&full, 1)?;
        let start = prompt.chars().count();
        let end = full.chars().count();
        let req = CompletionRequest {
            model: &self.config.model,
            prompt: &full,
            max_tokens: 1,
            temperature: 0.0,
            top_p: 1.0,
            n: 1,
            logprobs: Some(0),
            echo: true,
            stop: &[],
        };
        let resp = self.post(&req)?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| LmError::Protocol("echo response carries no logprobs".into()))?;
        let scored: Vec<f64> = lp
            .text_offset
            .iter()
            .zip(&lp.token_logprobs)
            .filter(|(&off, _)| off >= start && off < end)
            .filter_map(|(_, l)| *l)
            .collect();
        CompletionScore::from_logprobs(&scored)
    }
}
