//! Deterministic backend driven by a JSON script.
//!
//! A script is an ordered list of rules. Each rule matches prompts by
//! substring (all listed substrings must occur) and supplies the greedy
//! completion, an optional sampling rotation, and optional per-token
//! log-probabilities. The first matching rule wins; `default` catches the rest.
//!
//! Tokens are whitespace tokens: a completion's logprobs line up with
//! `completion.split_whitespace()`, and joining the tokens with single spaces
//! reconstructs the text. Completions without explicit logprobs get
//! `default_logprob` for every token.
//!
//! ```json
//! {
//!   "name": "demo",
//!   "max_context_tokens": 4096,
//!   "default_logprob": -1.0,
//!   "rules": [
//!     {"match": ["Candidate answers:", "who sang"], "completion": "Steve Earle",
//!      "logprobs": [-0.1, -0.2]},
//!     {"match": "who sang", "completion": "Tom Waits", "logprobs": [-0.4, -0.6],
//!      "samples": ["Tom Waits", "Steve Earle"]}
//!   ],
//!   "default": {"completion": "unknown"}
//! }
//! ```

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    check_sampling, BackendCapabilities, CompletionScore, DecodeParams, FinishReason, Generation,
    LanguageModel, LmError, TokenLogprob,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Matcher {
    One(String),
    All(Vec<String>),
}

impl Default for Matcher {
    fn default() -> Self {
        Matcher::All(Vec::new())
    }
}

impl Matcher {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::One(s) => prompt.contains(s.as_str()),
            Matcher::All(all) => all.iter().all(|s| prompt.contains(s.as_str())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatedError {
    Transport,
    RateLimit,
    ContextOverflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub completion: String,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(rename = "match", default)]
    pub matcher: Matcher,
    #[serde(default)]
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
    /// Sampling rotation; falls back to `[completion]` when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<String>,
    /// Extra completions this rule can score (e.g. sampled answers).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<ScoreEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<SimulatedError>,
}

fn default_context() -> usize {
    4096
}
fn default_true() -> bool {
    true
}
fn default_logprob() -> f64 {
    -1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_context")]
    pub max_context_tokens: usize,
    #[serde(default = "default_true")]
    pub supports_logprobs: bool,
    #[serde(default = "default_true")]
    pub supports_sampling: bool,
    #[serde(default = "default_logprob")]
    pub default_logprob: f64,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    pub default: ScriptRule,
}

impl Script {
    pub fn new(default_completion: &str) -> Self {
        Self {
            name: String::new(),
            max_context_tokens: default_context(),
            supports_logprobs: true,
            supports_sampling: true,
            default_logprob: default_logprob(),
            rules: Vec::new(),
            default: ScriptRule {
                completion: default_completion.into(),
                ..ScriptRule::default()
            },
        }
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| LmError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&body).map_err(|e| LmError::Script(format!("{}: {e}", path.display())))
    }

    pub fn from_json(body: &str) -> Result<Self, LmError> {
        let script: Script =
            serde_json::from_str(body).map_err(|e| LmError::Script(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.max_context_tokens == 0 {
            return Err(LmError::Script("max_context_tokens must be at least 1".into()));
        }
        if !(self.default_logprob <= 0.0) {
            return Err(LmError::Script("default_logprob must be <= 0".into()));
        }
        let check = |text: &str, lps: &[f64], which: &str| {
            let n = text.split_whitespace().count();
            if n != lps.len() {
                return Err(LmError::Script(format!(
                    "{which}: {} logprobs for {n} whitespace tokens in `{text}`",
                    lps.len()
                )));
            }
            if lps.iter().any(|&l| !(l <= 0.0)) {
                return Err(LmError::Script(format!("{which}: logprobs must be <= 0")));
            }
            Ok(())
        };
        for (i, rule) in self.rules.iter().chain([&self.default]).enumerate() {
            let which = if i == self.rules.len() {
                "default rule".to_string()
            } else {
                format!("rule {i}")
            };
            if let Some(lps) = &rule.logprobs {
                check(&rule.completion, lps, &which)?;
            }
            for s in &rule.scores {
                check(&s.completion, &s.logprobs, &which)?;
            }
        }
        Ok(())
    }

    fn rule_for(&self, prompt: &str) -> &ScriptRule {
        self.rules
            .iter()
            .find(|r| r.matcher.matches(prompt))
            .unwrap_or(&self.default)
    }

    /// Logprobs this script assigns to `completion` under `rule`.
    fn logprobs_for(&self, rule: &ScriptRule, completion: &str) -> Vec<f64> {
        let target = completion.trim();
        if rule.completion.trim() == target {
            if let Some(lps) = &rule.logprobs {
                return lps.clone();
            }
        }
        if let Some(entry) = rule.scores.iter().find(|s| s.completion.trim() == target) {
            return entry.logprobs.clone();
        }
        vec![self.default_logprob; target.split_whitespace().count()]
    }
}

#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    seed: u64,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self::with_seed(script, 0)
    }

    /// `seed` rotates the starting point of every sampling rotation.
    pub fn with_seed(script: Script, seed: u64) -> Self {
        Self {
            script,
            seed,
            calls: AtomicU64::new(0),
        }
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    /// Number of backend calls served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn admit(&self, prompt: &str) -> Result<&ScriptRule, LmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt_tokens = prompt.split_whitespace().count();
        if prompt_tokens > self.script.max_context_tokens {
            return Err(LmError::ContextOverflow {
                prompt_tokens,
                limit: self.script.max_context_tokens,
            });
        }
        let rule = self.script.rule_for(prompt);
        match rule.error {
            None => Ok(rule),
            Some(SimulatedError::Transport) => {
                Err(LmError::Transport("simulated transport failure".into()))
            }
            Some(SimulatedError::RateLimit) => Err(LmError::RateLimited { retry_after: None }),
            Some(SimulatedError::ContextOverflow) => Err(LmError::ContextOverflow {
                prompt_tokens,
                limit: self.script.max_context_tokens,
            }),
        }
    }

    fn emit(&self, rule: &ScriptRule, completion: &str, params: &DecodeParams) -> Generation {
        let mut text = completion.to_string();
        let mut finish = FinishReason::Stop;
        if let Some(cut) = params
            .stop_sequences
            .iter()
            .filter(|s| !s.is_empty())
            .filter_map(|s| text.find(s.as_str()))
            .min()
        {
            text.truncate(cut);
        }
        let mut lps = self.script.logprobs_for(rule, completion);
        let mut tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if tokens.len() > params.max_tokens as usize {
            tokens.truncate(params.max_tokens as usize);
            finish = FinishReason::Length;
            text = tokens.join(" ");
        }
        lps.truncate(tokens.len());
        let token_logprobs = self.script.supports_logprobs.then(|| {
            tokens
                .iter()
                .zip(lps.iter().chain(std::iter::repeat(&self.script.default_logprob)))
                .map(|(t, &l)| TokenLogprob {
                    token: t.clone(),
                    logprob: l,
                })
                .collect()
        });
        Generation {
            text,
            token_logprobs,
            finish_reason: finish,
        }
    }
}

impl LanguageModel for ScriptedBackend {
    fn name(&self) -> String {
        if self.script.name.is_empty() {
            "scripted".into()
        } else {
            format!("scripted:{}", self.script.name)
        }
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_logprobs: self.script.supports_logprobs,
            supports_sampling: self.script.supports_sampling,
            max_context_tokens: self.script.max_context_tokens,
        }
    }

    fn generate(&self, prompt: &str, params: &DecodeParams) -> Result<Generation, LmError> {
        params.validate()?;
        let rule = self.admit(prompt)?;
        let completion = match params.mode {
            super::DecodeMode::Greedy => rule.completion.as_str(),
            super::DecodeMode::Nucleus => {
                if !self.script.supports_sampling {
                    return Err(LmError::Unsupported("sampling"));
                }
                rotation(rule, self.seed, 0)
            }
        };
        Ok(self.emit(rule, completion, params))
    }

    fn sample_n(
        &self,
        prompt: &str,
        n: usize,
        params: &DecodeParams,
    ) -> Result<Vec<Generation>, LmError> {
        check_sampling(self.capabilities(), n, params)?;
        let rule = self.admit(prompt)?;
        Ok((0..n)
            .map(|i| self.emit(rule, rotation(rule, self.seed, i), params))
            .collect())
    }

    fn score_completion(&self, prompt: &str, completion: &str) -> Result<CompletionScore, LmError> {
        if !self.script.supports_logprobs {
            return Err(LmError::Unsupported("log-probabilities"));
        }
        if completion.trim().is_empty() {
            return Err(LmError::Precondition("completion must be non-empty".into()));
        }
        let rule = self.admit(prompt)?;
        CompletionScore::from_logprobs(&self.script.logprobs_for(rule, completion))
    }
}

fn rotation(rule: &ScriptRule, seed: u64, i: usize) -> &str {
    if rule.samples.is_empty() {
        return &rule.completion;
    }
    let len = rule.samples.len();
    &rule.samples[((seed % len as u64) as usize + i) % len]
}
