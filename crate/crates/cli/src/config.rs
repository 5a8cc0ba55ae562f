//! Run configuration: a TOML file, overridden field by field from the
//! command line.
//!
//! ```toml
//! corpus_dir = "corpus"          # directory written by `refeed index`
//! dataset_path = "dev.jsonl"
//! task = "qa"                    # or "dialogue"
//! mode = "refeed_full"
//! backend = "scripted"           # or "http"
//! script = "script.json"         # scripted backend only
//! workers = 4
//! output_dir = "runs/full"
//! seed = 0
//!
//! [pipeline]
//! k_docs = 10
//! n_samples = 5
//!
//! [http]                         # http backend only; the key comes from $OPENAI_API_KEY
//! base_url = "https://api.openai.com/v1"
//! model = "gpt-3.5-turbo-instruct"
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use refeed_core::corpus::{DatasetKind, MANIFEST_FILE};
use refeed_core::bm25::INDEX_FILE;
use refeed_core::lm::{HttpBackend, HttpConfig, LanguageModel, Script, ScriptedBackend};
use refeed_core::pipeline::{EnsembleScoring, Mode, PipelineConfig, Shot, TemplateSet, TemplateStage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

fn default_task() -> DatasetKind {
    DatasetKind::Qa
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_dir: PathBuf,
    pub dataset_path: PathBuf,
    #[serde(default = "default_task")]
    pub task: DatasetKind,
    pub mode: Mode,
    pub backend: BackendKind,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Abort on the first failed example.
    #[serde(default)]
    pub strict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpConfig>,
    /// JSON list of `{"question": ..., "answer": ...}` demonstrations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<PathBuf>,
    /// Template overrides keyed by stage name (`initial`, `refine`, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<String, PathBuf>,
}

/// Command-line overrides; every field left unset keeps the file's value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub corpus_dir: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub shots: Option<PathBuf>,
    #[arg(long)]
    pub k_docs: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    pub ensemble: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub diverse: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub cot: Option<bool>,
    #[arg(long, value_parser = parse_scoring)]
    pub ensemble_scoring: Option<EnsembleScoring>,
    #[arg(long)]
    pub answer_marker: Option<String>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub sample_max_tokens: Option<u32>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Stop sequence for both decoders; repeat for several.
    #[arg(long = "stop")]
    pub stop: Vec<String>,
}

fn parse_scoring(s: &str) -> Result<EnsembleScoring, String> {
    match s {
        "own_context" => Ok(EnsembleScoring::OwnContext),
        "initial_under_both" => Ok(EnsembleScoring::InitialUnderBoth),
        _ => Err(format!("expected own_context or initial_under_both, got `{s}`")),
    }
}

impl RunConfig {
    pub fn from_toml(body: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(body).context("parsing run config")?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&body, base).with_context(|| format!("in {}", path.display()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_dir);
        fix(&mut self.dataset_path);
        fix(&mut self.output_dir);
        for p in self.script.iter_mut().chain(self.shots.iter_mut()).chain(self.templates.values_mut()) {
            fix(p);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.mode, o.mode);
        set!(self.corpus_dir, o.corpus_dir);
        set!(self.dataset_path, o.dataset);
        set!(self.backend, o.backend);
        set!(self.output_dir, o.output_dir);
        set!(self.workers, o.workers);
        set!(self.seed, o.seed);
        if o.script.is_some() {
            self.script = o.script.clone();
        }
        if o.shots.is_some() {
            self.shots = o.shots.clone();
        }
        self.strict |= o.strict;
        let p = &mut self.pipeline;
        set!(p.k_docs, o.k_docs);
        set!(p.n_samples, o.n_samples);
        set!(p.ensemble, o.ensemble);
        set!(p.diverse, o.diverse);
        set!(p.cot, o.cot);
        set!(p.ensemble_scoring, o.ensemble_scoring);
        set!(p.answer_marker, o.answer_marker);
        set!(p.decode_initial.max_tokens, o.max_tokens);
        set!(p.decode_sample.max_tokens, o.sample_max_tokens);
        set!(p.decode_sample.top_p, o.top_p);
        set!(p.decode_sample.temperature, o.temperature);
        if !o.stop.is_empty() {
            p.decode_initial.stop_sequences = o.stop.clone();
            p.decode_sample.stop_sequences = o.stop.clone();
        }
    }

    /// Static checks: referenced files exist and settings are consistent.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.workers >= 1, "workers must be at least 1");
        self.pipeline.validate()?;
        for f in [MANIFEST_FILE, INDEX_FILE] {
            let p = self.corpus_dir.join(f);
            ensure!(p.is_file(), "corpus_dir {}: missing {f} (run `refeed index` first)", self.corpus_dir.display());
        }
        ensure!(self.dataset_path.is_file(), "dataset not found: {}", self.dataset_path.display());
        if let Some(s) = &self.shots {
            ensure!(s.is_file(), "shots file not found: {}", s.display());
        }
        for (stage, path) in &self.templates {
            stage.parse::<TemplateStage>()?;
            ensure!(path.is_file(), "template `{stage}` not found: {}", path.display());
        }
        match self.backend {
            BackendKind::Scripted => {
                let s = self.script.as_ref().context("backend = \"scripted\" needs `script`")?;
                ensure!(s.is_file(), "script not found: {}", s.display());
            }
            BackendKind::Http => {
                let h = self.http.as_ref().context("backend = \"http\" needs an [http] table")?;
                ensure!(!h.model.is_empty(), "[http] model must be set");
            }
        }
        Ok(())
    }

    /// The pipeline settings with shots and template overrides applied.
    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = self.pipeline.clone();
        let mut templates = TemplateSet::default();
        for (stage, path) in &self.templates {
            templates.load_override(stage.parse()?, path)?;
        }
        if let Some(path) = &self.shots {
            let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let shots: Vec<Shot> =
                serde_json::from_str(&body).with_context(|| format!("parsing shots {}", path.display()))?;
            templates = templates.with_shots(&shots);
        }
        cfg.templates = templates;
        Ok(cfg)
    }

    /// Construct the backend. No request is sent.
    pub fn backend(&self) -> Result<Box<dyn LanguageModel>> {
        Ok(match self.backend {
            BackendKind::Scripted => {
                let path = self.script.as_ref().context("missing script path")?;
                let script = Script::load(path).with_context(|| format!("loading script {}", path.display()))?;
                Box::new(ScriptedBackend::with_seed(script, self.seed))
            }
            BackendKind::Http => {
                let h = self.http.clone().context("missing [http] table")?;
                if std::env::var(&h.api_key_env).map_or(true, |v| v.is_empty()) {
                    log::warn!("${} is not set; sending unauthenticated requests", h.api_key_env);
                }
                Box::new(HttpBackend::from_env(h)?)
            }
        })
    }
}

/// Reject mode/backend pairs that cannot run; warn about declared fallbacks.
pub fn check_capabilities(backend: &dyn LanguageModel, mode: Mode, cfg: &PipelineConfig) -> Result<Vec<String>> {
    let caps = backend.capabilities();
    let flags = mode.stages(cfg);
    let mut warnings = Vec::new();
    if flags.diverse && !caps.supports_sampling {
        bail!(
            "mode {mode} samples extra candidates but backend {} cannot sample; set pipeline.diverse = false",
            backend.name()
        );
    }
    if flags.ensemble && !caps.supports_logprobs {
        warnings.push(format!(
            "backend {} exposes no log-probabilities; mode {mode} will skip the ensemble and keep refined answers",
            backend.name()
        ));
    }
    for p in [&cfg.decode_initial, &cfg.decode_sample] {
        if p.max_tokens as usize >= caps.max_context_tokens {
            bail!("max_tokens {} does not fit the backend context of {}", p.max_tokens, caps.max_context_tokens);
        }
    }
    Ok(warnings)
}
