//! Answer refinement with retrieval feedback.
//!
//! Stages for one question:
//!
//! 1. greedy closed-book answer (plus nucleus samples in diverse mode);
//! 2. BM25 retrieval with `question + " " + answer` for every candidate, the
//!    per-query hits max-merged into one pool of at most `k_docs` passages;
//! 3. a refine prompt carrying the pooled passages and all candidates;
//! 4. optionally, keep the initial answer when its mean token log-probability
//!    under the closed-book prompt beats the refined answer's under the refine
//!    prompt.
//!
//! Baselines (closed-book and retrieve-then-read) and chain-of-thought
//! variants reuse the same stages.

mod batch;
mod template;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bm25::{Bm25Index, ScoredDoc};
use crate::corpus::{CorpusError, CorpusStore, Example};
use crate::lm::{DecodeMode, DecodeParams, Generation, LanguageModel, LmError};
use crate::metrics::normalize_answer;

pub use batch::{run_batch, BatchError, BatchOptions, BatchSummary, FailureRecord};
pub use template::{Bindings, PromptTemplate, Shot, TemplateError, TemplateSet, TemplateStage, PLACEHOLDERS};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ANSWER_MARKER: &str = "So the answer is";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ClosedBook,
    RetrieveThenRead,
    RefeedBasic,
    RefeedDiverse,
    RefeedFull,
    RefeedCot,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::ClosedBook,
        Mode::RetrieveThenRead,
        Mode::RefeedBasic,
        Mode::RefeedDiverse,
        Mode::RefeedFull,
        Mode::RefeedCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ClosedBook => "closed_book",
            Mode::RetrieveThenRead => "retrieve_then_read",
            Mode::RefeedBasic => "refeed_basic",
            Mode::RefeedDiverse => "refeed_diverse",
            Mode::RefeedFull => "refeed_full",
            Mode::RefeedCot => "refeed_cot",
        }
    }

    /// Stage switches this mode turns on; `cfg` can switch diversity and the
    /// ensemble off and chain-of-thought on.
    pub fn stages(self, cfg: &PipelineConfig) -> StageFlags {
        let (diverse, ensemble, cot) = match self {
            Mode::ClosedBook | Mode::RetrieveThenRead | Mode::RefeedBasic => (false, false, false),
            Mode::RefeedDiverse => (true, false, false),
            Mode::RefeedFull => (true, true, false),
            Mode::RefeedCot => (false, false, true),
        };
        StageFlags {
            diverse: diverse && cfg.diverse,
            ensemble: ensemble && cfg.ensemble,
            cot: cot || cfg.cot,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub diverse: bool,
    pub ensemble: bool,
    pub cot: bool,
}

/// Which contexts the ensemble scores answers under.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleScoring {
    /// Initial answer under the closed-book prompt, refined answer under the
    /// refine prompt.
    #[default]
    OwnContext,
    /// The initial answer under both prompts: if the passages lower its
    /// likelihood, switch to the refined answer.
    InitialUnderBoth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_docs: usize,
    pub n_samples: usize,
    pub decode_initial: DecodeParams,
    pub decode_sample: DecodeParams,
    pub ensemble: bool,
    pub diverse: bool,
    pub cot: bool,
    pub ensemble_scoring: EnsembleScoring,
    pub answer_marker: String,
    #[serde(skip)]
    pub templates: TemplateSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_docs: 10,
            n_samples: 5,
            decode_initial: DecodeParams::greedy(),
            decode_sample: DecodeParams::nucleus(0.95, 1.0),
            ensemble: true,
            diverse: true,
            cot: false,
            ensemble_scoring: EnsembleScoring::default(),
            answer_marker: DEFAULT_ANSWER_MARKER.into(),
            templates: TemplateSet::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k_docs == 0 {
            return Err(PipelineError::Config("k_docs must be at least 1".into()));
        }
        if self.n_samples == 0 {
            return Err(PipelineError::Config("n_samples must be at least 1".into()));
        }
        if self.decode_initial.mode != DecodeMode::Greedy {
            return Err(PipelineError::Config("decode_initial must use greedy decoding".into()));
        }
        if self.decode_sample.mode != DecodeMode::Nucleus {
            return Err(PipelineError::Config("decode_sample must use nucleus sampling".into()));
        }
        for p in [&self.decode_initial, &self.decode_sample] {
            p.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if self.answer_marker.trim().is_empty() {
            return Err(PipelineError::Config("answer_marker must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Greedy,
    /// 1-based sample index.
    Sample(usize),
    Refined,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Greedy => f.write_str("greedy"),
            Origin::Sample(j) => write!(f, "sample_{j}"),
            Origin::Refined => f.write_str("refined"),
        }
    }
}

impl Serialize for Origin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Origin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "greedy" => Ok(Origin::Greedy),
            "refined" => Ok(Origin::Refined),
            other => other
                .strip_prefix("sample_")
                .and_then(|j| j.parse().ok())
                .filter(|&j| j >= 1)
                .map(Origin::Sample)
                .ok_or_else(|| serde::de::Error::custom(format!("bad origin `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    pub text: String,
    pub normalized: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_logprob: Option<f64>,
    pub origin: Origin,
    /// Full generation when the answer was extracted from reasoning text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl AnswerCandidate {
    pub fn new(text: &str, origin: Origin) -> Self {
        Self {
            text: text.to_string(),
            normalized: normalize_answer(text),
            mean_logprob: None,
            origin,
            raw: None,
        }
    }

    /// The text the model actually produced for this candidate.
    pub fn generated_text(&self) -> &str {
        self.raw.as_deref().unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHits {
    pub query: String,
    pub hits: Vec<ScoredDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolDoc {
    pub passage_id: String,
    pub score: f64,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPool {
    pub per_query: Vec<QueryHits>,
    pub merged: Vec<PoolDoc>,
}

/// Union of per-query hits, each passage at its best score, ranked by
/// (score desc, passage id asc) and cut to `k`.
pub fn merge_hits(per_query: &[QueryHits], k: usize) -> Vec<ScoredDoc> {
    let mut best: HashMap<&str, f64> = HashMap::new();
    for q in per_query {
        for h in &q.hits {
            best.entry(&h.passage_id)
                .and_modify(|s| *s = s.max(h.score))
                .or_insert(h.score);
        }
    }
    let mut merged: Vec<ScoredDoc> = best
        .into_iter()
        .map(|(id, score)| ScoredDoc {
            passage_id: id.to_string(),
            score,
        })
        .collect();
    merged.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.passage_id.cmp(&b.passage_id)));
    merged.truncate(k);
    merged
}

/// Drop candidates whose normalized text repeats an earlier one.
pub fn dedup_candidates(candidates: Vec<AnswerCandidate>) -> Vec<AnswerCandidate> {
    let mut seen = std::collections::HashSet::new();
    candidates
        .into_iter()
        .filter(|c| seen.insert(c.normalized.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Initial,
    Refined,
}

/// Keep the initial answer only when it is strictly more likely.
pub fn select_answer(initial_ll: f64, refined_ll: f64) -> Selection {
    if initial_ll > refined_ll {
        Selection::Initial
    } else {
        Selection::Refined
    }
}

/// Final answer from chain-of-thought output: the text after the last
/// `marker`, or the last non-empty line when the marker is absent.
pub fn extract_cot_answer(cot_text: &str, marker: &str) -> String {
    let tail = match cot_text.rfind(marker) {
        Some(pos) => &cot_text[pos + marker.len()..],
        None => cot_text
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .unwrap_or(""),
    };
    clean_answer(tail.trim_start_matches([':', ',']))
}

/// Trim whitespace and one trailing period.
pub fn clean_answer(text: &str) -> String {
    let t = text.trim();
    t.strip_suffix('.').unwrap_or(t).trim_end().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Sample,
    Read,
    Refine,
    Ensemble,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Initial => "initial",
            Stage::Sample => "sample",
            Stage::Read => "read",
            Stage::Refine => "refine",
            Stage::Ensemble => "ensemble",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: LmError,
    },
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("index refers to a passage missing from the corpus store: {0}")]
    Store(#[from] CorpusError),
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

fn at(stage: Stage) -> impl FnOnce(LmError) -> PipelineError {
    move |source| PipelineError::Stage { stage, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub schema_version: u32,
    pub question_id: String,
    pub mode: Mode,
    pub stages: StageFlags,
    pub candidates: Vec<AnswerCandidate>,
    pub pool: RetrievalPool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<AnswerCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_ll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_ll: Option<f64>,
    #[serde(rename = "final")]
    pub final_answer: AnswerCandidate,
    pub ensemble_applied: bool,
    /// Why the ensemble was skipped although the mode asked for it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_fallback: Option<String>,
    pub prompts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub final_answer: AnswerCandidate,
    pub initial_ll: f64,
    pub refined_ll: f64,
}

/// Shared, read-only resources for running the pipeline; cheap to share
/// across worker threads.
pub struct Pipeline<'a> {
    backend: &'a dyn LanguageModel,
    index: &'a Bm25Index,
    store: &'a CorpusStore,
    cfg: &'a PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        backend: &'a dyn LanguageModel,
        index: &'a Bm25Index,
        store: &'a CorpusStore,
        cfg: &'a PipelineConfig,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            backend,
            index,
            store,
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        self.cfg
    }

    pub fn backend(&self) -> &dyn LanguageModel {
        self.backend
    }

    fn template(&self, plain: TemplateStage, cot_variant: TemplateStage, cot: bool) -> &PromptTemplate {
        self.cfg.templates.get(if cot { cot_variant } else { plain })
    }

    fn to_candidate(&self, gen: &Generation, origin: Origin, cot: bool) -> AnswerCandidate {
        let mut c = if cot {
            let mut c = AnswerCandidate::new(&extract_cot_answer(&gen.text, &self.cfg.answer_marker), origin);
            c.raw = Some(gen.text.trim().to_string());
            c
        } else {
            AnswerCandidate::new(&clean_answer(&gen.text), origin)
        };
        c.mean_logprob = gen.mean_logprob();
        c
    }

    pub fn render_initial(&self, question: &str, cot: bool) -> String {
        self.template(TemplateStage::Initial, TemplateStage::CotInitial, cot)
            .render(&Bindings {
                question,
                ..Bindings::default()
            })
    }

    /// Closed-book greedy answer; returns the candidate and its prompt.
    pub fn generate_initial(&self, question: &str, cot: bool) -> Result<(AnswerCandidate, String), PipelineError> {
        let prompt = self.render_initial(question, cot);
        let gen = self
            .backend
            .generate(&prompt, &self.cfg.decode_initial)
            .map_err(at(Stage::Initial))?;
        Ok((self.to_candidate(&gen, Origin::Greedy, cot), prompt))
    }

    /// `n_samples` nucleus samples, duplicates (after normalization) dropped.
    pub fn generate_diverse(&self, question: &str, cot: bool) -> Result<Vec<AnswerCandidate>, PipelineError> {
        let prompt = self.render_initial(question, cot);
        let gens = self
            .backend
            .sample_n(&prompt, self.cfg.n_samples, &self.cfg.decode_sample)
            .map_err(at(Stage::Sample))?;
        let candidates = gens
            .iter()
            .enumerate()
            .map(|(i, g)| self.to_candidate(g, Origin::Sample(i + 1), cot))
            .collect();
        Ok(dedup_candidates(candidates))
    }

    fn hydrate(&self, per_query: Vec<QueryHits>, merged: Vec<ScoredDoc>) -> Result<RetrievalPool, PipelineError> {
        let merged = merged
            .into_iter()
            .map(|d| {
                let p = self.store.get_passage(&d.passage_id)?;
                Ok(PoolDoc {
                    passage_id: d.passage_id,
                    score: d.score,
                    title: p.title.clone(),
                    text: p.text.clone(),
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        Ok(RetrievalPool { per_query, merged })
    }

    /// One query per candidate (`question + " " + answer`), max-merged.
    pub fn retrieve_feedback(
        &self,
        question: &str,
        candidates: &[AnswerCandidate],
    ) -> Result<RetrievalPool, PipelineError> {
        let per_query: Vec<QueryHits> = candidates
            .iter()
            .map(|c| {
                let query = format!("{question} {}", c.text);
                let hits = self.index.search(&query, self.cfg.k_docs);
                QueryHits { query, hits }
            })
            .collect();
        let merged = merge_hits(&per_query, self.cfg.k_docs);
        self.hydrate(per_query, merged)
    }

    /// Retrieval with the question alone (the retrieve-then-read baseline).
    pub fn retrieve_question_only(&self, question: &str) -> Result<RetrievalPool, PipelineError> {
        let hits = self.index.search(question, self.cfg.k_docs);
        let per_query = vec![QueryHits {
            query: question.to_string(),
            hits: hits.clone(),
        }];
        self.hydrate(per_query, hits)
    }

    pub fn render_refine(&self, question: &str, candidates: &[AnswerCandidate], pool: &RetrievalPool, cot: bool) -> String {
        let passages = render_passages(pool);
        let listed: Vec<String> = candidates.iter().map(|c| format!("- {}", c.text)).collect();
        let listed = listed.join("\n");
        self.template(TemplateStage::Refine, TemplateStage::CotRefine, cot)
            .render(&Bindings {
                question,
                passages: &passages,
                candidates: &listed,
                initial_answer: candidates.first().map_or("", |c| c.text.as_str()),
            })
    }

    pub fn refine(
        &self,
        question: &str,
        candidates: &[AnswerCandidate],
        pool: &RetrievalPool,
        cot: bool,
    ) -> Result<(AnswerCandidate, String), PipelineError> {
        let prompt = self.render_refine(question, candidates, pool, cot);
        let gen = self
            .backend
            .generate(&prompt, &self.cfg.decode_initial)
            .map_err(at(Stage::Refine))?;
        Ok((self.to_candidate(&gen, Origin::Refined, cot), prompt))
    }

    /// Answer conditioned on question-only passages, no prior candidates.
    pub fn read(&self, question: &str, pool: &RetrievalPool, cot: bool) -> Result<(AnswerCandidate, String), PipelineError> {
        let passages = render_passages(pool);
        let prompt = self
            .template(TemplateStage::Read, TemplateStage::CotRead, cot)
            .render(&Bindings {
                question,
                passages: &passages,
                ..Bindings::default()
            });
        let gen = self
            .backend
            .generate(&prompt, &self.cfg.decode_initial)
            .map_err(at(Stage::Read))?;
        Ok((self.to_candidate(&gen, Origin::Refined, cot), prompt))
    }

    /// Score both answers and keep the more likely one (ties go to refined).
    pub fn ensemble_select(
        &self,
        initial: &AnswerCandidate,
        initial_prompt: &str,
        refined: &AnswerCandidate,
        refine_prompt: &str,
    ) -> Result<EnsembleOutcome, PipelineError> {
        let initial_ll = self
            .backend
            .score_completion(initial_prompt, initial.generated_text())
            .map_err(at(Stage::Ensemble))?
            .mean_logprob;
        let refined_text = match self.cfg.ensemble_scoring {
            EnsembleScoring::OwnContext => refined.generated_text(),
            EnsembleScoring::InitialUnderBoth => initial.generated_text(),
        };
        let refined_ll = self
            .backend
            .score_completion(refine_prompt, refined_text)
            .map_err(at(Stage::Ensemble))?
            .mean_logprob;
        let final_answer = match select_answer(initial_ll, refined_ll) {
            Selection::Initial => initial.clone(),
            Selection::Refined => refined.clone(),
        };
        Ok(EnsembleOutcome {
            final_answer,
            initial_ll,
            refined_ll,
        })
    }

    pub fn run(&self, example: &Example, mode: Mode) -> Result<PipelineTrace, PipelineError> {
        let flags = mode.stages(self.cfg);
        let question = example.query_text();
        let mut prompts = BTreeMap::new();
        let mut trace = PipelineTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            question_id: example.id().to_string(),
            mode,
            stages: flags,
            candidates: Vec::new(),
            pool: RetrievalPool::default(),
            refined: None,
            initial_ll: None,
            refined_ll: None,
            final_answer: AnswerCandidate::new("", Origin::Greedy),
            ensemble_applied: false,
            ensemble_fallback: None,
            prompts: BTreeMap::new(),
        };
        let initial_key = if flags.cot { "cot_initial" } else { "initial" };

        if mode == Mode::RetrieveThenRead {
            let pool = self.retrieve_question_only(&question)?;
            let (answer, prompt) = self.read(&question, &pool, flags.cot)?;
            prompts.insert(if flags.cot { "cot_read" } else { "read" }.to_string(), prompt);
            trace.pool = pool;
            trace.final_answer = answer.clone();
            trace.refined = Some(answer);
            trace.prompts = prompts;
            return Ok(trace);
        }

        let (initial, initial_prompt) = self.generate_initial(&question, flags.cot)?;
        prompts.insert(initial_key.to_string(), initial_prompt.clone());
        if mode == Mode::ClosedBook {
            trace.final_answer = initial.clone();
            trace.candidates = vec![initial];
            trace.prompts = prompts;
            return Ok(trace);
        }

        let mut candidates = vec![initial.clone()];
        if flags.diverse {
            candidates.extend(self.generate_diverse(&question, flags.cot)?);
            candidates = dedup_candidates(candidates);
        }
        let pool = self.retrieve_feedback(&question, &candidates)?;
        let (refined, refine_prompt) = self.refine(&question, &candidates, &pool, flags.cot)?;
        prompts.insert(
            if flags.cot { "cot_refine" } else { "refine" }.to_string(),
            refine_prompt.clone(),
        );

        trace.final_answer = refined.clone();
        if flags.ensemble {
            if self.backend.capabilities().supports_logprobs {
                let out = self.ensemble_select(&initial, &initial_prompt, &refined, &refine_prompt)?;
                trace.initial_ll = Some(out.initial_ll);
                trace.refined_ll = Some(out.refined_ll);
                trace.final_answer = out.final_answer;
                trace.ensemble_applied = true;
            } else {
                trace.ensemble_fallback =
                    Some("backend does not expose log-probabilities; kept the refined answer".into());
            }
        }
        trace.candidates = candidates;
        trace.pool = pool;
        trace.refined = Some(refined);
        trace.prompts = prompts;
        Ok(trace)
    }
}

/// Numbered passage block: `Passage i (title): text`, one per line.
pub fn render_passages(pool: &RetrievalPool) -> String {
    let lines: Vec<String> = pool
        .merged
        .iter()
        .enumerate()
        .map(|(i, d)| {
            if d.title.is_empty() {
                format!("Passage {}: {}", i + 1, d.text)
            } else {
                format!("Passage {} ({}): {}", i + 1, d.title, d.text)
            }
        })
        .collect();
    lines.join("\n")
}

#[cfg(test)]
mod tests;
