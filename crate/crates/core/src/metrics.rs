//! Answer-quality and retrieval-coverage metrics.
//!
//! EM and token F1 follow the SQuAD-style normalization (lowercase, drop ASCII
//! punctuation, drop the articles a/an/the, collapse whitespace). Rouge-L is
//! the balanced LCS F-measure over lowercased whitespace tokens. Recall@K
//! checks whether a gold answer appears, on token boundaries, in one of the
//! first K pooled passages.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::pipeline::{PipelineTrace, RetrievalPool};

/// Rouge-L F-measure beta recorded in every report.
pub const ROUGE_L_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("gold answer list is empty")]
    EmptyGolds,
    #[error("traces reference ids not in the dataset: {0:?}")]
    UnknownIds(Vec<String>),
    #[error("duplicate traces for ids: {0:?}")]
    DuplicateTraces(Vec<String>),
    #[error("K must be at least 1")]
    InvalidK,
}

pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, golds: &[String]) -> Result<f64, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyGolds);
    }
    let pred = normalize_answer(prediction);
    Ok(if golds.iter().any(|g| normalize_answer(g) == pred) {
        1.0
    } else {
        0.0
    })
}

fn f1_tokens(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Multiset token-overlap F1 against the best-matching gold.
pub fn token_f1(prediction: &str, golds: &[String]) -> Result<f64, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyGolds);
    }
    let pred = normalize_answer(prediction);
    let pred: Vec<&str> = pred.split_whitespace().collect();
    Ok(golds
        .iter()
        .map(|g| {
            let g = normalize_answer(g);
            f1_tokens(&pred, &g.split_whitespace().collect::<Vec<_>>())
        })
        .fold(0.0, f64::max))
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let pred = prediction.to_lowercase();
    let reference = reference.to_lowercase();
    let pred: Vec<&str> = pred.split_whitespace().collect();
    let reference: Vec<&str> = reference.split_whitespace().collect();
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&pred, &reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / pred.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let beta2 = ROUGE_L_BETA * ROUGE_L_BETA;
    (1.0 + beta2) * p * r / (r + beta2 * p)
}

/// Whether normalized `gold` occurs as a contiguous token run in normalized `text`.
pub fn contains_answer(text: &str, gold: &str) -> bool {
    let gold = normalize_answer(gold);
    let needle: Vec<&str> = gold.split_whitespace().collect();
    if needle.is_empty() {
        return false;
    }
    let text = normalize_answer(text);
    let hay: Vec<&str> = text.split_whitespace().collect();
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

pub fn recall_at_k(pool: &RetrievalPool, golds: &[String], k: usize) -> Result<bool, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if golds.is_empty() {
        return Err(MetricsError::EmptyGolds);
    }
    Ok(pool
        .merged
        .iter()
        .take(k)
        .any(|doc| golds.iter().any(|g| contains_answer(&doc.text, g))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hits: BTreeMap<usize, bool>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub rouge_l_beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_examples: usize,
    pub em: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    pub recall_at_k: BTreeMap<usize, f64>,
    /// Dataset ids with no trace; scored 0 everywhere.
    pub missing: Vec<String>,
    pub per_example: Vec<ExampleScores>,
    pub metadata: ReportMetadata,
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

/// Score traces against their dataset examples, in dataset order.
pub fn evaluate_run(
    traces: &[PipelineTrace],
    dataset: &[Example],
    ks: &[usize],
) -> Result<MetricsReport, MetricsError> {
    if ks.contains(&0) {
        return Err(MetricsError::InvalidK);
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let known: HashMap<&str, ()> = dataset.iter().map(|e| (e.id(), ())).collect();
    let mut by_id: HashMap<&str, &PipelineTrace> = HashMap::new();
    let mut unknown = Vec::new();
    let mut dups = Vec::new();
    for t in traces {
        if !known.contains_key(t.question_id.as_str()) {
            unknown.push(t.question_id.clone());
        } else if by_id.insert(&t.question_id, t).is_some() {
            dups.push(t.question_id.clone());
        }
    }
    if !unknown.is_empty() {
        return Err(MetricsError::UnknownIds(unknown));
    }
    if !dups.is_empty() {
        return Err(MetricsError::DuplicateTraces(dups));
    }

    let mut per_example = Vec::with_capacity(dataset.len());
    let mut missing = Vec::new();
    let mut any_dialogue = false;
    for ex in dataset {
        let trace = by_id.get(ex.id()).copied();
        let golds: Vec<String> = match ex {
            Example::Qa(q) => q.answers.clone(),
            Example::Dialogue(d) => {
                any_dialogue = true;
                vec![d.reference.clone()]
            }
        };
        let mut row = ExampleScores {
            id: ex.id().to_string(),
            em: 0.0,
            f1: 0.0,
            rouge_l: None,
            hits: BTreeMap::new(),
            missing: trace.is_none(),
        };
        if let Example::Dialogue(_) = ex {
            row.rouge_l = Some(0.0);
        }
        if let Example::Qa(_) = ex {
            row.hits = ks.iter().map(|&k| (k, false)).collect();
        }
        match trace {
            None => missing.push(row.id.clone()),
            Some(t) => {
                let pred = &t.final_answer.text;
                row.em = exact_match(pred, &golds)?;
                row.f1 = token_f1(pred, &golds)?;
                match ex {
                    Example::Qa(_) => {
                        for &k in &ks {
                            row.hits.insert(k, recall_at_k(&t.pool, &golds, k)?);
                        }
                    }
                    Example::Dialogue(d) => row.rouge_l = Some(rouge_l(pred, &d.reference)),
                }
            }
        }
        per_example.push(row);
    }

    let n = per_example.len();
    let qa_rows: Vec<&ExampleScores> = per_example.iter().filter(|r| !r.hits.is_empty()).collect();
    let recall = if qa_rows.is_empty() {
        BTreeMap::new()
    } else {
        ks.iter()
            .map(|&k| {
                let hits = qa_rows.iter().filter(|r| r.hits[&k]).count();
                (k, hits as f64 / qa_rows.len() as f64)
            })
            .collect()
    };
    let rouge_rows: Vec<f64> = per_example.iter().filter_map(|r| r.rouge_l).collect();
    Ok(MetricsReport {
        num_examples: n,
        em: mean(per_example.iter().map(|r| r.em), n),
        f1: mean(per_example.iter().map(|r| r.f1), n),
        rouge_l: any_dialogue.then(|| mean(rouge_rows.iter().copied(), rouge_rows.len())),
        recall_at_k: recall,
        missing,
        per_example,
        metadata: ReportMetadata {
            rouge_l_beta: ROUGE_L_BETA,
            fingerprint: None,
        },
    })
}

/// Recall@K per retrieval arm, e.g. `question_only` against `feedback`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoverageReport {
    pub arms: BTreeMap<String, BTreeMap<usize, f64>>,
    pub num_examples: usize,
}

impl CoverageReport {
    /// Add an arm: one pool per example, aligned with `golds`.
    pub fn add_arm(
        &mut self,
        name: &str,
        pools: &[RetrievalPool],
        golds: &[Vec<String>],
        ks: &[usize],
    ) -> Result<(), MetricsError> {
        assert_eq!(pools.len(), golds.len(), "one pool per example");
        self.num_examples = pools.len();
        let mut row = BTreeMap::new();
        for &k in ks {
            let mut hits = 0usize;
            for (pool, g) in pools.iter().zip(golds) {
                hits += usize::from(recall_at_k(pool, g, k)?);
            }
            let rate = if pools.is_empty() { 0.0 } else { hits as f64 / pools.len() as f64 };
            row.insert(k, rate);
        }
        self.arms.insert(name.to_string(), row);
        Ok(())
    }
}
