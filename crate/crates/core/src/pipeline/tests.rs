use std::io::Cursor;

use super::*;
use crate::bm25::{build_index, Bm25Params};
use crate::corpus::{ingest_corpus, QaExample};
use crate::lm::{Matcher, Script, ScriptRule, ScriptedBackend};

fn corpus(docs: &[(&str, &str, &str)]) -> (CorpusStore, Bm25Index) {
    let lines: Vec<String> = docs
        .iter()
        .map(|(id, title, text)| serde_json::json!({"id": id, "title": title, "text": text}).to_string())
        .collect();
    let (store, _) = ingest_corpus(Cursor::new(lines.join("\n")), 100).unwrap();
    let index = build_index(store.passages(), Bm25Params::default()).unwrap();
    (store, index)
}

fn rule(m: &[&str], completion: &str, logprobs: Option<Vec<f64>>) -> ScriptRule {
    ScriptRule {
        matcher: Matcher::All(m.iter().map(|s| s.to_string()).collect()),
        completion: completion.into(),
        logprobs,
        ..ScriptRule::default()
    }
}

fn qa(id: &str, q: &str, answers: &[&str]) -> Example {
    Example::Qa(QaExample {
        id: id.into(),
        question: q.into(),
        answers: answers.iter().map(|s| s.to_string()).collect(),
    })
}

const DEADPOOL_Q: &str = "sequel merc mouth premiere?";

fn deadpool_corpus() -> (CorpusStore, Bm25Index) {
    let mut docs = vec![(
        "deadpool".to_string(),
        "Deadpool 2".to_string(),
        "release moved from June 1 2018 up to May 18 2018".to_string(),
    )];
    for i in 0..12 {
        docs.push((
            format!("noise{i:02}"),
            format!("Noise {i}"),
            format!("sequel merc mouth premiere chatter number {i}"),
        ));
    }
    let refs: Vec<(&str, &str, &str)> = docs
        .iter()
        .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))
        .collect();
    corpus(&refs)
}

#[test]
fn initial_answer_is_greedy_and_cleaned() {
    let (store, index) = deadpool_corpus();
    let cfg = PipelineConfig::default();
    let b = ScriptedBackend::new(
        Script::new("x")
            .rule(rule(&["merc"], "June 1, 2018", None))
            .rule(rule(&["capital"], "  Paris.  ", None)),
    );
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let (c, prompt) = p.generate_initial(DEADPOOL_Q, false).unwrap();
    assert_eq!(c.text, "June 1, 2018");
    assert_eq!(c.origin, Origin::Greedy);
    assert!(prompt.contains(DEADPOOL_Q));
    let (c, _) = p.generate_initial("what is the capital of France?", false).unwrap();
    assert_eq!(c.text, "Paris");
    assert_eq!(c.normalized, "paris");
}

#[test]
fn context_overflow_is_tagged_with_stage() {
    let (store, index) = deadpool_corpus();
    let cfg = PipelineConfig::default();
    let mut script = Script::new("x");
    script.max_context_tokens = 5;
    let b = ScriptedBackend::new(script);
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let err = p.generate_initial(DEADPOOL_Q, false).unwrap_err();
    assert_eq!(err.stage(), Some(Stage::Initial));
    assert!(err.to_string().starts_with("stage initial"));
}

fn sampler(rotation: &[&str]) -> ScriptedBackend {
    let mut r = rule(&["who sang"], rotation[0], None);
    r.samples = rotation.iter().map(|s| s.to_string()).collect();
    ScriptedBackend::new(Script::new("x").rule(r))
}

#[test]
fn diverse_generation_dedups_in_sampling_order() {
    let (store, index) = deadpool_corpus();
    let mut cfg = PipelineConfig { n_samples: 3, ..PipelineConfig::default() };
    let b = sampler(&["Tom Waits", "Steve Earle", "Tom Waits"]);
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let c = p.generate_diverse("who sang it?", false).unwrap();
    let texts: Vec<_> = c.iter().map(|c| c.text.as_str()).collect();
    assert_eq!(texts, ["Tom Waits", "Steve Earle"]);
    assert_eq!(c[1].origin, Origin::Sample(2));

    cfg.n_samples = 1;
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let c = p.generate_diverse("who sang it?", false).unwrap();
    let single = b.generate("who sang it?", &cfg.decode_sample).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].text, single.text);

    cfg.n_samples = 4;
    let same = sampler(&["Tom Waits"]);
    let p = Pipeline::new(&same, &index, &store, &cfg).unwrap();
    assert_eq!(p.generate_diverse("who sang it?", false).unwrap().len(), 1);
}

#[test]
fn diverse_generation_needs_sampling() {
    let (store, index) = deadpool_corpus();
    let cfg = PipelineConfig::default();
    let mut s = Script::new("x");
    s.supports_sampling = false;
    let b = ScriptedBackend::new(s);
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let err = p.generate_diverse("q", false).unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Stage { stage: Stage::Sample, source: LmError::Unsupported(_) }
    ));
}

fn hits(pairs: &[(&str, f64)]) -> Vec<ScoredDoc> {
    pairs
        .iter()
        .map(|(id, s)| ScoredDoc { passage_id: id.to_string(), score: *s })
        .collect()
}

#[test]
fn merge_takes_max_score_per_passage() {
    let per_query = vec![
        QueryHits { query: "a".into(), hits: hits(&[("d1", 3.0), ("d2", 2.0)]) },
        QueryHits { query: "b".into(), hits: hits(&[("d2", 2.5), ("d3", 1.0)]) },
    ];
    assert_eq!(merge_hits(&per_query, 10), hits(&[("d1", 3.0), ("d2", 2.5), ("d3", 1.0)]));
    assert_eq!(merge_hits(&per_query, 2), hits(&[("d1", 3.0), ("d2", 2.5)]));
    assert!(merge_hits(&[], 10).is_empty());
}

#[test]
fn single_candidate_pool_equals_its_own_top_k() {
    let (store, index) = deadpool_corpus();
    let cfg = PipelineConfig::default();
    let b = ScriptedBackend::new(Script::new("x"));
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let c = AnswerCandidate::new("June 1, 2018", Origin::Greedy);
    let pool = p.retrieve_feedback(DEADPOOL_Q, &[c]).unwrap();
    assert_eq!(pool.per_query.len(), 1);
    assert_eq!(pool.per_query[0].query, format!("{DEADPOOL_Q} June 1, 2018"));
    let ids: Vec<_> = pool.merged.iter().map(|d| d.passage_id.as_str()).collect();
    let own: Vec<_> = pool.per_query[0].hits.iter().map(|d| d.passage_id.as_str()).collect();
    assert_eq!(ids, own);
    assert_eq!(pool.merged.len(), 10);
}

#[test]
fn answer_in_query_reaches_passage_the_question_misses() {
    let (store, index) = deadpool_corpus();
    let cfg = PipelineConfig::default();
    let b = ScriptedBackend::new(Script::new("x"));
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let q_only = p.retrieve_question_only(DEADPOOL_Q).unwrap();
    assert!(q_only.merged.iter().all(|d| d.passage_id != "deadpool#0"));
    let fb = p
        .retrieve_feedback(DEADPOOL_Q, &[AnswerCandidate::new("June 1, 2018", Origin::Greedy)])
        .unwrap();
    assert!(fb.merged.iter().any(|d| d.passage_id == "deadpool#0"));
    assert_eq!(fb.merged.iter().find(|d| d.passage_id == "deadpool#0").unwrap().title, "Deadpool 2");
}

#[test]
fn refine_uses_passages_and_candidates() {
    let (store, index) = deadpool_corpus();
    let cfg = PipelineConfig::default();
    let b = ScriptedBackend::new(
        Script::new("June 1, 2018").rule(rule(&["Candidate answers:", "Deadpool 2", "- June 1, 2018"], "May 18, 2018.", None)),
    );
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let cands = vec![AnswerCandidate::new("June 1, 2018", Origin::Greedy)];
    let pool = p.retrieve_feedback(DEADPOOL_Q, &cands).unwrap();
    let (refined, prompt) = p.refine(DEADPOOL_Q, &cands, &pool, false).unwrap();
    assert_eq!(refined.text, "May 18, 2018");
    assert_eq!(refined.origin, Origin::Refined);
    assert!(prompt.contains("Passage 1 (Deadpool 2): release moved"));

    // empty pool: passage block renders empty, the backend answers anyway
    let (r, prompt) = p.refine(DEADPOOL_Q, &cands, &RetrievalPool::default(), false).unwrap();
    assert!(prompt.contains("Passages:\n\n\nQuestion:"));
    assert_eq!(r.text, "June 1, 2018");
}

fn ll_backend(initial_ll: f64, refined_ll: f64) -> ScriptedBackend {
    ScriptedBackend::new(
        Script::new("x")
            .rule(rule(&["Candidate answers:"], "Steve Earle", Some(vec![refined_ll, refined_ll])))
            .rule(rule(&["who sang"], "Tom Waits", Some(vec![initial_ll, initial_ll]))),
    )
}

#[test]
fn ensemble_selection_rule() {
    let (store, index) = deadpool_corpus();
    let cfg = PipelineConfig::default();
    let init = AnswerCandidate::new("Tom Waits", Origin::Greedy);
    let refd = AnswerCandidate::new("Steve Earle", Origin::Refined);
    for (i_ll, r_ll, expect) in [(-0.2, -0.5, "Tom Waits"), (-0.5, -0.2, "Steve Earle"), (-0.3, -0.3, "Steve Earle")] {
        let b = ll_backend(i_ll, r_ll);
        let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
        let out = p
            .ensemble_select(&init, "who sang this?", &refd, "who sang this? Candidate answers:")
            .unwrap();
        assert_eq!(out.final_answer.text, expect, "{i_ll} vs {r_ll}");
        assert!((out.initial_ll - i_ll).abs() < 1e-12);
        assert!((out.refined_ll - r_ll).abs() < 1e-12);
    }
}

#[test]
fn select_answer_prefers_refined_on_ties() {
    assert_eq!(select_answer(-0.2, -0.5), Selection::Initial);
    assert_eq!(select_answer(-0.5, -0.2), Selection::Refined);
    assert_eq!(select_answer(-0.3, -0.3), Selection::Refined);
}

#[test]
fn initial_under_both_scores_the_initial_answer_twice() {
    let (store, index) = deadpool_corpus();
    let cfg = PipelineConfig {
        ensemble_scoring: EnsembleScoring::InitialUnderBoth,
        ..PipelineConfig::default()
    };
    let mut refine_rule = rule(&["Candidate answers:"], "Steve Earle", Some(vec![-0.1, -0.1]));
    refine_rule.scores = vec![crate::lm::ScoreEntry {
        completion: "Tom Waits".into(),
        logprobs: vec![-2.0, -2.0],
    }];
    let b = ScriptedBackend::new(
        Script::new("x")
            .rule(refine_rule)
            .rule(rule(&["who sang"], "Tom Waits", Some(vec![-0.5, -0.5]))),
    );
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let out = p
        .ensemble_select(
            &AnswerCandidate::new("Tom Waits", Origin::Greedy),
            "who sang",
            &AnswerCandidate::new("Steve Earle", Origin::Refined),
            "who sang Candidate answers:",
        )
        .unwrap();
    assert_eq!(out.refined_ll, -2.0);
    assert_eq!(out.final_answer.text, "Tom Waits");
}

#[test]
fn cot_answer_extraction() {
    let m = DEFAULT_ANSWER_MARKER;
    assert_eq!(
        extract_cot_answer("The film is set in LA. So the answer is Los Angeles.", m),
        "Los Angeles"
    );
    assert_eq!(extract_cot_answer("Paris", m), "Paris");
    assert_eq!(extract_cot_answer("", m), "");
    assert_eq!(
        extract_cot_answer("So the answer is A. Wait. So the answer is: B.", m),
        "B"
    );
    assert_eq!(extract_cot_answer("step one\nParis.\n\n", m), "Paris");
}

fn fig6_backend() -> ScriptedBackend {
    let mut initial = rule(&["who sang"], "Tom Waits", Some(vec![-0.9, -0.9]));
    initial.samples = vec!["Tom Waits".into(), "Steve Earle".into()];
    ScriptedBackend::new(
        Script::new("x")
            .rule(rule(&["Candidate answers:", "who sang"], "Steve Earle", Some(vec![-0.1, -0.2])))
            .rule(initial),
    )
}

fn song_corpus() -> (CorpusStore, Bm25Index) {
    corpus(&[
        ("song", "Copperhead Road", "Copperhead Road was sung by Steve Earle while Tom Waits composed"),
        ("other", "Other", "an unrelated passage about rivers"),
    ])
}

#[test]
fn closed_book_trace() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig::default();
    let b = fig6_backend();
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let t = p.run(&qa("q1", "who sang copperhead road?", &["Steve Earle"]), Mode::ClosedBook).unwrap();
    assert!(t.pool.merged.is_empty());
    assert_eq!(t.final_answer.text, "Tom Waits");
    assert_eq!(t.final_answer, t.candidates[0]);
    assert!(t.refined.is_none());
    assert_eq!(t.prompts.keys().collect::<Vec<_>>(), ["initial"]);
}

#[test]
fn full_mode_reproduces_case_study() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig { n_samples: 2, ..PipelineConfig::default() };
    let b = fig6_backend();
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let t = p.run(&qa("q1", "who sang copperhead road?", &["Steve Earle"]), Mode::RefeedFull).unwrap();
    assert_eq!(t.final_answer.text, "Steve Earle");
    assert!(t.ensemble_applied);
    assert_eq!(t.initial_ll, Some(-0.9));
    assert!((t.refined_ll.unwrap() + 0.15).abs() < 1e-12);
    let texts: Vec<_> = t.candidates.iter().map(|c| c.text.as_str()).collect();
    assert_eq!(texts, ["Tom Waits", "Steve Earle"]);
    assert_eq!(t.pool.per_query.len(), 2);
    assert!(t.pool.merged.len() <= cfg.k_docs);
    assert_eq!(t.prompts.keys().collect::<Vec<_>>(), ["initial", "refine"]);
}

#[test]
fn basic_mode_keeps_identical_answer() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig::default();
    let b = ScriptedBackend::new(Script::new("Steve Earle"));
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let t = p.run(&qa("q1", "who sang copperhead road?", &["Steve Earle"]), Mode::RefeedBasic).unwrap();
    assert_eq!(t.candidates.len(), 1);
    assert_eq!(t.final_answer.text, "Steve Earle");
    assert_eq!(t.refined.as_ref().unwrap().text, t.candidates[0].text);
    assert!(!t.ensemble_applied);
    assert_eq!(t.final_answer.origin, Origin::Refined);
}

#[test]
fn ensemble_falls_back_without_logprobs() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig { n_samples: 2, ..PipelineConfig::default() };
    let mut b = fig6_backend().script().clone();
    b.supports_logprobs = false;
    let b = ScriptedBackend::new(b);
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let t = p.run(&qa("q1", "who sang copperhead road?", &["Steve Earle"]), Mode::RefeedFull).unwrap();
    assert!(!t.ensemble_applied);
    assert!(t.ensemble_fallback.is_some());
    assert_eq!(t.final_answer.text, "Steve Earle");
    assert!(t.initial_ll.is_none());
}

#[test]
fn retrieve_then_read_uses_question_only() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig::default();
    let b = ScriptedBackend::new(Script::new("x").rule(rule(&["Passages:", "who sang"], "Steve Earle", None)));
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let t = p.run(&qa("q1", "who sang copperhead road?", &["Steve Earle"]), Mode::RetrieveThenRead).unwrap();
    assert_eq!(t.pool.per_query.len(), 1);
    assert_eq!(t.pool.per_query[0].query, "who sang copperhead road?");
    assert!(t.candidates.is_empty());
    assert_eq!(t.final_answer.text, "Steve Earle");
    assert!(t.prompts.contains_key("read"));
}

#[test]
fn cot_mode_extracts_answers_and_uses_cot_templates() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig::default();
    let b = ScriptedBackend::new(
        Script::new("x")
            .rule(rule(
                &["Candidate answers:", "who sang"],
                "The passage says Steve Earle sang it. So the answer is Steve Earle.",
                None,
            ))
            .rule(rule(&["who sang"], "Waits writes songs. So the answer is Tom Waits.", None)),
    );
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let t = p.run(&qa("q1", "who sang copperhead road?", &["Steve Earle"]), Mode::RefeedCot).unwrap();
    assert!(t.stages.cot);
    assert_eq!(t.candidates[0].text, "Tom Waits");
    assert!(t.candidates[0].raw.as_ref().unwrap().contains("Waits writes songs"));
    assert_eq!(t.pool.per_query[0].query, "who sang copperhead road? Tom Waits");
    assert_eq!(t.final_answer.text, "Steve Earle");
    assert_eq!(t.prompts.keys().collect::<Vec<_>>(), ["cot_initial", "cot_refine"]);
}

#[test]
fn config_switches_narrow_modes() {
    let cfg = PipelineConfig { diverse: false, ..PipelineConfig::default() };
    assert_eq!(
        Mode::RefeedFull.stages(&cfg),
        StageFlags { diverse: false, ensemble: true, cot: false }
    );
    let cfg = PipelineConfig { cot: true, ..PipelineConfig::default() };
    assert!(Mode::ClosedBook.stages(&cfg).cot);
    assert!(!Mode::RefeedBasic.stages(&PipelineConfig::default()).ensemble);
}

#[test]
fn invalid_config_rejected() {
    let (store, index) = song_corpus();
    let b = ScriptedBackend::new(Script::new("x"));
    for cfg in [
        PipelineConfig { k_docs: 0, ..PipelineConfig::default() },
        PipelineConfig { n_samples: 0, ..PipelineConfig::default() },
        PipelineConfig { decode_sample: DecodeParams::greedy(), ..PipelineConfig::default() },
    ] {
        assert!(matches!(Pipeline::new(&b, &index, &store, &cfg), Err(PipelineError::Config(_))));
    }
}

#[test]
fn trace_json_round_trip() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig { n_samples: 2, ..PipelineConfig::default() };
    let b = fig6_backend();
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let t = p.run(&qa("q1", "who sang copperhead road?", &["Steve Earle"]), Mode::RefeedFull).unwrap();
    let json = serde_json::to_string(&t).unwrap();
    assert!(json.contains("\"origin\":\"sample_2\""));
    assert!(json.contains("\"final\":"));
    let back: PipelineTrace = serde_json::from_str(&json).unwrap();
    assert_eq!(back, t);
    assert!(serde_json::from_str::<Origin>("\"sample_0\"").is_err());
}

fn batch_examples() -> Vec<Example> {
    (1..=5)
        .map(|i| qa(&format!("q{i}"), &format!("who sang song {i}?"), &["Steve Earle"]))
        .collect()
}

#[test]
fn batch_records_failures_and_continues() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig::default();
    let mut boom = rule(&["song 3"], "", None);
    boom.error = Some(crate::lm::SimulatedError::Transport);
    let b = ScriptedBackend::new(Script::new("Steve Earle").rule(boom));
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let (mut traces, mut failures) = (Vec::new(), Vec::new());
    let opts = BatchOptions { mode: Mode::RefeedBasic, workers: 3, strict: false };
    let s = run_batch(&p, &batch_examples(), opts, &mut traces, &mut failures).unwrap();
    assert_eq!(s, BatchSummary { examples: 5, traces: 4, failures: 1 });
    let ids: Vec<String> = String::from_utf8(traces)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<PipelineTrace>(l).unwrap().question_id)
        .collect();
    assert_eq!(ids, ["q1", "q2", "q4", "q5"]);
    let rec: FailureRecord = serde_json::from_slice(failures.trim_ascii_end()).unwrap();
    assert_eq!(rec.question_id, "q3");
    assert_eq!(rec.stage.as_deref(), Some("initial"));

    let opts = BatchOptions { strict: true, ..opts };
    let err = run_batch(&p, &batch_examples(), opts, &mut Vec::new(), &mut Vec::new()).unwrap_err();
    assert!(matches!(err, BatchError::Aborted { ref question_id, .. } if question_id == "q3"));
}

#[test]
fn batch_output_is_order_stable_across_worker_counts() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig { n_samples: 2, ..PipelineConfig::default() };
    let b = fig6_backend();
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let mut outputs = Vec::new();
    for workers in [1, 2, 8] {
        let mut traces = Vec::new();
        let opts = BatchOptions { mode: Mode::RefeedFull, workers, strict: true };
        run_batch(&p, &batch_examples(), opts, &mut traces, &mut Vec::new()).unwrap();
        outputs.push(traces);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn empty_batch() {
    let (store, index) = song_corpus();
    let cfg = PipelineConfig::default();
    let b = fig6_backend();
    let p = Pipeline::new(&b, &index, &store, &cfg).unwrap();
    let opts = BatchOptions { mode: Mode::RefeedFull, workers: 4, strict: false };
    let s = run_batch(&p, &[], opts, &mut Vec::new(), &mut Vec::new()).unwrap();
    assert_eq!(s, BatchSummary::default());
}
