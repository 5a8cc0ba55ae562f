use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use refeed_core::bm25::{build_index, Bm25Index, Bm25Params, INDEX_FILE};
use refeed_core::corpus::{ingest_corpus, load_dataset, CorpusStats, CorpusStore, DatasetKind, Example};
use refeed_core::lm::LanguageModel;
use refeed_core::metrics::{evaluate_run, CoverageReport, MetricsError, MetricsReport};
use refeed_core::pipeline::{
    run_batch, BatchOptions, BatchSummary, Mode, Pipeline, PipelineConfig, PipelineTrace, PoolDoc,
    QueryHits, RetrievalPool,
};

use crate::config::{check_capabilities, RunConfig};

pub const TRACES_FILE: &str = "traces.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const COVERAGE_FILE: &str = "coverage.json";
pub const ABLATION_FILE: &str = "ablation.json";

/// Chunk a raw corpus, build the BM25 index, and write both to `out`.
pub fn index(input: &Path, out: &Path, chunk_size: usize, params: Bm25Params, stdout: &mut dyn Write) -> Result<CorpusStats> {
    params.validate()?;
    let file = File::open(input).with_context(|| format!("cannot open raw corpus {}", input.display()))?;
    let (store, stats) =
        ingest_corpus(BufReader::new(file), chunk_size).with_context(|| format!("ingesting {}", input.display()))?;
    let idx = build_index(store.passages(), params)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    store.save(out)?;
    idx.save(&out.join(INDEX_FILE))?;
    writeln!(
        stdout,
        "num_raw_docs={} num_passages={} total_tokens={} terms={} avg_doc_length={:.2}",
        stats.num_raw_docs,
        stats.num_passages,
        stats.total_tokens,
        idx.num_terms(),
        idx.avg_doc_length()
    )?;
    Ok(stats)
}

struct Corpus {
    store: CorpusStore,
    index: Bm25Index,
}

fn open_corpus(dir: &Path) -> Result<Corpus> {
    let store = CorpusStore::open(dir).with_context(|| format!("opening corpus store {}", dir.display()))?;
    let index = Bm25Index::load(&dir.join(INDEX_FILE))?;
    Ok(Corpus { store, index })
}

/// Print the top-`k` passages for `query` as `id<TAB>score<TAB>title`.
pub fn retrieve(dir: &Path, query: &str, k: usize, stdout: &mut dyn Write) -> Result<usize> {
    let c = open_corpus(dir)?;
    let hits = c.index.search(query, k);
    for h in &hits {
        let title = c.store.get_passage(&h.passage_id).map(|p| p.title.as_str()).unwrap_or("");
        writeln!(stdout, "{}\t{:.6}\t{}", h.passage_id, h.score, title)?;
    }
    Ok(hits.len())
}

fn sha256_hex(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

/// Everything that determines a run's outputs, minus the data itself.
pub fn fingerprint(cfg: &RunConfig, mode: Mode, pcfg: &PipelineConfig, backend: &dyn LanguageModel, stats: CorpusStats) -> Value {
    let templates: BTreeMap<String, String> = pcfg
        .templates
        .iter()
        .map(|(stage, t)| (stage.to_string(), sha256_hex(t.body())))
        .collect();
    let shots = pcfg.templates.iter().next().map_or(0, |(_, t)| t.shots().len());
    json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "mode": mode,
        "stages": mode.stages(pcfg),
        "backend": backend.name(),
        "capabilities": backend.capabilities(),
        "k_docs": pcfg.k_docs,
        "n_samples": pcfg.n_samples,
        "pipeline": pcfg,
        "templates": templates,
        "shots": shots,
        "seed": cfg.seed,
        "task": cfg.task,
        "corpus": stats,
        "dataset": cfg.dataset_path.file_name().map(|f| f.to_string_lossy().into_owned()),
    })
}

struct Prepared {
    corpus: Corpus,
    examples: Vec<Example>,
    pcfg: PipelineConfig,
    backend: Box<dyn LanguageModel>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = open_corpus(&cfg.corpus_dir)?;
    let examples = load_dataset(&cfg.dataset_path, cfg.task)?;
    let pcfg = cfg.pipeline_config()?;
    let backend = cfg.backend()?;
    Ok(Prepared {
        corpus,
        examples,
        pcfg,
        backend,
    })
}

fn run_into(cfg: &RunConfig, p: &Prepared, mode: Mode, pcfg: &PipelineConfig, dir: &Path) -> Result<BatchSummary> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let pipeline = Pipeline::new(p.backend.as_ref(), &p.corpus.index, &p.corpus.store, pcfg)?;
    let create = |name: &str| -> Result<BufWriter<File>> {
        let path = dir.join(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    };
    let mut traces = create(TRACES_FILE)?;
    let mut failures = create(FAILURES_FILE)?;
    let opts = BatchOptions {
        mode,
        workers: cfg.workers,
        strict: cfg.strict,
    };
    let summary = run_batch(&pipeline, &p.examples, opts, &mut traces, &mut failures)?;
    let mut fp = fingerprint(cfg, mode, pcfg, p.backend.as_ref(), p.corpus.store.stats());
    fp["summary"] = json!(summary);
    let body = serde_json::to_string_pretty(&fp)? + "\n";
    std::fs::write(dir.join(RUN_FILE), body)?;
    Ok(summary)
}

/// Run one pipeline mode over the dataset.
pub fn run(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<BatchSummary> {
    let p = prepare(cfg)?;
    for w in check_capabilities(p.backend.as_ref(), cfg.mode, &p.pcfg)? {
        log::warn!("{w}");
    }
    let summary = run_into(cfg, &p, cfg.mode, &p.pcfg, &cfg.output_dir)?;
    writeln!(
        stdout,
        "mode={} examples={} traces={} failures={} output={}",
        cfg.mode,
        summary.examples,
        summary.traces,
        summary.failures,
        cfg.output_dir.display()
    )?;
    Ok(summary)
}

pub fn read_traces(path: &Path) -> Result<Vec<PipelineTrace>> {
    let file = File::open(path).with_context(|| format!("cannot open traces {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).with_context(|| format!("{}:{}: invalid trace", path.display(), i + 1))?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub traces: PathBuf,
    pub dataset: PathBuf,
    pub task: DatasetKind,
    pub ks: Vec<usize>,
    /// Report path; defaults to `report.json` next to the traces.
    pub out: Option<PathBuf>,
    /// Corpus directory for a question-only retrieval arm.
    pub coverage_corpus: Option<PathBuf>,
}

fn score(traces: &[PipelineTrace], dataset: &[Example], ks: &[usize]) -> Result<MetricsReport> {
    evaluate_run(traces, dataset, ks).map_err(|e| match e {
        MetricsError::UnknownIds(ids) => anyhow::anyhow!("trace ids not in the dataset: {}", ids.join(", ")),
        other => other.into(),
    })
}

/// Question-only retrieval against the traces' own pools.
pub fn coverage(corpus_dir: &Path, traces: &[PipelineTrace], dataset: &[Example], ks: &[usize]) -> Result<CoverageReport> {
    let c = open_corpus(corpus_dir)?;
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let by_id: BTreeMap<&str, &PipelineTrace> = traces.iter().map(|t| (t.question_id.as_str(), t)).collect();
    let mut question_only = Vec::new();
    let mut from_traces = Vec::new();
    let mut golds = Vec::new();
    for ex in dataset {
        let Example::Qa(q) = ex else { continue };
        let hits = c.index.search(&q.question, kmax);
        let merged = hits
            .iter()
            .map(|h| {
                let p = c.store.get_passage(&h.passage_id)?;
                Ok(PoolDoc {
                    passage_id: h.passage_id.clone(),
                    score: h.score,
                    title: p.title.clone(),
                    text: p.text.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        question_only.push(RetrievalPool {
            per_query: vec![QueryHits {
                query: q.question.clone(),
                hits,
            }],
            merged,
        });
        from_traces.push(by_id.get(q.id.as_str()).map(|t| t.pool.clone()).unwrap_or_default());
        golds.push(q.answers.clone());
    }
    let mut report = CoverageReport::default();
    report.add_arm("question_only", &question_only, &golds, ks)?;
    report.add_arm("traces", &from_traces, &golds, ks)?;
    Ok(report)
}

fn print_report(r: &MetricsReport, stdout: &mut dyn Write) -> Result<()> {
    writeln!(stdout, "examples\t{}", r.num_examples)?;
    writeln!(stdout, "EM\t{:.4}", r.em)?;
    writeln!(stdout, "F1\t{:.4}", r.f1)?;
    if let Some(rl) = r.rouge_l {
        writeln!(stdout, "Rouge-L\t{rl:.4}")?;
    }
    for (k, v) in &r.recall_at_k {
        writeln!(stdout, "recall@{k}\t{v:.4}")?;
    }
    if !r.missing.is_empty() {
        writeln!(stdout, "missing\t{}", r.missing.len())?;
    }
    Ok(())
}

/// Score a traces file against its dataset and write the report.
pub fn eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<MetricsReport> {
    let traces = read_traces(&args.traces)?;
    let dataset = load_dataset(&args.dataset, args.task)?;
    if traces.is_empty() && !dataset.is_empty() {
        log::warn!("{} holds no traces; every example scores zero", args.traces.display());
    }
    let mut report = score(&traces, &dataset, &args.ks)?;
    if !report.missing.is_empty() && !traces.is_empty() {
        log::warn!("{} examples have no trace and score zero", report.missing.len());
    }
    let dir = args.traces.parent().unwrap_or(Path::new("."));
    if let Ok(body) = std::fs::read_to_string(dir.join(RUN_FILE)) {
        report.metadata.fingerprint = serde_json::from_str(&body).ok();
    }
    let out = args.out.clone().unwrap_or_else(|| dir.join(REPORT_FILE));
    std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    print_report(&report, stdout)?;

    if let Some(corpus) = &args.coverage_corpus {
        let cov = coverage(corpus, &traces, &dataset, &args.ks)?;
        for (arm, row) in &cov.arms {
            let cells: Vec<String> = row.iter().map(|(k, v)| format!("recall@{k}={v:.4}")).collect();
            writeln!(stdout, "coverage {arm}\t{}", cells.join("\t"))?;
        }
        let path = out.with_file_name(COVERAGE_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&cov)? + "\n")?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub mode: Mode,
    pub diverse: bool,
    pub ensemble: bool,
    pub em: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    pub failures: usize,
}

/// The five arms compared by `ablate`: label, directory, mode, diverse, ensemble.
pub const ABLATION_ARMS: [(&str, &str, Mode, bool, bool); 5] = [
    ("ReFeed", "refeed_full", Mode::RefeedFull, true, true),
    ("w/o diversifying generation", "no_diverse", Mode::RefeedFull, false, true),
    ("w/o ensemble before & after", "no_ensemble", Mode::RefeedFull, true, false),
    ("Retrieve-then-read", "retrieve_then_read", Mode::RetrieveThenRead, true, true),
    ("Closed-book", "closed_book", Mode::ClosedBook, true, true),
];

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let dialogue = rows.iter().any(|r| r.rouge_l.is_some());
    let mut out = String::from(if dialogue {
        "| Method | F1 | Rouge-L |\n|---|---:|---:|\n"
    } else {
        "| Method | EM | F1 |\n|---|---:|---:|\n"
    });
    for r in rows {
        let cells = if dialogue {
            format!("{} | {}", pct(r.f1), pct(r.rouge_l.unwrap_or(0.0)))
        } else {
            format!("{} | {}", pct(r.em), pct(r.f1))
        };
        out.push_str(&format!("| {} | {cells} |\n", r.method));
    }
    out
}

/// Run the full pipeline, its two ablations and both baselines on the same data.
pub fn ablate(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<Vec<AblationRow>> {
    let p = prepare(cfg)?;
    let arms: Vec<(&str, &str, Mode, PipelineConfig)> = ABLATION_ARMS
        .iter()
        .map(|&(label, dir, mode, diverse, ensemble)| {
            let mut pcfg = p.pcfg.clone();
            pcfg.diverse = diverse;
            pcfg.ensemble = ensemble;
            (label, dir, mode, pcfg)
        })
        .collect();
    for (label, _, mode, pcfg) in &arms {
        let warnings = check_capabilities(p.backend.as_ref(), *mode, pcfg).with_context(|| format!("arm `{label}`"))?;
        for w in warnings {
            log::warn!("{label}: {w}");
        }
    }

    let mut rows = Vec::new();
    for (label, dir, mode, pcfg) in &arms {
        let dir = cfg.output_dir.join(dir);
        let summary = run_into(cfg, &p, *mode, pcfg, &dir)?;
        let traces = read_traces(&dir.join(TRACES_FILE))?;
        let report = score(&traces, &p.examples, &[pcfg.k_docs])?;
        std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
        rows.push(AblationRow {
            method: label.to_string(),
            mode: *mode,
            diverse: mode.stages(pcfg).diverse,
            ensemble: mode.stages(pcfg).ensemble,
            em: report.em,
            f1: report.f1,
            rouge_l: report.rouge_l,
            failures: summary.failures,
        });
    }
    std::fs::write(
        cfg.output_dir.join(ABLATION_FILE),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;
    write!(stdout, "{}", render_ablation(&rows))?;
    if rows.iter().any(|r| r.failures > 0) {
        log::warn!("some examples failed; see failures.jsonl in each arm directory");
    }
    Ok(rows)
}

pub fn parse_ks(s: &str) -> Result<Vec<usize>> {
    let ks = s
        .split(',')
        .map(|k| k.trim().parse::<usize>().with_context(|| format!("bad K `{k}`")))
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() || ks.contains(&0) {
        bail!("Ks must be positive integers");
    }
    Ok(ks)
}
