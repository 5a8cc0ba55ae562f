//! Passage store: chunking of raw documents into fixed-size passages and
//! loading of QA / dialogue datasets.
//!
//! Raw documents arrive as line-delimited JSON (`id`, optional `title`, `text`).
//! Each document is split into consecutive chunks of at most `chunk_size`
//! whitespace tokens; chunk `i` of document `d` gets the id `d#i`.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_CHUNK_SIZE: usize = 100;
pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Ingest { line: usize, message: String },
    #[error("line {line}: duplicate document id `{id}`")]
    DuplicateDoc { line: usize, id: String },
    #[error("chunk size must be at least 1")]
    InvalidChunkSize,
    #[error("passage `{0}` not found")]
    NotFound(String),
    #[error("{path}: line {line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: line {line}: expected a {expected} record, found a {found} record")]
    KindMismatch {
        path: PathBuf,
        line: usize,
        expected: DatasetKind,
        found: DatasetKind,
    },
    #[error("corpus store {path}: {message}")]
    Store { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    pub source_doc: String,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_raw_docs: usize,
    pub num_passages: usize,
    pub total_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub id: String,
    pub history: Vec<String>,
    pub reference: String,
}

/// One evaluation record, either a QA question or a dialogue turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Example {
    Qa(QaExample),
    Dialogue(DialogueExample),
}

impl Example {
    pub fn id(&self) -> &str {
        match self {
            Example::Qa(q) => &q.id,
            Example::Dialogue(d) => &d.id,
        }
    }

    pub fn kind(&self) -> DatasetKind {
        match self {
            Example::Qa(_) => DatasetKind::Qa,
            Example::Dialogue(_) => DatasetKind::Dialogue,
        }
    }

    /// Text used as `{question}` in prompts and as the retrieval query.
    /// Dialogue histories are joined one turn per line.
    pub fn query_text(&self) -> String {
        match self {
            Example::Qa(q) => q.question.clone(),
            Example::Dialogue(d) => d.history.join("\n"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Qa,
    Dialogue,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Qa => "qa",
            DatasetKind::Dialogue => "dialogue",
        })
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qa" => Ok(DatasetKind::Qa),
            "dialogue" => Ok(DatasetKind::Dialogue),
            other => Err(format!("unknown dataset kind `{other}` (expected qa or dialogue)")),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawDoc {
    id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    stats: CorpusStats,
    chunk_size: usize,
}

/// Immutable, id-addressable set of passages.
#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
    stats: CorpusStats,
    chunk_size: usize,
}

/// Whitespace tokens used for chunking: maximal runs of non-whitespace.
pub fn whitespace_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Ingest line-delimited raw documents into a passage store.
pub fn ingest_corpus<R: BufRead>(
    input: R,
    chunk_size: usize,
) -> Result<(CorpusStore, CorpusStats), CorpusError> {
    if chunk_size == 0 {
        return Err(CorpusError::InvalidChunkSize);
    }
    let mut seen = HashSet::new();
    let mut passages = Vec::new();
    let mut stats = CorpusStats::default();

    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Ingest {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDoc = serde_json::from_str(&line).map_err(|e| CorpusError::Ingest {
            line: line_no,
            message: format!("malformed record: {e}"),
        })?;
        let id = raw.id.filter(|s| !s.is_empty()).ok_or(CorpusError::Ingest {
            line: line_no,
            message: "missing or empty field `id`".into(),
        })?;
        let text = raw.text.filter(|s| !s.trim().is_empty()).ok_or(CorpusError::Ingest {
            line: line_no,
            message: "missing or empty field `text`".into(),
        })?;
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateDoc { line: line_no, id });
        }
        let title = raw.title.unwrap_or_default();

        let tokens: Vec<&str> = whitespace_tokens(&text).collect();
        stats.num_raw_docs += 1;
        stats.total_tokens += tokens.len();
        for (offset, chunk) in tokens.chunks(chunk_size).enumerate() {
            passages.push(Passage {
                id: format!("{id}#{offset}"),
                title: title.clone(),
                text: chunk.join(" "),
                source_doc: id.clone(),
                offset,
            });
        }
    }
    stats.num_passages = passages.len();
    let store = CorpusStore::from_parts(passages, stats, chunk_size);
    Ok((store, stats))
}

impl CorpusStore {
    fn from_parts(passages: Vec<Passage>, stats: CorpusStats, chunk_size: usize) -> Self {
        let by_id = passages
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();
        Self {
            passages,
            by_id,
            stats,
            chunk_size,
        }
    }

    pub fn get_passage(&self, id: &str) -> Result<&Passage, CorpusError> {
        self.by_id
            .get(id)
            .map(|&i| &self.passages[i])
            .ok_or_else(|| CorpusError::NotFound(id.to_string()))
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn stats(&self) -> CorpusStats {
        self.stats
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    /// Write `passages.jsonl` and `manifest.json` into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(PASSAGES_FILE);
        let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        for p in &self.passages {
            let line = serde_json::to_string(p).expect("passage serializes");
            writeln!(out, "{line}").map_err(io_err(&path))?;
        }
        out.flush().map_err(io_err(&path))?;

        let path = dir.join(MANIFEST_FILE);
        let manifest = Manifest {
            stats: self.stats,
            chunk_size: self.chunk_size,
        };
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, body + "\n").map_err(io_err(&path))
    }

    pub fn open(dir: &Path) -> Result<Self, CorpusError> {
        let path = dir.join(MANIFEST_FILE);
        let body = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&body).map_err(|e| CorpusError::Store {
            path: path.clone(),
            message: e.to_string(),
        })?;

        let path = dir.join(PASSAGES_FILE);
        let reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        let mut passages = Vec::with_capacity(manifest.stats.num_passages);
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Passage = serde_json::from_str(&line).map_err(|e| CorpusError::Store {
                path: path.clone(),
                message: format!("line {}: {e}", idx + 1),
            })?;
            passages.push(p);
        }
        if passages.len() != manifest.stats.num_passages {
            return Err(CorpusError::Store {
                path,
                message: format!(
                    "manifest lists {} passages but file has {}",
                    manifest.stats.num_passages,
                    passages.len()
                ),
            });
        }
        let store = Self::from_parts(passages, manifest.stats, manifest.chunk_size);
        if store.by_id.len() != store.passages.len() {
            return Err(CorpusError::Store {
                path: dir.to_path_buf(),
                message: "duplicate passage ids".into(),
            });
        }
        Ok(store)
    }
}

/// Parse a line-delimited dataset file, preserving order.
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Vec<Example>, CorpusError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_example(path, idx + 1, &line, kind)?);
    }
    Ok(out)
}

fn parse_example(
    path: &Path,
    line_no: usize,
    line: &str,
    kind: DatasetKind,
) -> Result<Example, CorpusError> {
    let schema = |message: String| CorpusError::Schema {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let value: Value =
        serde_json::from_str(line).map_err(|e| schema(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| schema("record is not an object".into()))?;

    let looks_like = |k: DatasetKind| match k {
        DatasetKind::Qa => obj.contains_key("question") || obj.contains_key("answers"),
        DatasetKind::Dialogue => obj.contains_key("history") || obj.contains_key("reference"),
    };
    let other = match kind {
        DatasetKind::Qa => DatasetKind::Dialogue,
        DatasetKind::Dialogue => DatasetKind::Qa,
    };
    if !looks_like(kind) && looks_like(other) {
        return Err(CorpusError::KindMismatch {
            path: path.to_path_buf(),
            line: line_no,
            expected: kind,
            found: other,
        });
    }

    let string_field = |name: &str| -> Result<String, CorpusError> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(schema(format!("field `{name}` must be a string"))),
            None => Err(schema(format!("missing field `{name}`"))),
        }
    };
    let string_list = |name: &str| -> Result<Vec<String>, CorpusError> {
        let arr = match obj.get(name) {
            Some(Value::Array(a)) => a,
            Some(_) => return Err(schema(format!("field `{name}` must be an array of strings"))),
            None => return Err(schema(format!("missing field `{name}`"))),
        };
        arr.iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| schema(format!("field `{name}` must be an array of strings")))
            })
            .collect()
    };

    let id = string_field("id")?;
    match kind {
        DatasetKind::Qa => {
            let question = string_field("question")?;
            let answers = string_list("answers")?;
            if question.trim().is_empty() {
                return Err(schema("field `question` is empty".into()));
            }
            if answers.is_empty() {
                return Err(schema("field `answers` is empty".into()));
            }
            Ok(Example::Qa(QaExample {
                id,
                question,
                answers,
            }))
        }
        DatasetKind::Dialogue => {
            let history = string_list("history")?;
            let reference = string_field("reference")?;
            if reference.trim().is_empty() {
                return Err(schema("field `reference` is empty".into()));
            }
            Ok(Example::Dialogue(DialogueExample {
                id,
                history,
                reference,
            }))
        }
    }
}

/// Serialize examples in the same line-delimited format `load_dataset` reads.
pub fn write_dataset<W: Write>(mut out: W, examples: &[Example]) -> std::io::Result<()> {
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(out, "{line}")?;
    }
    Ok(())
}
