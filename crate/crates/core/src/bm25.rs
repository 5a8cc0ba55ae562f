//! Inverted index with Okapi BM25 scoring.
//!
//! Documents are stored in ascending passage-id order, so a document's
//! internal index doubles as its tie-break rank. Postings lists therefore come
//! out sorted by passage id without an extra sort.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::corpus::Passage;

pub const INDEX_FILE: &str = "index.bin";
const MAGIC: &[u8; 8] = b"RFBM25IX";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("duplicate passage id `{0}`")]
    DuplicatePassage(String),
    #[error("not a BM25 index file (bad magic header)")]
    BadMagic,
    #[error("unsupported index format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A lowercased run of alphanumeric characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(String);

impl Token {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Lowercase, then split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<Token> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| Token(t.to_string()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(IndexError::InvalidParams(format!("k1 must be a non-negative number, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(IndexError::InvalidParams(format!("b must lie in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub passage_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    terms: Vec<String>,
    postings: Vec<Vec<Posting>>,
    term_lookup: HashMap<String, usize>,
    doc_lookup: HashMap<String, u32>,
}

/// Build an index over the passages' text.
pub fn build_index(passages: &[Passage], params: Bm25Params) -> Result<Bm25Index, IndexError> {
    Bm25Index::build(passages.iter().map(|p| (p.id.as_str(), p.text.as_str())), params)
}

impl Bm25Index {
    pub fn build<'a, I>(docs: I, params: Bm25Params) -> Result<Self, IndexError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        params.validate()?;
        let mut docs: Vec<(&str, &str)> = docs.into_iter().collect();
        if docs.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        docs.sort_unstable_by(|a, b| a.0.cmp(b.0));
        if let Some(w) = docs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(IndexError::DuplicatePassage(w[0].0.to_string()));
        }

        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut inverted: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (doc, (_, text)) in docs.iter().enumerate() {
            let tokens = tokenize(text);
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t.0).or_default() += 1;
            }
            for (term, count) in tf {
                inverted.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
        }
        let (terms, postings) = inverted.into_iter().unzip();
        let doc_ids = docs.into_iter().map(|(id, _)| id.to_string()).collect();
        Ok(Self::assemble(params, doc_ids, doc_lengths, terms, postings))
    }

    fn assemble(
        params: Bm25Params,
        doc_ids: Vec<String>,
        doc_lengths: Vec<u32>,
        terms: Vec<String>,
        postings: Vec<Vec<Posting>>,
    ) -> Self {
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        let term_lookup = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let doc_lookup = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Self {
            params,
            doc_ids,
            doc_lengths,
            avg_doc_length,
            terms,
            postings,
            term_lookup,
            doc_lookup,
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn doc_length(&self, passage_id: &str) -> Option<u32> {
        self.doc_lookup
            .get(passage_id)
            .map(|&i| self.doc_lengths[i as usize])
    }

    /// Passage ids in index order (ascending).
    pub fn passage_ids(&self) -> impl Iterator<Item = &str> {
        self.doc_ids.iter().map(String::as_str)
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.term_lookup
            .get(term)
            .map_or(0, |&t| self.postings[t].len())
    }

    /// `(passage_id, term_frequency)` pairs for a term, sorted by passage id.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.term_lookup.get(term).map_or_else(Vec::new, |&t| {
            self.postings[t]
                .iter()
                .map(|p| (self.doc_ids[p.doc as usize].as_str(), p.tf))
                .collect()
        })
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-`k` passages by BM25 score, highest first; ties by ascending id.
    /// Repeated query terms contribute once per occurrence.
    pub fn search(&self, query: &str, k: usize) -> Vec<ScoredDoc> {
        if k == 0 {
            return Vec::new();
        }
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for token in tokenize(query) {
            let Some(&t) = self.term_lookup.get(token.as_str()) else {
                continue;
            };
            let list = &self.postings[t];
            let idf = self.idf(list.len());
            for p in list {
                let tf = f64::from(p.tf);
                let dl = f64::from(self.doc_lengths[p.doc as usize]);
                let norm = if self.avg_doc_length > 0.0 {
                    dl / self.avg_doc_length
                } else {
                    0.0
                };
                let s = idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm));
                *scores.entry(p.doc).or_insert(0.0) += s;
            }
        }

        let mut hits: Vec<(u32, f64)> = scores.into_iter().filter(|&(_, s)| s > 0.0).collect();
        let order = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(order);
        hits.into_iter()
            .map(|(doc, score)| ScoredDoc {
                passage_id: self.doc_ids[doc as usize].clone(),
                score,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        out.write_f64::<LittleEndian>(self.params.k1)?;
        out.write_f64::<LittleEndian>(self.params.b)?;
        out.write_u64::<LittleEndian>(self.doc_ids.len() as u64)?;
        for (id, &len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            write_str(out, id)?;
            out.write_u32::<LittleEndian>(len)?;
        }
        out.write_u64::<LittleEndian>(self.terms.len() as u64)?;
        for (term, list) in self.terms.iter().zip(&self.postings) {
            write_str(out, term)?;
            out.write_u32::<LittleEndian>(list.len() as u32)?;
            for p in list {
                out.write_u32::<LittleEndian>(p.doc)?;
                out.write_u32::<LittleEndian>(p.tf)?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| IndexError::BadMagic)?;
        if &magic != MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != FORMAT_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let params = Bm25Params {
            k1: r.read_f64::<LittleEndian>().map_err(truncated)?,
            b: r.read_f64::<LittleEndian>().map_err(truncated)?,
        };
        let num_docs = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        if num_docs == 0 {
            return Err(IndexError::Corrupt("index has no documents".into()));
        }
        let mut doc_ids = Vec::with_capacity(num_docs.min(1 << 20));
        let mut doc_lengths = Vec::with_capacity(num_docs.min(1 << 20));
        for _ in 0..num_docs {
            doc_ids.push(read_str(&mut r)?);
            doc_lengths.push(r.read_u32::<LittleEndian>().map_err(truncated)?);
        }
        if doc_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IndexError::Corrupt("passage ids not strictly ascending".into()));
        }
        let num_terms = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let mut terms = Vec::with_capacity(num_terms.min(1 << 20));
        let mut postings = Vec::with_capacity(num_terms.min(1 << 20));
        for _ in 0..num_terms {
            terms.push(read_str(&mut r)?);
            let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut list = Vec::with_capacity(n.min(num_docs));
            for _ in 0..n {
                let doc = r.read_u32::<LittleEndian>().map_err(truncated)?;
                let tf = r.read_u32::<LittleEndian>().map_err(truncated)?;
                if doc as usize >= num_docs {
                    return Err(IndexError::Corrupt(format!("posting refers to doc {doc}")));
                }
                list.push(Posting { doc, tf });
            }
            postings.push(list);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        Ok(Self::assemble(params, doc_ids, doc_lengths, terms, postings))
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        fs::write(path, self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn truncated(_: std::io::Error) -> IndexError {
    IndexError::Corrupt("unexpected end of data".into())
}

fn write_str<W: Write>(out: &mut W, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String, IndexError> {
    let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(truncated(std::io::ErrorKind::UnexpectedEof.into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| IndexError::Corrupt("invalid utf-8".into()))
}
