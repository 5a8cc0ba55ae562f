//! Retrieval-feedback answer refinement.
//!
//! A language model answers a question closed-book, the answer is appended to
//! the question to query a BM25 index, and the model then revises its answer
//! with the retrieved passages in context. Optional stages sample several
//! answers to diversify retrieval and pick between the initial and revised
//! answer by mean token log-likelihood.

pub mod bm25;
pub mod corpus;
pub mod lm;
pub mod metrics;
pub mod pipeline;
