use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::{Mode, Pipeline, PipelineError, PipelineTrace};
use crate::corpus::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub mode: Mode,
    pub workers: usize,
    /// Abort on the first failed example instead of recording it.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub examples: usize,
    pub traces: usize,
    pub failures: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("example `{question_id}` failed: {source}")]
    Aborted {
        question_id: String,
        #[source]
        source: PipelineError,
    },
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
}

/// Run `examples` on a pool of workers. Traces and failure records are
/// written in example order regardless of completion order, so output is
/// reproducible for a deterministic backend.
pub fn run_batch<T: Write, F: Write>(
    pipeline: &Pipeline<'_>,
    examples: &[Example],
    opts: BatchOptions,
    traces: &mut T,
    failures: &mut F,
) -> Result<BatchSummary, BatchError> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<PipelineTrace, PipelineError>)>();
    let workers = opts.workers.max(1).min(examples.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop) = (&next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(ex) = examples.get(i) else { break };
                if tx.send((i, pipeline.run(ex, opts.mode))).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut summary = BatchSummary::default();
        let mut pending = BTreeMap::new();
        let mut emit_from = 0usize;
        let mut result = Ok(());
        for (i, outcome) in rx {
            pending.insert(i, outcome);
            while let Some(outcome) = pending.remove(&emit_from) {
                let ex = &examples[emit_from];
                emit_from += 1;
                summary.examples += 1;
                if result.is_err() {
                    continue;
                }
                let written = match outcome {
                    Ok(trace) => {
                        summary.traces += 1;
                        serde_json::to_writer(&mut *traces, &trace)
                            .map_err(std::io::Error::from)
                            .and_then(|_| traces.write_all(b"\n"))
                            .map_err(BatchError::from)
                    }
                    Err(e) if opts.strict => Err(BatchError::Aborted {
                        question_id: ex.id().to_string(),
                        source: e,
                    }),
                    Err(e) => {
                        summary.failures += 1;
                        log::warn!("example {} failed: {e}", ex.id());
                        let rec = FailureRecord {
                            question_id: ex.id().to_string(),
                            stage: e.stage().map(|s| s.to_string()),
                            error: e.to_string(),
                        };
                        serde_json::to_writer(&mut *failures, &rec)
                            .map_err(std::io::Error::from)
                            .and_then(|_| failures.write_all(b"\n"))
                            .map_err(BatchError::from)
                    }
                };
                if let Err(e) = written {
                    stop.store(true, Ordering::SeqCst);
                    result = Err(e);
                }
            }
        }
        result?;
        traces.flush()?;
        failures.flush()?;
        Ok(summary)
    })
}
