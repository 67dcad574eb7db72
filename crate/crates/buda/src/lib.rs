//! Boundless unsupervised domain adaptation (BUDA) for pixel segmentation,
//! self-contained at desk scale.
//!
//! The crate trains a per-pixel segmenter across a synthetic source/target
//! domain gap, synthesizes features for never-labeled private classes from
//! semantic embeddings with a domain-aware moment-matching generator, and
//! evaluates with the generalized zero-shot segmentation protocol (shared and
//! private metrics plus their harmonic means).
//!
//! Layering, bottom up:
//! - [`rng`]: counter-based splittable random source
//! - [`tensor`]: dense f64 tensors and a tape for reverse-mode autodiff
//! - [`optim`]: SGD with polynomial decay, Adam
//! - [`models`]: segmenter, generator, domain discriminator, checkpoints
//! - [`losses`]: segmentation cross-entropy, entropy minimization, MMD, BCE
//! - [`scenario`]: synthetic dataset generation, disk format, validation
//! - [`metrics`]: confusion matrix and GZSL report
//! - [`pipeline`]: the three training steps and the baseline modes
//! - [`cli`]: subcommand implementations backing the `buda` binary

pub mod cli;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scenario;
pub mod tensor;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes: contract,
/// shape, numeric, format and schedule errors exit 2, dataset violations
/// exit 3, IO errors exit 1.
#[derive(Debug, Error)]
pub enum BudaError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("learning-rate schedule exhausted at iteration {0}")]
    ScheduleExhausted(u64),
    #[error("dataset violation: {0}")]
    DatasetViolation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BudaError>;

/// Records every data file the current thread opens for reading, so tests
/// can assert that oracle label sidecars stay untouched outside oracle mode.
pub mod ioaudit {
    use std::cell::RefCell;
    use std::path::{Path, PathBuf};

    thread_local! {
        static OPENED: RefCell<Vec<PathBuf>> = const { RefCell::new(Vec::new()) };
    }

    /// Notes that `path` was opened for reading on this thread.
    pub fn record(path: &Path) {
        OPENED.with(|o| o.borrow_mut().push(path.to_path_buf()));
    }

    /// Clears the record and returns what was opened since the last take.
    pub fn take() -> Vec<PathBuf> {
        OPENED.with(|o| std::mem::take(&mut *o.borrow_mut()))
    }
}

/// Writes `bytes` to `path` via a sibling temp file and rename, so readers
/// never observe a partially written file.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    let base = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{base}.tmp.{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
