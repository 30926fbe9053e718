//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the binary tensor container and the text exporters.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic at byte offset {offset}: expected \"T1MC\", found {found:?}")]
    BadMagic { offset: usize, found: [u8; 4] },
    #[error("unsupported container version {found} at byte offset {offset} (expected {expected})")]
    VersionMismatch {
        offset: usize,
        found: u8,
        expected: u8,
    },
    #[error("truncated payload at byte offset {offset}: needed {needed} bytes, found {available}")]
    TruncatedPayload {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("non-finite value at byte offset {offset} (element {index})")]
    NonFiniteData { offset: usize, index: usize },
    #[error("file holds a {found} but a {requested} was requested")]
    WrongKind {
        found: &'static str,
        requested: &'static str,
    },
    #[error("invalid header field at byte offset {offset}: {reason}")]
    BadHeader { offset: usize, reason: String },
    #[error("label {label} at element {index} exceeds 255")]
    LabelOverflow { label: usize, index: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Violations of the grid-container invariants.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("grid mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    GridMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },
    #[error("grid {w}x{h} too small: need at least {min}x{min}")]
    GridTooSmall { w: usize, h: usize, min: usize },
    #[error("data length {len} does not match {w}x{h}")]
    LengthMismatch { len: usize, w: usize, h: usize },
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("label {label} at element {index} is not below num_classes {num_classes}")]
    LabelOutOfRange {
        label: u8,
        index: usize,
        num_classes: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Failures of the registration solver.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("loss became non-finite and did not recover after {retries} step halvings")]
    NonFiniteLoss { retries: usize },
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
}

/// Failures of the per-pixel signal fit.
#[derive(Debug, Error)]
pub enum FitError {
    #[error("bad series: {0}")]
    BadSeries(String),
}

/// Failures of the evaluation metrics.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("mask has no pixels of class {class_id}")]
    EmptyMask { class_id: u8 },
    #[error("class {class_id} boundary has {found} connected components; need at least 2 to separate inner and outer contours")]
    BadTopology { class_id: u8, found: usize },
}

/// Rejections of a phantom specification.
#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

/// Loss-level failures.
#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("no labels supplied: at least one of the two label masks must be present")]
    NoLabels,
}
