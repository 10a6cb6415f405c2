use std::path::PathBuf;

use thiserror::Error;

use crate::types::SourceTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index mismatch: {0}")]
    IndexMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("camera {0} has no frames")]
    EmptyCamera(u16),

    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("gap {gap} too large: no valid center index in the requested split")]
    GapTooLarge { gap: usize },

    #[error("synthetic camera views do not overlap: {0}")]
    NonOverlappingViews(String),

    #[error("input of {height}x{width} is incompatible with a network of depth {depth}")]
    BadResolution {
        height: usize,
        width: usize,
        depth: usize,
    },

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("training source {tag} failed: {source}")]
    Source {
        tag: SourceTag,
        #[source]
        source: Box<Error>,
    },

    #[error("no model for source {0}")]
    MissingModel(SourceTag),

    #[error("no candidates to fuse")]
    NoCandidates,

    #[error("no fusion weights for gap {0}")]
    MissingGap(usize),

    #[error("validation split has no tasks for gap {0}")]
    EmptyValidation(usize),

    #[error("frame of {height}x{width} is smaller than the {window}x{window} window")]
    FrameTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("task i={index}, k={gap}: {source}")]
    Task {
        index: i64,
        gap: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot write {path}: {reason}")]
    UnwritablePath { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn for_task(self, index: i64, gap: usize) -> Self {
        Error::Task {
            index,
            gap,
            source: Box::new(self),
        }
    }
}
