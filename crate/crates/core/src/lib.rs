//! Missing-frame reconstruction for multi-camera video.
//!
//! A separate conditional GAN is trained per conditioning source: the
//! target camera's frame `k` steps before the gap, the frame `k` steps
//! after it, and the synchronous frame of every overlapping reference
//! camera. At inference each source produces a candidate, and candidates are
//! merged by a weighted average whose per-gap weights maximize mean PSNR on
//! a validation split.
//!
//! Modules follow the pipeline: [`types`] and [`data`] describe and load
//! multi-camera sequences, [`model`] and [`training`] build and fit the
//! per-source networks, [`fusion`] merges candidates and calibrates weights,
//! [`metrics`] scores reconstructions and [`eval`] runs gap sweeps.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;
pub mod types;

pub use config::Config;
pub use error::{Error, Result};
pub use types::{
    validate_task, CameraId, CameraRig, CameraSpec, CandidateSet, Frame, FusionWeights,
    ReconstructionTask, Rect, SourceTag,
};
