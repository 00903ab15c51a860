//! Continual neural video representation.
//!
//! Videos arrive one session at a time and are fitted by a single index-to-frame
//! decoder. Each session trains a top-c score-selected subnetwork of the shared
//! weights; weights owned by earlier sessions are frozen, so every finished
//! session decodes bit-identically no matter how many sessions follow.

pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod fso;
pub mod metrics;
pub mod model;
pub mod persistence;
pub mod subnet;
pub mod tensor;
pub mod training;

pub use config::{FsoPlacement, ModelConfig, TrainConfig};
pub use data::{load_frame_dir, save_frames, synth_video, SessionManifest, SynthKind, VideoSession};
pub use error::{Error, Result};
pub use metrics::{MetricKind, MetricsReport};
pub use model::Model;
pub use subnet::{BitMask, SessionMaskSet};
pub use tensor::Tensor;
pub use training::{train_session, SessionOutcome, SessionTrainer, StepRecord};
pub use persistence::{Checkpoint, SessionRecord};
