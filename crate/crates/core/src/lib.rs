//! Per-joint inflammation detection from hand images under extreme class
//! imbalance.
//!
//! The pipeline: [`synth`] renders labeled hands, [`preprocess`] masks them
//! and cuts landmark-centred joint patches, [`model`] fuses a whole-hand
//! encoder with a per-joint patch encoder, [`pretrain`] trains encoders by
//! self-distillation, [`finetune`] fits the heads with focal loss on frozen
//! encoders and [`eval`] reports imbalance-aware metrics over patient-disjoint
//! folds.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod image;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod pretrain;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
