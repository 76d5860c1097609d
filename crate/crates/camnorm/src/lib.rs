//! Desk-scale laboratory for camera-conditioned batch normalization.
//!
//! The crate trains small perceptrons over synthetic multi-camera feature
//! data, normalizing activations either with conventional batch statistics
//! or independently per camera group, re-estimates normalization statistics
//! from unlabeled samples at test time, and evaluates cross-camera retrieval
//! with CMC/mAP. Incremental training with exemplar replay and
//! weakly-supervised per-camera classification are built on the same parts.

pub mod adaptation;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod numerics;
pub mod runtime;
pub mod training;

pub use error::{Error, Result};
