//! One-stage visual grounding.
//!
//! A query embedding is broadcast over a three-level feature pyramid,
//! concatenated with visual and fixed spatial-coordinate features, fused by a
//! per-location affine layer, and scored by a detection head whose anchor
//! confidences share a single softmax. The crate also carries the machinery
//! around the model: IoU-space anchor clustering, letterbox preprocessing,
//! a synthetic grounding task, Accu@IoU scoring and region-proposal hit-rate
//! analysis.

pub mod anchors;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod spatial;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
