//! Sparse-shot learning toolkit.
//!
//! Implements the exclusive cross-entropy loss family for training pixel
//! scorers on sparsely annotated images, together with the surrounding
//! machinery needed to study it at desk scale: a synthetic blob-scene
//! generator, an annotation sparsifier, a minimal differentiable scorer,
//! detection metrics, and a config-driven benchmark grid.
//!
//! The core numeric code is generic over the scalar type through the
//! [`scalar::Real`] trait (`f32` or `f64`). Concrete `f64` aliases for the
//! common field types live at the crate root; `f64` is the workhorse
//! precision for training and for every reproducibility contract.

pub mod bench;
pub mod data;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod schedules;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Dense per-pixel raw scores at workhorse precision.
pub type LogitField = field::Field2<f64>;

/// Dense per-pixel probabilities at workhorse precision.
pub type ProbabilityField = field::Field2<f64>;

/// Single-channel image at workhorse precision.
pub type GrayImage = data::Image<f64>;

/// Scorer parameters at workhorse precision.
pub type Scorer = model::ScorerParams<f64>;
