//! Domain-invariant, class-specific representation learning on synthetic
//! multi-domain classification tasks.
//!
//! The library trains a small dense encoder alongside learnable per-domain
//! prototypes. Each step first fits the prototypes to the current batch's
//! momentum-encoder features, then subtracts them to isolate class-related
//! features, and optimizes a combined objective: classification
//! cross-entropy, a cross-domain alignment term over same-class pairs, and a
//! class-specificity term whose soft labels come from a FIFO memory queue
//! filled by a slowly updated (EMA) copy of the encoder.
//!
//! Everything is `f64`, hand-differentiated, and deterministic given a seed;
//! `gradcheck` verifies every analytic gradient against central finite
//! differences.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod queue;
pub mod seeding;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{DicsError, Result};
