//! Handwritten text recognition with a gated-convolution/SE feature
//! extractor, stacked BiLSTMs, combined multi-head and Proxima attention, a
//! CTC output head, and teacher-student distillation.

pub mod cli;
pub mod ctc;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod train;

pub use error::{Error, Result};
