//! Generalized uncertainty-based evidential fusion and hybrid multi-head
//! attention for weakly supervised temporal action localization.
//!
//! The crate is organised bottom-up:
//!
//! - [`evidential`]: belief masses, conflict and multiplet-aware combination.
//! - [`numerics`]: tensors and a reverse-mode tape.
//! - [`model`]: two-stream attention network and snippet evidence.
//! - [`objectives`]: top-k aggregation and the three training losses.
//! - [`localization`]: proposals, NMS and mAP@tIoU.
//! - [`harness`]: file formats, synthetic data, training and evaluation.
//! - [`reference`]: brute-force oracles used to cross-check the above.

pub mod error;
pub mod evidential;
pub mod numerics;

pub use error::{Error, FormatError, Result};
pub mod localization;
pub mod model;
pub mod objectives;
pub mod reference;
pub mod harness;
