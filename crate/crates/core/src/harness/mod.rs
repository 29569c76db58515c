//! Everything around the math: file formats, manifests, synthetic data,
//! configuration, training, inference and the gradient check.

pub mod config;
pub mod formats;
pub mod fuse;
pub mod gradcheck;
pub mod manifest;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use config::{RunConfig, SynthConfig};
pub use manifest::{LoadedVideo, Manifest, VideoRecord};
