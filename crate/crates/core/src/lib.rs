//! Crowd counting toolkit: a scale-adaptive self-attention counting network
//! on a small reverse-mode autodiff engine, ground-truth density generation,
//! annotation ingest, crowd statistics and count evaluation.

pub mod autodiff;
pub mod density;
pub mod error;
pub mod fsutil;
pub mod ingest;
pub mod model;
pub mod stats;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
