//! Counting network assembly, configuration and weight files.

mod config;
mod params;
mod sacanet;

pub use config::{ChannelScale, ModelConfig};
pub use params::ModelParameters;
pub use sacanet::{
    channel_shuffle, predict_count, AttentionOutput, BoundParams, LoadMode, SacaModel, INPUT_MULTIPLE,
    OUTPUT_STRIDE, PYRAMID_FACTOR,
};
