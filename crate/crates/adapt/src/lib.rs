//! Multi-agent trajectory prediction.
//!
//! The library covers the full pipeline: scene representation and reference
//! frames ([`scene`]), a deterministic scenario generator ([`synth`]), the
//! polyline/attention encoder ([`encoder`]), the endpoint-conditioned decoder
//! ([`decoder`]), model assembly and parameter handling ([`model`],
//! [`params`], [`checkpoint`]), training with its losses, optimiser, metrics
//! and augmentation ([`train`]), and latency benchmarking ([`bench`]).

pub mod bench;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod model;
pub mod params;
pub mod scene;
pub mod synth;
pub mod train;
