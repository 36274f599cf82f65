//! Metrics, file formats, synthetic sweeps and the replay pipeline.

pub mod compare;
pub mod export;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod sweep;
