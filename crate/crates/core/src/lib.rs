//! Forecasting city traffic encoded as a movie of aggregated grid cells.
//!
//! A day of traffic for one city is a `(bins, height, width, 3)` byte tensor
//! holding speed, volume and dominant heading per cell and 5-minute bin. The
//! crate covers the whole path from raw probe points to three-step-ahead
//! predictions:
//!
//! * [`grid_codec`]: probe rasterization, channel encodings, movie container.
//! * [`synth_world`]: synthetic cities, traffic days and weather tables.
//! * [`sampler`]: training windows, epoch shuffling, concurrent batch assembly.
//! * [`exogenous`]: time, weekday and weather feature vectors.
//! * [`nn`]: a small reverse-mode autodiff engine over `f64` tensors.
//! * [`model`]: the recurrent autoencoder family and ConvLSTM baselines.
//! * [`objectives`]: dual-space loss, heading cross-entropy, metrics.
//! * [`train`]: training loop, checkpoints, challenge evaluation, reports.
//! * [`config`]: the run configuration document used by the CLI.
//! * [`cli`]: the `gen-data`, `train`, `eval` and `report` commands.

pub mod cli;
pub mod config;
pub mod error;
pub mod exogenous;
pub mod grid_codec;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod sampler;
pub mod synth_world;
pub mod train;

pub use error::{Error, Result};
