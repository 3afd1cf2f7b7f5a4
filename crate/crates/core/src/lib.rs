//! Numerical core for sparse-sensor soil-moisture forecasting.
//!
//! Everything in this crate is pure computation over in-memory data and builds
//! without `std` (an allocator is required). File formats, the synthetic
//! scenario generator and the command-line pipeline live in the `smartcast`
//! crate.
//!
//! - [`timeseries`]: sensor records, daily gap filling, feature scaling and
//!   supervised window slicing with chronological splits.
//! - [`lstm`]: a sequence-to-sequence LSTM (encoder, repeat-vector bridge,
//!   decoder, time-distributed dense head) with backpropagation through time,
//!   Adam and finite-difference gradient checking.
//! - [`vegindex`]: NDVI/NDWI band math and per-pixel index time series.
//! - [`kriging`]: ordinary kriging with a Gaussian variogram, leave-one-out
//!   scoring and per-depth volume stacking.
//! - [`metrics`]: RMSE and MAE.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod kriging;
pub mod linalg;
pub mod lstm;
pub mod metrics;
pub mod timeseries;
pub mod vegindex;

pub use metrics::{mae, rmse, MetricError};

/// Forecast horizon of the soil-moisture model, in days.
pub const SOIL_HORIZON: usize = 14;
