//! File formats, the synthetic scenario generator and the end-to-end
//! forecasting pipeline built on [`smartcast_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod io;
pub mod pipeline;
pub mod raster;
pub mod synth;

pub use smartcast_core as core;
