//! Event detection by fusing passively collected GPS traces with
//! before/after satellite rasters.

pub mod format;
pub mod geo;
pub mod trace;
pub mod metrics;
pub mod anomaly;
pub mod imagery;
pub mod raster;
pub mod fusion;
pub mod config;
pub mod pipeline;
pub mod fixture;
