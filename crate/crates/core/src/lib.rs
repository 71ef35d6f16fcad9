//! Abstraction of multi-vehicle driving recordings into lane-coordinate
//! action timelines and degree-5 polynomial models, with scenario pattern
//! detection, a compact uplink payload, parameter statistics and an
//! OpenSCENARIO-flavoured export.

pub mod error;
pub mod ingest;
pub mod lane_frame;
pub mod patterns;
pub mod payload;
pub mod quantfit;
pub mod segmentation;
pub mod statistics;
pub mod synthgen;
pub mod xosc;

pub use error::{Error, Result};
