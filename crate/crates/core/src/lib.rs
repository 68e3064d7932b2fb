//! Few-shot prototype segmentation with geometry-aware prototype enrichment.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod gape;
pub mod geometry;
pub mod matcher;
pub mod metrics;
pub mod numerics;
pub mod osb;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
