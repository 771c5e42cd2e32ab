//! Deterministic closed-loop simulation of small-UAS traffic with
//! detect-and-avoid in a hexagonal cell airspace.

pub mod batch;
pub mod daa;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod mission;
pub mod scenario;

pub use error::{Error, Result};
