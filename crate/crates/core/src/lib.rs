//! Event-aware multimodal misinformation detection over timestamped posts.

pub mod cli;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod synth;
pub mod tape;
pub mod trainer;
pub mod trend;
pub mod verify;
pub mod windowing;

pub use error::{Error, Result};
