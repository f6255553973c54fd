//! Deformable head-model fitting to 2D facial landmarks, action-unit emotion
//! features, and the classifiers and metrics used to compare them.

pub mod classify;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod features;
pub mod fitting;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
