//! Online action detection and forecasting on skeleton streams with a
//! joint classification-regression LSTM.
//!
//! [`pipeline`] is the quickest way in: it generates data, trains both
//! stages, runs the frame-by-frame [`inference::Detector`] and scores the
//! result with [`evaluation`].

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod network;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod targets;
pub mod training;

pub use error::{Error, Result};
