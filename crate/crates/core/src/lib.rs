//! Multi-model LSTM track association for AIS vessel observations.
//!
//! Each vessel gets its own stacked-LSTM next-position predictor trained on
//! its resampled history. Unlabelled observations are assigned to the vessel
//! whose predicted position is nearest in great-circle distance.

pub mod associator;
pub mod error;
pub mod evaluator;
pub mod fleet;
pub mod ingest;
pub mod lstm;
pub mod pipeline;
pub mod preprocess;
pub mod synthgen;

pub use error::{Error, Result};
