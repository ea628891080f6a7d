//! North Atlantic-European winter weather-regime forecasting: gridded data
//! handling, EOF/k-means regime labeling, teleconnection-stratified splits,
//! deformable-CNN training with transfer learning, Bayesian hyperparameter
//! search, forecast verification and integrated-gradients attribution.

pub mod calendar;
pub mod error;
pub mod gridio;
pub mod hpo;
pub mod interpret;

pub use error::{CoreError, Result};
pub mod labeler;
pub mod metrics;
pub mod seeds;
pub mod splitter;
pub mod synthlab;
pub mod trainer;
