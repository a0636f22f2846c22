//! Clustered embedding learning for recommender data: joint training of
//! entity embeddings and a top-down item clustering, with an online
//! variant, personalization, and evaluation utilities.

pub mod cluster;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod matrix;
pub mod model;
pub mod trainer;

pub use error::{CelError, Result};
pub use matrix::Mat;
