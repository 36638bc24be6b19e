//! Hierarchical similarity learning for language-based product image retrieval.
//!
//! The crate trains a dual-branch network that encodes detected object
//! features and query tokens through stacked per-level encoders, scores every
//! level at object and image granularity, combines the scores with per-level
//! weights, and ranks candidate images for each query. Everything runs on a
//! small self-contained f64 autodiff engine so gradients can be verified
//! against finite differences.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod params;
pub mod similarity;
pub mod tensor;
pub mod training;

pub use error::{HslError, Result};
