//! Building condition estimation from facade photographs.
//!
//! The pipeline goes image -> patches -> descriptors -> per-image clustering
//! and filtering -> patch-level softmax classification -> building-level
//! aggregation, and finally feeds the predicted condition classes into a
//! hedonic value regression. Every stage is deterministic for a given seed.
//!
//! Module map:
//!
//! - [`imaging`]: grayscale loading, gradients, the dense multi-scale grid
//! - [`descriptor`]: 128-dimensional orientation-histogram patch descriptors
//! - [`selection`]: per-image k-means, contrast and relevance filtering
//! - [`classifier`]: softmax regression over patches, augmentation, model io
//! - [`aggregation`]: majority-vote and mean-likelihood building verdicts
//! - [`dataset`]: manifest records, category-to-class mapping, splits
//! - [`evaluation`]: confusion matrices, accuracy, exemplar ranking
//! - [`regression`]: ordinary least squares for the retained-value model
//! - [`config`]: pipeline configuration file and provenance hashing
//! - [`synth`]: seeded synthetic facades for end-to-end runs

pub mod aggregation;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod regression;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
