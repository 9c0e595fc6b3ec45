//! Instance-level scoring from bag-level (response-level) labels.
//!
//! A bag is an ordered set of instances (for example the sentences of one
//! model response) that carries a single aggregate label. This crate trains a
//! per-instance scorer from those aggregate labels:
//!
//! - [`aggregation`]: exact and differentiable MIN / MAX / AVG over instance scores.
//! - [`priors`]: per-instance and pairwise soft labels from embeddings or external scores.
//! - [`model`]: a small MLP scorer with hand-written backpropagation.
//! - [`losses`]: bag, prior, preference and supervised loss terms and their weighted sum.
//! - [`training`]: seeded minibatch training for every supervision mode.
//! - [`pseudolabel`]: max-likelihood bag-consistent instance labels for retraining.
//! - [`metrics`]: AUC-ROC, AUC-PR, threshold, regression and preference metrics.
//! - [`data`]: the dataset model, the line-delimited file format and a synthetic generator.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod priors;
pub mod pseudolabel;
pub mod training;

pub use aggregation::{AggConfig, Approx};
pub use data::{AggKind, Bag, Dataset, Instance, LabelKind, PreferencePair};
pub use error::{Error, Result};
pub use losses::LossWeights;
pub use model::{Head, ScorerModel};
pub use training::{TrainConfig, TrainMode};

/// Lower/upper clamp applied to probabilities before logs and odds ratios.
pub const PROB_EPS: f64 = 1e-6;
