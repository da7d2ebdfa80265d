//! Epistemic-uncertainty benchmark library.
//!
//! Trains small dense classifiers with several uncertainty methods (MC-dropout,
//! label smoothing, confidence penalty, deep ensembles, conflictual deep
//! ensembles, evidential networks), decomposes their predictive entropy into
//! aleatoric and epistemic parts, and scores how well the epistemic part
//! behaves as the training set grows and as the model shrinks.
//!
//! Module map:
//! - [`nn`]: dense network engine (forward, backprop, SGD, checkpoints).
//! - [`losses`]: training objectives with their logit gradients.
//! - [`methods`]: per-method training and inference, submodel chains.
//! - [`uncertainty`]: entropy / mutual information / variance decompositions.
//! - [`metrics`]: accuracy, Brier, static calibration error, AUROC.
//! - [`principles`]: data ladders, heatmap grids, compliance scoring.
//! - [`oracles`]: closed-form checks (Bayesian linear regression, Dirichlet).
//! - [`data`]: IDX / embedding-CSV loaders, synthetic blobs, normalization.
//! - [`config`]: experiment configuration files and the experiment runner.

pub mod config;
pub mod data;
mod error;
pub mod losses;
pub mod methods;
pub mod metrics;
pub mod nn;
pub mod oracles;
pub mod parallel;
pub mod principles;
pub mod seed;
pub mod special;
pub mod uncertainty;

pub use error::{Error, Result};
