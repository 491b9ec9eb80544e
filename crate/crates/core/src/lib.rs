//! Sequential glaucoma classifier training on fundus photographs.
//!
//! An EfficientNet-B0 backbone with a small sigmoid head is trained phase by
//! phase across datasets (ACRIMA, then ORIGA), with RIM-ONE kept out of
//! training and used only for testing. Modules, in pipeline order:
//!
//! - [`datasets`]: manifests, label adapters, stratified splits, synthetic stand-ins
//! - [`preprocess`]: the minimal and enhanced image pipelines
//! - [`model`]: backbone plus head, checkpoints, weight loading
//! - [`training`]: phase loop, early stopping, held-out audit
//! - [`metrics`]: confusion metrics, ROC and AUC
//! - [`experiments`]: the preprocessing comparison and the generalization study
//! - [`plot`]: deterministic SVG and PNG figures
//! - [`config`] and [`cli`]: the TOML run configuration and the command line
//!
//! Every capability has a runnable program under `examples/`.

pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};
