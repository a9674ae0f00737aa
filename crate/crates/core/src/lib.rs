//! Counterfactual local explanations for black-box tabular classifiers.

pub mod batch;
pub mod cf_search;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod explain;
pub mod lime;
pub mod models;
pub mod neighbourhood;
pub mod project;
pub mod service;
pub mod surrogate;
pub mod synthgen;

pub use error::{Error, Result};
