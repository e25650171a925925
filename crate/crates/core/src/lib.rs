//! Core algorithms for the unipose workspace: pose kinematics, a discrete
//! pose tokenizer, synthetic pose-text corpora, a unified text-pose language
//! model with mixed attention, retrieval models, and the evaluation metric
//! stack. The `harness` module orchestrates the training stages and reports.

pub mod archive;
pub mod error;
pub mod graph;
pub mod rng;

pub use error::{Error, Result};
