//! Shared-weight siamese candidate scoring for commonsense validation
//! (pick the nonsensical sentence of a pair) and explanation selection
//! (pick the reason a statement is wrong), plus the binary-classifier
//! baseline, on a small from-scratch transformer encoder.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod model;
pub mod params;
pub mod report;
pub mod selfcheck;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
