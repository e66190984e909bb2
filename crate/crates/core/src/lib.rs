//! Few-shot classification heads that score visual features against class
//! word embeddings, optionally refined by a self-attention relation graph.

pub mod diffmath;
pub mod error;
pub mod util;

pub use error::{Error, Result};
pub mod embeddings;
pub mod relation;
pub mod data;
pub mod head;
pub mod training;
pub mod evaluation;
pub mod synthgen;
pub mod config;
pub mod pipeline;
pub mod wordnet;
pub mod cli;
