//! Desk-scale visually-aware conversational recommender.
//!
//! The pipeline compresses each product image into 5 projected CLS embeddings
//! by self-distillation against descriptions the model itself generated from
//! the full patch-token encoding, then tunes the language-model side to pick
//! the ground-truth item ID out of a 10-candidate slate built by retrieval.

pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod lm;
pub mod model;
pub mod recommend;
pub mod retrieval;
pub mod tensor;
pub mod vision;
pub mod vocab;

pub use error::{Error, Result};
