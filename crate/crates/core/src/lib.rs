//! Contrastive alignment of document images, class prompts and document
//! content for zero-shot document classification.

pub mod autograd;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod image;
pub mod infer;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod splits;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
