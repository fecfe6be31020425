//! Handwritten mathematical expression recognizer with semantic-graph
//! regularization: a DenseNet-style encoder feeding a coverage-attention
//! GRU decoder, trained jointly with cosine-similarity regression of
//! projected features against symbol co-occurrence probabilities.

pub mod error;
pub mod corpus;
pub mod model;
pub mod semgraph;
pub mod tensor;

pub use error::{Error, Result};
