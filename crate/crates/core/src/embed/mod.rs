//! Per-architecture instruction embeddings.

mod matrix;
mod sgns;

pub use matrix::{cosine, EmbeddingMatrix};
pub use sgns::{keep_probability, train_sgns, train_sgns_with_report, SgnsConfig, SgnsReport};
