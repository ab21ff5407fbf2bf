//! Cross-architecture basic-block similarity and code-component containment.
//!
//! The pipeline normalizes assembly ([`corpus`]), learns instruction
//! embeddings per architecture ([`embed`]), builds labeled block pairs
//! ([`pairgen`]) to train a two-tower recurrent block encoder ([`encoder`]),
//! indexes block embeddings for nearest-neighbor search ([`lsh`]) and scores
//! whether a query component appears inside a target graph ([`matcher`]).
//! [`eval`] computes ROC curves and AUC, and [`synth`] generates paired
//! corpora and planted components for experiments.

pub mod corpus;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lsh;
pub mod matcher;
pub mod pairgen;
pub mod synth;

pub use error::{Error, Result};

// The guide's code blocks run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/normalization.md")]
    mod normalization {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/pairs.md")]
    mod pairs {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/lsh.md")]
    mod lsh {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
