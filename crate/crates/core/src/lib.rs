//! Political-inference text classification pipeline.
//!
//! Fuses three text representations in a convolutional classifier: contextual
//! token embeddings, TF-IDF weighted syntactic bigrams from dependency
//! graphs, and psycholinguistic lexicon profiles. Ships with the corpus
//! construction, feature selection, training and evaluation machinery needed
//! to run text- and author-level experiments end to end.

pub mod corpus;
pub mod embed;
pub mod eval;
pub mod error;
pub mod pipeline;
pub mod preprocess;
pub mod psych;
pub mod rng;
pub mod model;
pub mod selection;
pub mod sngram;
pub mod tfidf;

pub use error::{Error, ErrorCategory, Result};
