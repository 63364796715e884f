//! Specializing a dense retriever to a corpus: passage de-duplication,
//! synthetic-query filtering, hard-negative mining with teacher de-noising,
//! teacher score normalization, listwise distillation plus contrastive
//! training of an embedding adapter, and TREC-style evaluation.

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod loss;
pub mod negatives;
pub mod querygen;
pub mod rng;
pub mod synthetic;
pub mod teacher;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
