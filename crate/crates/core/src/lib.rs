//! Character-CTC speech recognition toolkit: synthetic corpora, n-gram LMs,
//! WFST decoding, acoustic models, k-means pretraining targets and self-training.

pub mod am;
pub mod cli;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod ngram;
pub mod pipeline;
pub mod score;
pub mod sst;
pub mod unsup;
pub mod wfst;

pub use error::{Error, Result};
