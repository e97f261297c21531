//! Training data attribution for hallucinations in a toy entity-swap
//! summarization task: denoised, debiased and contrastive influence scores
//! next to raw influence, TracIN, TRAK and BM25 baselines.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod influence;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
