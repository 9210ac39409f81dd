//! Retrieval-style in-context learning for few-shot hierarchical text
//! classification.
//!
//! The pipeline:
//!
//! 1. [`taxonomy`] loads the label tree and renders label texts.
//! 2. [`corpus`] tokenizes documents and draws Q-shot training sets.
//! 3. [`indexer`] trains a small encoder that maps a text to one index vector
//!    per hierarchy level (masked-token, per-level classification and
//!    contrastive objectives).
//! 4. [`retrieval`] stores the training set's index vectors and answers
//!    level-weighted, label-diverse Top-K queries.
//! 5. [`inference`] asks an LLM for one level at a time, with candidate labels
//!    pruned to the children of the current label that the retrieved
//!    demonstrations carry.
//! 6. [`evaluation`] scores predictions with micro/macro F1.

pub mod corpus;
pub mod evaluation;
pub mod indexer;
pub mod inference;
pub mod retrieval;
pub mod rng;
pub mod synthetic;
pub mod taxonomy;

use std::path::{Path, PathBuf};

pub use corpus::{Document, FewShotConfig, SamplingMode};
pub use indexer::{EncoderOutput, EncoderParams, TrainConfig};
pub use inference::{InferenceConfig, InferenceTrace};
pub use retrieval::{IndexedInstance, RetrievalDatabase};
pub use taxonomy::{LabelPath, LabelTextMode, NodeId, Taxonomy};

/// Top-level error for callers that drive the whole pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Taxonomy(#[from] taxonomy::TaxonomyError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Indexer(#[from] indexer::IndexerError),
    #[error(transparent)]
    Retrieval(#[from] retrieval::RetrievalError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error(transparent)]
    Evaluation(#[from] evaluation::EvalError),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Lowercase hex of the SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
