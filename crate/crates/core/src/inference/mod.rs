//! Layer-by-layer classification with retrieved demonstrations.

mod classify;
mod describe;
pub mod llm;
pub mod policy;
pub mod prompt;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classify::{classify_many, classify_retrieval_only, Classifier, InferenceTrace, LevelTrace, TraceMode};
pub use describe::{describe_leaves, generate_label_description};
pub use llm::{client_from_selector, LlmClient, LlmError};
pub use prompt::PromptTemplate;

use crate::indexer::IndexerError;
use crate::retrieval::{DiversityKey, RetrievalError};
use crate::taxonomy::{LabelPath, TaxonomyError};

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Indexer(#[from] IndexerError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no text stored for demonstration `{0}`")]
    MissingDemoText(String),
    #[error("`{0}` is a leaf and has no candidate children")]
    LeafCurrent(String),
    #[error("invalid inference config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// The overall most similar instance's label, then its remaining path.
    #[default]
    Global,
    /// The best demonstration under the current label first.
    Consistent,
}

impl std::str::FromStr for FallbackPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Self::Global),
            "consistent" => Ok(Self::Consistent),
            _ => Err(format!("unknown fallback policy `{s}` (global, consistent)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub k: usize,
    /// Client selector, see [`client_from_selector`].
    pub llm: String,
    pub temperature: f64,
    /// Predict level by level; off asks once over whole paths.
    pub iterative: bool,
    /// Show retrieved demonstrations in prompts.
    pub demos: bool,
    /// Restrict candidates to the labels the demonstrations carry.
    pub pruning: bool,
    /// Offer a candidate set; off asks the LLM to pick the closest demonstration.
    pub candidate_set: bool,
    pub fallback: FallbackPolicy,
    /// Retrieve again below each predicted label instead of reusing one set.
    pub per_level_retrieval: bool,
    pub diversity: DiversityKey,
    pub max_in_flight: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k: 3,
            llm: "stub:oracle-demo".into(),
            temperature: llm::DEFAULT_TEMPERATURE,
            iterative: true,
            demos: true,
            pruning: true,
            candidate_set: true,
            fallback: FallbackPolicy::Global,
            per_level_retrieval: false,
            diversity: DiversityKey::FullPath,
            max_in_flight: 4,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.k == 0 {
            return Err(InferenceError::Config("k must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(InferenceError::Config(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        if self.max_in_flight == 0 {
            return Err(InferenceError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// A retrieved, labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub doc_id: String,
    pub text: String,
    pub path: LabelPath,
    pub score: f64,
}

/// Texts of the indexed documents keyed by id; the database keeps only vectors.
pub type TextStore = HashMap<String, String>;

pub fn text_store(docs: &[crate::corpus::Document]) -> TextStore {
    docs.iter().map(|d| (d.id.clone(), d.text.clone())).collect()
}
