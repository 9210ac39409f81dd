//! The index encoder: per-level index vectors and their multi-task trainer.

mod contrastive;
mod encoder;
pub mod gradcheck;
mod losses;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use contrastive::{
    bag_cosine, build_desc_similarity, select_contrastive_group, ContrastiveGroup, ContrastiveSampler,
    DescriptionSimilarity, GroupMember, MemberSource, HARD_NEGATIVES, RANDOM_NEGATIVES, TOP_SIMILAR_LABELS,
};
pub use encoder::{backward, encode, EncoderOutput};
pub use losses::{
    accumulate_cls, accumulate_dcl, accumulate_mlm, choose_mask, cls_loss, contrastive_objective, dcl_loss, mlm_loss,
    total_loss, total_loss_masked, LossGrad, LossParts,
};
pub use params::{EncoderParams, LevelParams, PARAMS_MAGIC, PARAMS_VERSION};
pub use train::{level_targets, train_from, train_indexer, Adam, TrainOutcome};

use crate::taxonomy::{LabelTextMode, TaxonomyError};

#[derive(Debug, Error, PartialEq)]
pub enum IndexerError {
    #[error("cannot encode an empty token list")]
    EmptyInput,
    #[error("token {token} outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("masked-token loss needs at least 2 tokens, got {0}")]
    TooShortForMasking(usize),
    #[error("level mismatch: {0}")]
    LevelMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero-norm index vector for {member} at level {level}")]
    ZeroNorm { member: String, level: usize },
    #[error("no negatives available: the taxonomy has a single leaf")]
    NoNegatives,
    #[error("training set is empty")]
    EmptyTrainset,
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("params file: bad magic")]
    BadMagic,
    #[error("params file: unsupported version {0}")]
    Version(u16),
    #[error("params file: truncated")]
    Truncated,
    #[error("params file: checksum mismatch")]
    Checksum,
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Weight of the per-level classification loss.
    pub alpha: f64,
    /// Weight of the contrastive loss.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub mask_rate: f64,
    pub seed: u64,
    /// Index vector width.
    pub dim: usize,
    /// Add the positive term to the contrastive denominator (InfoNCE).
    pub infonce_denominator: bool,
    /// Which label text stands in for descriptions in contrastive groups.
    pub label_text: LabelTextMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            epochs: 20,
            alpha: 1.0,
            beta: 0.01,
            tau: 0.1,
            mask_rate: 0.15,
            seed: 171,
            dim: 64,
            infonce_denominator: false,
            label_text: LabelTextMode::PathText,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), IndexerError> {
        let bad = |m: String| Err(IndexerError::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bad(format!("alpha and beta must be non-negative, got {} and {}", self.alpha, self.beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask rate must be in [0, 1], got {}", self.mask_rate));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta), (1.0, 0.01));
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.epochs, 20);
        assert_eq!(c.mask_rate, 0.15);
        assert!(c.validate().is_ok());
    }
}
