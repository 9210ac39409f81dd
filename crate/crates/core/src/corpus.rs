//! Documents, tokenization and few-shot sampling.
//!
//! Corpus files are JSON Lines, one document per line:
//!
//! ```text
//! {"id": "doc-1", "text": "raw text", "labels": ["Top", "Mid", "Leaf"]}
//! ```
//!
//! `labels` lists the level-1..C names of the document's path. `id` is
//! optional; missing ids become `line-<n>`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::taxonomy::{LabelPath, Taxonomy};

/// Number of hash buckets the tokenizer maps into.
pub const VOCAB_SIZE: usize = 1 << 15;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: document `{id}` has empty text")]
    EmptyText { line: usize, id: String },
    #[error("line {line}: {source}")]
    Label {
        line: usize,
        #[source]
        source: crate::taxonomy::TaxonomyError,
    },
    #[error("line {line}: duplicate document id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("corpus is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub gold: LabelPath,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold: LabelPath) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { id: id.into(), text, tokens, gold }
    }
}

/// Line format of corpus, gold and prediction files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub text: String,
    pub labels: Vec<String>,
}

/// Bucket of a single (already lowercased) token: 64-bit FNV-1a, xor-folded
/// to 32 bits and then to 15 bits.
pub fn token_bucket(token: &str) -> u32 {
    let h = token
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME));
    let h32 = ((h >> 32) ^ (h & 0xffff_ffff)) as u32;
    (h32 ^ (h32 >> 15) ^ (h32 >> 30)) & (VOCAB_SIZE as u32 - 1)
}

/// Lowercased words: maximal runs of alphanumeric characters. Whitespace and
/// punctuation only separate.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

pub fn tokenize(text: &str) -> Vec<u32> {
    words(text).map(|w| token_bucket(&w)).collect()
}

/// Parse a JSON Lines corpus against `taxonomy`.
pub fn parse_corpus(source: &str, taxonomy: &Taxonomy) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| CorpusError::Malformed { line: line_no, reason: e.to_string() })?;
        let id = rec.id.unwrap_or_else(|| format!("line-{line_no}"));
        if !ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line: line_no, id });
        }
        let gold = taxonomy
            .resolve_names(&rec.labels)
            .map_err(|source| CorpusError::Label { line: line_no, source })?;
        let doc = Document::new(id, rec.text, gold);
        if doc.tokens.is_empty() {
            return Err(CorpusError::EmptyText { line: line_no, id: doc.id });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn load_corpus(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> crate::Result<Vec<Document>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(parse_corpus(&text, taxonomy)?)
}

pub fn to_record(doc: &Document, taxonomy: &Taxonomy) -> CorpusRecord {
    CorpusRecord { id: Some(doc.id.clone()), text: doc.text.clone(), labels: taxonomy.path_names(&doc.gold) }
}

/// Serialize documents back to JSON Lines.
pub fn write_corpus(docs: &[Document], taxonomy: &Taxonomy) -> String {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(&to_record(doc, taxonomy)).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Balanced,
    Imbalanced,
}

impl std::str::FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "imbalanced" => Ok(Self::Imbalanced),
            other => Err(format!("unknown sampling mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotConfig {
    /// Shots per label path.
    pub q: usize,
    pub seed: u64,
    pub mode: SamplingMode,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self { q: 1, seed: 171, mode: SamplingMode::Balanced }
    }
}

/// Group document indices by full label path, keeping first-seen order of
/// paths and corpus order within each group.
fn group_by_path(corpus: &[Document]) -> Vec<Vec<usize>> {
    let mut order: Vec<&LabelPath> = Vec::new();
    let mut groups: BTreeMap<&LabelPath, Vec<usize>> = BTreeMap::new();
    for (i, doc) in corpus.iter().enumerate() {
        groups
            .entry(&doc.gold)
            .or_insert_with(|| {
                order.push(&doc.gold);
                Vec::new()
            })
            .push(i);
    }
    order.into_iter().map(|p| groups.remove(p).expect("grouped")).collect()
}

fn take(corpus: &[Document], group: &[usize], amount: usize, rng: &mut rng::SeededRng) -> Vec<Document> {
    if group.len() <= amount {
        return group.iter().map(|&i| corpus[i].clone()).collect();
    }
    let mut picked: Vec<usize> = rng::sample_indices(rng, group.len(), amount)
        .into_iter()
        .map(|k| group[k])
        .collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| corpus[i].clone()).collect()
}

/// Q-shot sampling: every label path keeps all of its documents when it has
/// at most Q, otherwise a uniform sample of exactly Q.
pub fn sample_few_shot(corpus: &[Document], cfg: &FewShotConfig) -> Result<Vec<Document>, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut rng = rng::derive(cfg.seed, "few-shot");
    Ok(group_by_path(corpus)
        .iter()
        .flat_map(|g| take(corpus, g, cfg.q, &mut rng))
        .collect())
}

/// Imbalanced variant: per path, draw `n ~ U{0..=min(count, Q)}` and sample
/// `n` documents.
pub fn sample_imbalanced(corpus: &[Document], cfg: &FewShotConfig) -> Result<Vec<Document>, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut rng = rng::derive(cfg.seed, "few-shot-imbalanced");
    Ok(group_by_path(corpus)
        .iter()
        .flat_map(|g| {
            let n = rng.random_range(0..=g.len().min(cfg.q));
            take(corpus, g, n, &mut rng)
        })
        .collect())
}

/// Dispatch on `cfg.mode`.
pub fn sample(corpus: &[Document], cfg: &FewShotConfig) -> Result<Vec<Document>, CorpusError> {
    match cfg.mode {
        SamplingMode::Balanced => sample_few_shot(corpus, cfg),
        SamplingMode::Imbalanced => sample_imbalanced(corpus, cfg),
    }
}
