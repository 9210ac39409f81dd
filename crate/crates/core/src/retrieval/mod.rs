//! The retrieval database of per-level index vectors.
//!
//! Similarity between two texts is a weighted sum of per-level cosines with
//! weight `2^(j-1) / (2^C - 1)` for level j, so deeper levels count more and
//! the weights sum to one. Search is an exhaustive scan that keeps at most
//! one instance per label path.

mod io;

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{DB_MAGIC, DB_VERSION};

use crate::corpus::Document;
use crate::indexer::{encode, EncoderParams, IndexerError};
use crate::taxonomy::{LabelPath, Taxonomy};

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("zero-norm index vector at level {level}")]
    ZeroNorm { level: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("database is empty")]
    EmptyDatabase,
    #[error("training set is empty")]
    EmptyTrainset,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("database depth {db} does not match taxonomy depth {taxonomy}")]
    DepthMismatch { db: usize, taxonomy: usize },
    #[error("encoder fingerprint mismatch: database {db}, params {params}")]
    FingerprintMismatch { db: String, params: String },
    #[error("database file: bad magic")]
    BadMagic,
    #[error("database file: unsupported version {0}")]
    Version(u16),
    #[error("database file: truncated")]
    Truncated,
    #[error("database file: checksum mismatch")]
    Checksum,
    #[error("database file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Indexer(#[from] IndexerError),
    #[error(transparent)]
    Taxonomy(#[from] crate::taxonomy::TaxonomyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedInstance {
    pub doc_id: String,
    /// One vector per level, level 1 first.
    pub vectors: Vec<Vec<f32>>,
    pub path: LabelPath,
    pub ordinal: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityKey {
    /// Distinct full label paths.
    #[default]
    FullPath,
    /// Distinct leaf names (collapses same-named leaves under different parents).
    LeafName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FingerprintPolicy {
    Warn,
    #[default]
    Fail,
}

/// Weight of 1-based `level` among `depth` levels as an exact ratio.
pub fn level_weight_ratio(level: usize, depth: usize) -> (u64, u64) {
    assert!(level >= 1 && level <= depth && depth <= 63, "level {level} of {depth}");
    (1u64 << (level - 1), (1u64 << depth) - 1)
}

pub fn level_weight(level: usize, depth: usize) -> f64 {
    let (num, den) = level_weight_ratio(level, depth);
    num as f64 / den as f64
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Level-weighted cosine similarity of two sets of index vectors.
pub fn similarity(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(RetrievalError::Shape(format!("{} vs {} levels", a.len(), b.len())));
    }
    let depth = a.len();
    let mut sim = 0.0;
    for (j, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(RetrievalError::Shape(format!("width {} vs {} at level {}", x.len(), y.len(), j + 1)));
        }
        let cos = cosine(x, y).ok_or(RetrievalError::ZeroNorm { level: j + 1 })?;
        sim += level_weight(j + 1, depth) * cos;
    }
    Ok(sim.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit<'a> {
    pub instance: &'a IndexedInstance,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDatabase {
    pub depth: usize,
    pub dim: usize,
    /// Fingerprint of the params the vectors were encoded with.
    pub encoder_fingerprint: String,
    pub instances: Vec<IndexedInstance>,
}

impl RetrievalDatabase {
    pub fn empty(depth: usize, dim: usize, encoder_fingerprint: impl Into<String>) -> Self {
        Self { depth, dim, encoder_fingerprint: encoder_fingerprint.into(), instances: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<(), RetrievalError> {
        if self.depth != taxonomy.depth() {
            return Err(RetrievalError::DepthMismatch { db: self.depth, taxonomy: taxonomy.depth() });
        }
        for inst in &self.instances {
            taxonomy.validate_path(&inst.path)?;
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, params: &EncoderParams, policy: FingerprintPolicy) -> Result<(), RetrievalError> {
        let fp = params.fingerprint();
        if fp == self.encoder_fingerprint {
            return Ok(());
        }
        match policy {
            FingerprintPolicy::Warn => {
                warn!("database was built with encoder {}, querying with {}", self.encoder_fingerprint, fp);
                Ok(())
            }
            FingerprintPolicy::Fail => {
                Err(RetrievalError::FingerprintMismatch { db: self.encoder_fingerprint.clone(), params: fp })
            }
        }
    }

    fn check_query(&self, query: &[Vec<f32>]) -> Result<(), RetrievalError> {
        if query.len() != self.depth || query.iter().any(|v| v.len() != self.dim) {
            return Err(RetrievalError::Shape(format!(
                "query of {} levels for a database of depth {} and width {}",
                query.len(),
                self.depth,
                self.dim
            )));
        }
        Ok(())
    }

    /// Every instance with its score, in insertion order.
    pub fn score_all(&self, query: &[Vec<f32>]) -> Result<Vec<Hit<'_>>, RetrievalError> {
        self.check_query(query)?;
        self.instances
            .iter()
            .map(|inst| Ok(Hit { instance: inst, score: similarity(query, &inst.vectors)? }))
            .collect()
    }

    /// Top-`k` instances with pairwise-distinct labels, best first; equal
    /// scores go to the earlier insertion.
    pub fn search_topk_diverse(
        &self,
        query: &[Vec<f32>],
        k: usize,
        key: DiversityKey,
        taxonomy: Option<&Taxonomy>,
    ) -> Result<Vec<Hit<'_>>, RetrievalError> {
        self.search_topk_diverse_where(query, k, key, taxonomy, |_| true)
    }

    /// As [`Self::search_topk_diverse`], over the instances `keep` accepts.
    pub fn search_topk_diverse_where(
        &self,
        query: &[Vec<f32>],
        k: usize,
        key: DiversityKey,
        taxonomy: Option<&Taxonomy>,
        keep: impl Fn(&IndexedInstance) -> bool,
    ) -> Result<Vec<Hit<'_>>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyDatabase);
        }
        // Best hit per label, then rank the winners.
        let mut best: HashMap<DiversityLabel, Hit<'_>> = HashMap::new();
        for hit in self.score_all(query)?.into_iter().filter(|h| keep(h.instance)) {
            let label = diversity_label(&hit.instance.path, key, taxonomy);
            best.entry(label)
                .and_modify(|cur| {
                    if hit.score > cur.score {
                        *cur = hit;
                    }
                })
                .or_insert(hit);
        }
        let mut winners: Vec<Hit<'_>> = best.into_values().collect();
        winners.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.instance.ordinal.cmp(&b.instance.ordinal)));
        winners.truncate(k);
        Ok(winners)
    }

    /// The single most similar instance (ties to the earliest insertion).
    pub fn top1(&self, query: &[Vec<f32>]) -> Result<Hit<'_>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyDatabase);
        }
        let hits = self.score_all(query)?;
        let mut best = hits[0];
        for h in &hits[1..] {
            if h.score > best.score {
                best = *h;
            }
        }
        Ok(best)
    }

    /// Append already-encoded vectors with the next ordinal.
    pub fn push(&mut self, doc_id: String, vectors: Vec<Vec<f32>>, path: LabelPath) -> Result<u64, RetrievalError> {
        self.check_query(&vectors)?;
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(RetrievalError::Shape("non-finite index vector".into()));
        }
        let ordinal = self.instances.last().map_or(0, |i| i.ordinal + 1);
        self.instances.push(IndexedInstance { doc_id, vectors, path, ordinal });
        Ok(ordinal)
    }

    /// Encode `doc` and append it; params must match the database's encoder.
    pub fn append_instance(&self, doc: &Document, params: &EncoderParams) -> Result<Self, RetrievalError> {
        self.check_fingerprint(params, FingerprintPolicy::Fail)?;
        let mut next = self.clone();
        let vectors = encode(&doc.tokens, params)?.index_f32();
        next.push(doc.id.clone(), vectors, doc.gold.clone())?;
        Ok(next)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        io::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        io::from_bytes(bytes)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> crate::Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Load and check against the taxonomy it will be queried with.
    pub fn load_for(path: impl AsRef<std::path::Path>, taxonomy: &Taxonomy) -> crate::Result<Self> {
        let db = Self::load(path)?;
        db.check_taxonomy(taxonomy)?;
        Ok(db)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum DiversityLabel {
    Path(LabelPath),
    Leaf(String),
}

fn diversity_label(path: &LabelPath, key: DiversityKey, taxonomy: Option<&Taxonomy>) -> DiversityLabel {
    match (key, taxonomy) {
        (DiversityKey::LeafName, Some(t)) => DiversityLabel::Leaf(t.name(path.leaf()).to_string()),
        _ => DiversityLabel::Path(path.clone()),
    }
}

/// Encode every training document into a fresh database.
pub fn build_database(
    trainset: &[Document],
    params: &EncoderParams,
    taxonomy: &Taxonomy,
) -> Result<RetrievalDatabase, RetrievalError> {
    if trainset.is_empty() {
        return Err(RetrievalError::EmptyTrainset);
    }
    if params.depth() != taxonomy.depth() {
        return Err(RetrievalError::DepthMismatch { db: params.depth(), taxonomy: taxonomy.depth() });
    }
    let mut db = RetrievalDatabase::empty(taxonomy.depth(), params.dim, params.fingerprint());
    for doc in trainset {
        taxonomy.validate_path(&doc.gold)?;
        let vectors = encode(&doc.tokens, params)?.index_f32();
        db.push(doc.id.clone(), vectors, doc.gold.clone())?;
    }
    Ok(db)
}

/// An atomically swappable database snapshot. Readers clone the `Arc` and
/// never see a partially applied append.
#[derive(Debug, Clone)]
pub struct SharedDatabase {
    inner: Arc<RwLock<Arc<RetrievalDatabase>>>,
}

impl SharedDatabase {
    pub fn new(db: RetrievalDatabase) -> Self {
        Self { inner: Arc::new(RwLock::new(Arc::new(db))) }
    }

    pub fn snapshot(&self) -> Arc<RetrievalDatabase> {
        self.inner.read().expect("snapshot lock poisoned").clone()
    }

    pub fn replace(&self, db: RetrievalDatabase) {
        *self.inner.write().expect("snapshot lock poisoned") = Arc::new(db);
    }

    /// Build the next snapshot from the current one and swap it in.
    pub fn update<E>(&self, f: impl FnOnce(&RetrievalDatabase) -> Result<RetrievalDatabase, E>) -> Result<(), E> {
        let mut guard = self.inner.write().expect("snapshot lock poisoned");
        let next = f(&guard)?;
        *guard = Arc::new(next);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::NodeId;

    fn v(xs: &[&[f32]]) -> Vec<Vec<f32>> {
        xs.iter().map(|x| x.to_vec()).collect()
    }

    fn path(ids: &[u32]) -> LabelPath {
        LabelPath(ids.iter().map(|&i| NodeId(i)).collect())
    }

    #[test]
    fn weights() {
        for depth in 1..=8 {
            let (sum, den) = (1..=depth).fold((0u64, 0u64), |(s, _), j| {
                let (n, d) = level_weight_ratio(j, depth);
                (s + n, d)
            });
            assert_eq!(sum, den, "depth {depth}");
            for j in 1..depth {
                assert_eq!(level_weight_ratio(j + 1, depth).0, 2 * level_weight_ratio(j, depth).0);
            }
        }
        let w: Vec<_> = (1..=3).map(|j| level_weight_ratio(j, 3)).collect();
        assert_eq!(w, [(1, 7), (2, 7), (4, 7)]);
    }

    #[test]
    fn similarity_examples() {
        let a = v(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        // cos level 1 = 1.0, cos level 2 = 0.5
        let b = v(&[&[2.0, 0.0], &[0.5, 0.75f32.sqrt()]]);
        assert!((similarity(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-7);
        let z = v(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(similarity(&a, &z).unwrap_err(), RetrievalError::ZeroNorm { level: 2 });
    }

    fn db_of(items: &[(&[&[f32]], &[u32])]) -> RetrievalDatabase {
        let mut db = RetrievalDatabase::empty(items[0].0.len(), items[0].0[0].len(), "fp");
        for (i, (vecs, p)) in items.iter().enumerate() {
            db.push(format!("d{i}"), v(vecs), path(p)).unwrap();
        }
        db
    }

    #[test]
    fn diversity_filter_keeps_best_duplicate() {
        let db = db_of(&[
            (&[&[1.0, 0.1]], &[1]),
            (&[&[1.0, 0.2]], &[1]),
            (&[&[1.0, 0.3]], &[2]),
            (&[&[-1.0, 0.0]], &[3]),
        ]);
        let q = v(&[&[1.0, 0.0]]);
        let hits = db.search_topk_diverse(&q, 2, DiversityKey::FullPath, None).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.instance.doc_id.as_str()).collect();
        assert_eq!(ids, ["d0", "d2"]);
        let all = db.search_topk_diverse(&q, 10, DiversityKey::FullPath, None).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_go_to_earlier_insertion() {
        let db = db_of(&[(&[&[0.0, 1.0]], &[1]), (&[&[1.0, 0.0]], &[2]), (&[&[1.0, 0.0]], &[3])]);
        let q = v(&[&[1.0, 0.0]]);
        let hits = db.search_topk_diverse(&q, 2, DiversityKey::FullPath, None).unwrap();
        assert_eq!(hits[0].instance.ordinal, 1);
        assert_eq!(hits[1].instance.ordinal, 2);
        assert_eq!(db.top1(&q).unwrap().instance.ordinal, 1);
    }

    #[test]
    fn errors() {
        let db = RetrievalDatabase::empty(1, 2, "fp");
        let q = v(&[&[1.0, 0.0]]);
        assert_eq!(db.search_topk_diverse(&q, 1, DiversityKey::FullPath, None).unwrap_err(), RetrievalError::EmptyDatabase);
        let db = db_of(&[(&[&[1.0, 0.0]], &[1])]);
        assert_eq!(db.search_topk_diverse(&q, 0, DiversityKey::FullPath, None).unwrap_err(), RetrievalError::ZeroK);
        assert!(matches!(db.top1(&v(&[&[1.0]])).unwrap_err(), RetrievalError::Shape(_)));
    }

    #[test]
    fn snapshots_swap_atomically() {
        let shared = SharedDatabase::new(db_of(&[(&[&[1.0, 0.0]], &[1])]));
        let before = shared.snapshot();
        shared
            .update(|db| {
                let mut next = db.clone();
                next.push("new".into(), v(&[&[0.0, 1.0]]), path(&[2]))?;
                Ok::<_, RetrievalError>(next)
            })
            .unwrap();
        assert_eq!(before.len(), 1);
        assert_eq!(shared.snapshot().len(), 2);
        assert_eq!(shared.snapshot().instances[1].ordinal, 1);
    }
}
