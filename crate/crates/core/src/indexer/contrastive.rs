//! Hard-negative groups for the contrastive objective.
//!
//! A group is the anchor, one positive (another document of the same label
//! path, or the label's own text when the anchor is the only sample), hard
//! negatives drawn from the labels whose texts are most similar to the
//! anchor label's text, and random negatives from any other label.

use std::collections::{BTreeMap, HashMap};

use super::IndexerError;
use crate::corpus::{tokenize, Document};
use crate::rng::{self, SeededRng};
use crate::taxonomy::{LabelPath, LabelTextMode, NodeId, Taxonomy};

pub const HARD_NEGATIVES: usize = 4;
pub const RANDOM_NEGATIVES: usize = 10;
/// How many similar labels feed the hard-negative pool.
pub const TOP_SIMILAR_LABELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemberSource {
    Document(String),
    /// The text of a leaf label.
    LabelText(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMember {
    pub source: MemberSource,
    pub path: LabelPath,
    pub tokens: Vec<u32>,
}

impl GroupMember {
    pub fn label(&self) -> String {
        match &self.source {
            MemberSource::Document(id) => format!("document `{id}`"),
            MemberSource::LabelText(node) => format!("label text of {node}"),
        }
    }

    fn document(doc: &Document) -> Self {
        Self { source: MemberSource::Document(doc.id.clone()), path: doc.gold.clone(), tokens: doc.tokens.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveGroup {
    pub anchor: GroupMember,
    pub positive: GroupMember,
    /// Hard negatives first, then random ones.
    pub negatives: Vec<GroupMember>,
    pub hard_count: usize,
}

impl ContrastiveGroup {
    /// Anchor, positive, negatives.
    pub fn members(&self) -> Vec<&GroupMember> {
        let mut out = vec![&self.anchor, &self.positive];
        out.extend(self.negatives.iter());
        out
    }

    pub fn len(&self) -> usize {
        2 + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Pairwise cosine similarity of leaf label texts (bags of token counts).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionSimilarity {
    pub leaves: Vec<NodeId>,
    pub texts: Vec<String>,
    pub tokens: Vec<Vec<u32>>,
    pub matrix: Vec<Vec<f64>>,
    /// Per leaf: the most similar other leaves, best first (ties by id).
    pub top: Vec<Vec<NodeId>>,
    position: HashMap<NodeId, usize>,
}

impl DescriptionSimilarity {
    pub fn similarity(&self, a: NodeId, b: NodeId) -> Option<f64> {
        Some(self.matrix[*self.position.get(&a)?][*self.position.get(&b)?])
    }

    pub fn top_similar(&self, leaf: NodeId) -> &[NodeId] {
        self.position.get(&leaf).map_or(&[], |&i| self.top[i].as_slice())
    }

    pub fn text(&self, leaf: NodeId) -> Option<&str> {
        self.position.get(&leaf).map(|&i| self.texts[i].as_str())
    }

    pub fn label_tokens(&self, leaf: NodeId) -> Option<&[u32]> {
        self.position.get(&leaf).map(|&i| self.tokens[i].as_slice())
    }
}

pub fn bag_cosine(a: &[u32], b: &[u32]) -> f64 {
    let count = |xs: &[u32]| {
        let mut m: BTreeMap<u32, f64> = BTreeMap::new();
        xs.iter().for_each(|&x| *m.entry(x).or_default() += 1.0);
        m
    };
    let (ca, cb) = (count(a), count(b));
    let dot: f64 = ca.iter().filter_map(|(k, v)| cb.get(k).map(|w| v * w)).sum();
    let na = ca.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = cb.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn build_desc_similarity(taxonomy: &Taxonomy, mode: LabelTextMode) -> Result<DescriptionSimilarity, IndexerError> {
    let leaves = taxonomy.leaves().to_vec();
    let texts = leaves
        .iter()
        .map(|&l| taxonomy.label_text(&taxonomy.path_to(l)?, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let tokens: Vec<Vec<u32>> = texts.iter().map(|t| tokenize(t)).collect();
    let n = leaves.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = bag_cosine(&tokens[i], &tokens[j]);
            matrix[i][j] = s;
            matrix[j][i] = s;
        }
    }
    let top = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| matrix[i][b].total_cmp(&matrix[i][a]).then(leaves[a].cmp(&leaves[b])));
            others.into_iter().take(TOP_SIMILAR_LABELS).map(|j| leaves[j]).collect()
        })
        .collect();
    let position = leaves.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    Ok(DescriptionSimilarity { leaves, texts, tokens, matrix, top, position })
}

/// Draws contrastive groups for a fixed training set.
pub struct ContrastiveSampler<'a> {
    trainset: &'a [Document],
    similarity: &'a DescriptionSimilarity,
    taxonomy: &'a Taxonomy,
    by_leaf: HashMap<NodeId, Vec<usize>>,
    hard: usize,
    random: usize,
}

impl<'a> ContrastiveSampler<'a> {
    pub fn new(trainset: &'a [Document], taxonomy: &'a Taxonomy, similarity: &'a DescriptionSimilarity) -> Self {
        let mut by_leaf: HashMap<NodeId, Vec<usize>> = HashMap::new();
        for (i, d) in trainset.iter().enumerate() {
            by_leaf.entry(d.gold.leaf()).or_default().push(i);
        }
        Self { trainset, similarity, taxonomy, by_leaf, hard: HARD_NEGATIVES, random: RANDOM_NEGATIVES }
    }

    pub fn with_counts(mut self, hard: usize, random: usize) -> Self {
        self.hard = hard;
        self.random = random;
        self
    }

    fn label_member(&self, leaf: NodeId) -> Result<GroupMember, IndexerError> {
        let tokens = self
            .similarity
            .label_tokens(leaf)
            .ok_or_else(|| IndexerError::Config(format!("no label text for {leaf}")))?
            .to_vec();
        if tokens.is_empty() {
            return Err(IndexerError::EmptyInput);
        }
        Ok(GroupMember { source: MemberSource::LabelText(leaf), path: self.taxonomy.path_to(leaf)?, tokens })
    }

    /// The group for `trainset[anchor]`.
    pub fn group(&self, anchor: usize, rng: &mut SeededRng) -> Result<ContrastiveGroup, IndexerError> {
        let doc = &self.trainset[anchor];
        let leaf = doc.gold.leaf();
        if self.similarity.leaves.len() < 2 {
            return Err(IndexerError::NoNegatives);
        }

        let same: Vec<usize> = self.by_leaf[&leaf].iter().copied().filter(|&i| i != anchor).collect();
        let positive = if same.is_empty() {
            self.label_member(leaf)?
        } else {
            GroupMember::document(&self.trainset[same[rng::pick(rng, same.len())]])
        };

        enum Item {
            Doc(usize),
            Label(NodeId),
        }
        let member = |item: &Item| match *item {
            Item::Doc(i) => Ok(GroupMember::document(&self.trainset[i])),
            Item::Label(l) => self.label_member(l),
        };
        let draw = |pool: &[Item], n: usize, rng: &mut SeededRng| -> Result<Vec<GroupMember>, IndexerError> {
            if pool.is_empty() {
                return Err(IndexerError::NoNegatives);
            }
            let mut picked: Vec<usize> = rng::sample_indices(rng, pool.len(), n);
            // Top up with replacement when the pool is smaller than requested.
            while picked.len() < n {
                picked.push(rng::pick(rng, pool.len()));
            }
            picked.iter().map(|&i| member(&pool[i])).collect()
        };

        let similar = self.similarity.top_similar(leaf);
        let mut hard_pool = Vec::new();
        for &l in similar {
            hard_pool.extend(self.by_leaf.get(&l).into_iter().flatten().map(|&i| Item::Doc(i)));
            hard_pool.push(Item::Label(l));
        }
        let mut negatives = draw(&hard_pool, self.hard, rng)?;
        let taken: Vec<&MemberSource> = negatives.iter().map(|m| &m.source).collect();

        let mut random_pool: Vec<Item> = (0..self.trainset.len())
            .filter(|&i| self.trainset[i].gold.leaf() != leaf)
            .filter(|&i| !taken.contains(&&MemberSource::Document(self.trainset[i].id.clone())))
            .map(Item::Doc)
            .collect();
        if random_pool.len() < self.random {
            random_pool.extend(
                self.similarity
                    .leaves
                    .iter()
                    .filter(|&&l| l != leaf && !taken.contains(&&MemberSource::LabelText(l)))
                    .map(|&l| Item::Label(l)),
            );
        }
        if random_pool.is_empty() {
            random_pool.extend(self.similarity.leaves.iter().filter(|&&l| l != leaf).map(|&l| Item::Label(l)));
        }
        negatives.extend(draw(&random_pool, self.random, rng)?);

        Ok(ContrastiveGroup { anchor: GroupMember::document(doc), positive, negatives, hard_count: self.hard })
    }
}

/// One-shot convenience over [`ContrastiveSampler`].
pub fn select_contrastive_group(
    anchor: usize,
    trainset: &[Document],
    taxonomy: &Taxonomy,
    similarity: &DescriptionSimilarity,
    rng: &mut SeededRng,
) -> Result<ContrastiveGroup, IndexerError> {
    ContrastiveSampler::new(trainset, taxonomy, similarity).group(anchor, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticSpec;

    fn fig3() -> Taxonomy {
        Taxonomy::parse(
            "AI\tROOT\nspeech\tAI\nspeech recognition\tspeech\nspeech synthesis\tspeech\n\
             CS\tROOT\nstorage\tCS\ndatabases\tstorage\n",
        )
        .unwrap()
    }

    #[test]
    fn cosine_extremes() {
        let a = tokenize("alpha beta");
        assert!((bag_cosine(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(bag_cosine(&a, &tokenize("gamma delta")), 0.0);
    }

    #[test]
    fn similar_paths_rank_higher() {
        let t = fig3();
        let sim = build_desc_similarity(&t, LabelTextMode::PathText).unwrap();
        let rec = t.find_qualified("AI/speech/speech recognition").unwrap();
        let syn = t.find_qualified("AI/speech/speech synthesis").unwrap();
        let db = t.find_qualified("CS/storage/databases").unwrap();
        // Direct computation on token counts:
        // rec = {speech:2, recognition:1, of:2, ai:1}, syn = {speech:2, synthesis:1, of:2, ai:1}
        // dot = 4 + 4 + 1 = 9, |rec|^2 = |syn|^2 = 10 -> 0.9
        // db = {databases:1, of:2, storage:1, cs:1}; dot(rec, db) = 4, |db|^2 = 7
        assert!((sim.similarity(rec, syn).unwrap() - 0.9).abs() < 1e-12);
        assert!((sim.similarity(rec, db).unwrap() - 4.0 / (10f64.sqrt() * 7f64.sqrt())).abs() < 1e-12);
        assert_eq!(sim.top_similar(rec), &[syn, db]);
    }

    fn fixture(docs_per_leaf: usize) -> (Taxonomy, Vec<Document>) {
        let spec = SyntheticSpec { branching: vec![3, 3], docs_per_leaf, ..Default::default() };
        let t = spec.taxonomy();
        let docs = spec.corpus(&t);
        (t, docs)
    }

    #[test]
    fn single_sample_uses_label_text_as_positive() {
        let (t, docs) = fixture(1);
        let sim = build_desc_similarity(&t, LabelTextMode::PathText).unwrap();
        let mut rng = rng::seeded(4);
        let g = select_contrastive_group(0, &docs, &t, &sim, &mut rng).unwrap();
        assert_eq!(g.positive.source, MemberSource::LabelText(docs[0].gold.leaf()));
        assert_eq!(g.len(), 1 + 1 + 14);
    }

    #[test]
    fn negatives_never_share_the_anchor_path() {
        let (t, docs) = fixture(3);
        let sim = build_desc_similarity(&t, LabelTextMode::PathText).unwrap();
        let sampler = ContrastiveSampler::new(&docs, &t, &sim);
        let mut rng = rng::seeded(11);
        for draw in 0..1000 {
            let anchor = draw % docs.len();
            let g = sampler.group(anchor, &mut rng).unwrap();
            assert_eq!(g.negatives.len(), HARD_NEGATIVES + RANDOM_NEGATIVES);
            assert_eq!(g.positive.path, docs[anchor].gold);
            assert_ne!(g.positive.source, g.anchor.source);
            assert!(g.negatives.iter().all(|n| n.path != docs[anchor].gold));
            let similar = sim.top_similar(docs[anchor].gold.leaf());
            assert!(g.negatives[..HARD_NEGATIVES].iter().all(|n| similar.contains(&n.path.leaf())));
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (t, docs) = fixture(2);
        let sim = build_desc_similarity(&t, LabelTextMode::PathText).unwrap();
        let a = select_contrastive_group(3, &docs, &t, &sim, &mut rng::seeded(5)).unwrap();
        let b = select_contrastive_group(3, &docs, &t, &sim, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_leaf_taxonomy_has_no_negatives() {
        let t = Taxonomy::parse("A\tROOT\n").unwrap();
        let docs = vec![Document::new("x", "some words", t.resolve_names(&["A"]).unwrap())];
        let sim = build_desc_similarity(&t, LabelTextMode::PathText).unwrap();
        let err = select_contrastive_group(0, &docs, &t, &sim, &mut rng::seeded(1)).unwrap_err();
        assert_eq!(err, IndexerError::NoNegatives);
    }
}
