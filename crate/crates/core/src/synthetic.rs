//! Synthetic separable corpora for desk-scale experiments.
//!
//! Level-j nodes are named `t{j}n{k}` with k counting across the level. Every
//! node owns a private vocabulary of pseudo-words that includes its name. A
//! document draws words from its leaf's vocabulary, from its ancestors'
//! vocabularies and from a shared noise vocabulary, so a bag-of-words model
//! separates leaves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::rng;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Children per node at each level; `[3, 3, 3]` gives 27 leaves.
    pub branching: Vec<usize>,
    pub docs_per_leaf: usize,
    /// Size of each node's private vocabulary.
    pub node_vocab: usize,
    /// Size of the shared noise vocabulary.
    pub noise_vocab: usize,
    /// Words per document drawn from the leaf's vocabulary.
    pub leaf_words: usize,
    /// Words per document drawn from each ancestor's vocabulary.
    pub ancestor_words: usize,
    pub noise_words: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            branching: vec![3, 3, 3],
            docs_per_leaf: 8,
            node_vocab: 4,
            noise_vocab: 200,
            leaf_words: 8,
            ancestor_words: 2,
            noise_words: 4,
            seed: 171,
        }
    }
}

impl SyntheticSpec {
    pub fn taxonomy_text(&self) -> String {
        let mut out = String::new();
        let mut frontier: Vec<String> = vec![String::new()];
        for (depth, &width) in self.branching.iter().enumerate() {
            let mut next = Vec::new();
            for parent in &frontier {
                for _ in 0..width {
                    let name = Self::node_name(depth + 1, next.len());
                    let parent_ref = if parent.is_empty() { "ROOT" } else { parent.as_str() };
                    out.push_str(&format!("{name}\t{parent_ref}\n"));
                    next.push(name);
                }
            }
            frontier = next;
        }
        out
    }

    /// Name of the `k`-th node (0-based, across the whole level) at `level`.
    pub fn node_name(level: usize, k: usize) -> String {
        format!("t{level}n{k}")
    }

    pub fn taxonomy(&self) -> Taxonomy {
        Taxonomy::parse(&self.taxonomy_text()).expect("synthetic taxonomy is valid")
    }

    /// The `k`-th pseudo-word private to the node called `name`; word 0 is
    /// the name itself, so label texts share tokens with documents.
    pub fn node_word(name: &str, k: usize) -> String {
        if k == 0 {
            name.to_string()
        } else {
            format!("{name}w{k}")
        }
    }

    pub fn noise_word(k: usize) -> String {
        format!("g{k}")
    }

    /// `docs_per_leaf` documents for every leaf, leaves in id order.
    pub fn corpus(&self, taxonomy: &Taxonomy) -> Vec<Document> {
        let mut rng = rng::derive(self.seed, "synthetic-corpus");
        let mut docs = Vec::new();
        for &leaf in taxonomy.leaves() {
            let path = taxonomy.path_to(leaf).expect("leaf exists");
            for d in 0..self.docs_per_leaf {
                let mut words = Vec::new();
                for &node in path.nodes() {
                    let n = if node == leaf { self.leaf_words } else { self.ancestor_words };
                    for _ in 0..n {
                        words.push(Self::node_word(taxonomy.name(node), rng.random_range(0..self.node_vocab)));
                    }
                }
                for _ in 0..self.noise_words {
                    words.push(Self::noise_word(rng.random_range(0..self.noise_vocab)));
                }
                // Shuffle so position carries no signal.
                for i in (1..words.len()).rev() {
                    let j = rng.random_range(0..=i);
                    words.swap(i, j);
                }
                let id = format!("{}-{d}", taxonomy.qualified_name(leaf).replace('/', "."));
                docs.push(Document::new(id, words.join(" "), path.clone()));
            }
        }
        docs
    }

    /// Split into (first `train_per_leaf` of each leaf, the rest).
    pub fn split(docs: &[Document], train_per_leaf: usize) -> (Vec<Document>, Vec<Document>) {
        let mut seen = std::collections::HashMap::new();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for doc in docs {
            let n = seen.entry(doc.gold.clone()).or_insert(0usize);
            if *n < train_per_leaf {
                train.push(doc.clone());
            } else {
                test.push(doc.clone());
            }
            *n += 1;
        }
        (train, test)
    }
}
