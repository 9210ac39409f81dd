//! The label tree: nodes, paths, and the textual forms a label can take.
//!
//! A taxonomy file is UTF-8 text with one node per line:
//!
//! ```text
//! # comment
//! <name> TAB <parent-ref | ROOT> [TAB <description>]
//! ```
//!
//! `parent-ref` is the parent's name, optionally qualified with its ancestors
//! as `top/mid/name` when the bare name is not unique in the file. Names may
//! not contain `/`, tabs or newlines. Descriptions use the escapes `\t`, `\n`
//! and `\\`. Blank lines and lines starting with `#` are ignored.
//!
//! Node ids are dense and assigned in document order; id 0 is the virtual
//! root, which is not written in the file.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the virtual root, used as the current label at the first level.
pub const ROOT_NAME: &str = "Root";
const ROOT_REF: &str = "ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelNode {
    pub id: NodeId,
    pub name: String,
    pub level: usize,
    pub parent: Option<NodeId>,
    pub description: Option<String>,
}

/// One node per level, level 1 first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelPath(pub Vec<NodeId>);

impl LabelPath {
    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn leaf(&self) -> NodeId {
        *self.0.last().expect("label paths are never empty")
    }

    /// Node at 1-based `level`.
    pub fn at_level(&self, level: usize) -> NodeId {
        self.0[level - 1]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    /// Whether the path runs through `node` (the root is on every path).
    pub fn passes_through(&self, node: NodeId) -> bool {
        node == NodeId::ROOT || self.0.contains(&node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTextMode {
    /// The leaf's own name.
    OriginalLeaf,
    /// `leaf of mid of top`.
    #[default]
    PathText,
    /// The stored (usually LLM-generated) description of the leaf.
    Description,
}

impl std::str::FromStr for LabelTextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" | "original-leaf" | "leaf" => Ok(Self::OriginalLeaf),
            "path" | "path-text" => Ok(Self::PathText),
            "description" | "desc" => Ok(Self::Description),
            other => Err(format!("unknown label text mode `{other}`")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: parent `{parent}` of `{name}` does not exist")]
    Orphan { line: usize, name: String, parent: String },
    #[error("line {line}: parent reference `{parent}` is ambiguous; qualify it as a/b/c")]
    AmbiguousParent { line: usize, parent: String },
    #[error("cycle detected at `{name}` (line {line})")]
    Cycle { line: usize, name: String },
    #[error("duplicate sibling name `{name}` (line {line})")]
    DuplicateSibling { line: usize, name: String },
    #[error("leaves at different depths ({shallow} and {deep}); only uniform-depth trees are supported")]
    RaggedDepth { shallow: usize, deep: usize },
    #[error("taxonomy has no labels")]
    Empty,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid label path: {0}")]
    InvalidPath(String),
    #[error("no description stored for `{0}`")]
    MissingDescription(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    nodes: Vec<LabelNode>,
    children: Vec<Vec<NodeId>>,
    depth: usize,
    /// Per level (index 0 = level 1): node ids at that level in id order.
    levels: Vec<Vec<NodeId>>,
    /// Position of each node inside its level.
    level_index: Vec<usize>,
}

struct RawRecord {
    line: usize,
    name: String,
    parent: Option<Vec<String>>,
    description: Option<String>,
}

impl Taxonomy {
    /// Parse and validate a taxonomy document.
    pub fn parse(source: &str) -> Result<Self, TaxonomyError> {
        let records = parse_records(source)?;
        if records.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let parents = resolve_parents(&records)?;
        Self::build(records, parents)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| crate::Error::io(path.as_ref(), e))?;
        Ok(Self::parse(&text)?)
    }

    fn build(records: Vec<RawRecord>, parents: Vec<Option<usize>>) -> Result<Self, TaxonomyError> {
        let n = records.len() + 1;
        let mut nodes = Vec::with_capacity(n);
        nodes.push(LabelNode {
            id: NodeId::ROOT,
            name: ROOT_NAME.to_string(),
            level: 0,
            parent: None,
            description: None,
        });
        let mut children = vec![Vec::new(); n];
        for (i, rec) in records.iter().enumerate() {
            let id = NodeId(i as u32 + 1);
            let parent = parents[i].map_or(NodeId::ROOT, |p| NodeId(p as u32 + 1));
            children[parent.index()].push(id);
            nodes.push(LabelNode {
                id,
                name: rec.name.clone(),
                level: 0,
                parent: Some(parent),
                description: rec.description.clone(),
            });
        }
        // Levels: parents resolve before children in BFS order from the root.
        let mut queue = std::collections::VecDeque::from([NodeId::ROOT]);
        let mut seen = 1usize;
        while let Some(id) = queue.pop_front() {
            let level = nodes[id.index()].level;
            let mut names = BTreeSet::new();
            for &child in &children[id.index()] {
                let rec = &records[child.index() - 1];
                if !names.insert(rec.name.as_str()) {
                    return Err(TaxonomyError::DuplicateSibling {
                        line: rec.line,
                        name: rec.name.clone(),
                    });
                }
                nodes[child.index()].level = level + 1;
                seen += 1;
                queue.push_back(child);
            }
        }
        if seen != n {
            // Unreachable from the root means a cycle that resolution missed.
            let rec = records
                .iter()
                .enumerate()
                .find(|(i, _)| nodes[i + 1].level == 0)
                .map(|(_, r)| r)
                .expect("unreached node exists");
            return Err(TaxonomyError::Cycle { line: rec.line, name: rec.name.clone() });
        }

        let mut depth = None;
        for node in nodes.iter().skip(1) {
            if children[node.id.index()].is_empty() {
                match depth {
                    None => depth = Some(node.level),
                    Some(d) if d != node.level => {
                        return Err(TaxonomyError::RaggedDepth {
                            shallow: d.min(node.level),
                            deep: d.max(node.level),
                        })
                    }
                    _ => {}
                }
            }
        }
        let depth = depth.ok_or(TaxonomyError::Empty)?;
        let mut levels = vec![Vec::new(); depth];
        let mut level_index = vec![0; n];
        for node in nodes.iter().skip(1) {
            level_index[node.id.index()] = levels[node.level - 1].len();
            levels[node.level - 1].push(node.id);
        }
        Ok(Self { nodes, children, depth, levels, level_index })
    }

    /// Depth C: the level of every leaf.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, id: NodeId) -> Result<&LabelNode, TaxonomyError> {
        self.nodes.get(id.index()).ok_or(TaxonomyError::UnknownNode(id))
    }

    /// All nodes except the virtual root, in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &LabelNode> {
        self.nodes.iter().skip(1)
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].name
    }

    pub fn children_of(&self, id: NodeId) -> Result<&[NodeId], TaxonomyError> {
        self.children.get(id.index()).map(Vec::as_slice).ok_or(TaxonomyError::UnknownNode(id))
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children.get(id.index()).is_some_and(Vec::is_empty)
    }

    pub fn child_named(&self, parent: NodeId, name: &str) -> Option<NodeId> {
        self.children
            .get(parent.index())?
            .iter()
            .copied()
            .find(|&c| self.nodes[c.index()].name == name)
    }

    /// Node ids at 1-based `level`, in id order.
    pub fn level_nodes(&self, level: usize) -> &[NodeId] {
        &self.levels[level - 1]
    }

    pub fn level_widths(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// Position of `id` within its level; used as the class index of the
    /// per-level classifier heads.
    pub fn level_index(&self, id: NodeId) -> usize {
        self.level_index[id.index()]
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.levels[self.depth - 1]
    }

    /// The root-to-node path (excluding the virtual root).
    pub fn path_to(&self, id: NodeId) -> Result<LabelPath, TaxonomyError> {
        self.node(id)?;
        let mut nodes = Vec::new();
        let mut cur = id;
        while cur != NodeId::ROOT {
            nodes.push(cur);
            cur = self.nodes[cur.index()].parent.expect("non-root nodes have parents");
        }
        nodes.reverse();
        Ok(LabelPath(nodes))
    }

    /// Check that `path` is a full root-to-leaf chain.
    pub fn validate_path(&self, path: &LabelPath) -> Result<(), TaxonomyError> {
        if path.depth() != self.depth {
            return Err(TaxonomyError::InvalidPath(format!(
                "path length {} != taxonomy depth {}",
                path.depth(),
                self.depth
            )));
        }
        let mut parent = NodeId::ROOT;
        for &id in path.nodes() {
            let node = self.node(id)?;
            if node.parent != Some(parent) {
                return Err(TaxonomyError::InvalidPath(format!(
                    "{} is not a child of {}",
                    self.qualified_name(id),
                    self.qualified_name(parent)
                )));
            }
            parent = id;
        }
        Ok(())
    }

    /// Resolve level-1..C names into a path.
    pub fn resolve_names<S: AsRef<str>>(&self, names: &[S]) -> Result<LabelPath, TaxonomyError> {
        if names.len() != self.depth {
            return Err(TaxonomyError::InvalidPath(format!(
                "path length {} != taxonomy depth {}",
                names.len(),
                self.depth
            )));
        }
        let mut parent = NodeId::ROOT;
        let mut nodes = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref();
            parent = self.child_named(parent, name).ok_or_else(|| {
                TaxonomyError::InvalidPath(format!(
                    "`{name}` is not a child of `{}`",
                    self.qualified_name(parent)
                ))
            })?;
            nodes.push(parent);
        }
        Ok(LabelPath(nodes))
    }

    pub fn path_names(&self, path: &LabelPath) -> Vec<String> {
        path.nodes().iter().map(|&id| self.name(id).to_string()).collect()
    }

    /// `top/mid/leaf`; the root is `Root`.
    pub fn qualified_name(&self, id: NodeId) -> String {
        if id == NodeId::ROOT {
            return ROOT_NAME.to_string();
        }
        match self.path_to(id) {
            Ok(p) => self.path_names(&p).join("/"),
            Err(_) => id.to_string(),
        }
    }

    pub fn find_qualified(&self, qualified: &str) -> Option<NodeId> {
        let mut cur = NodeId::ROOT;
        for part in qualified.split('/') {
            cur = self.child_named(cur, part)?;
        }
        Some(cur)
    }

    /// Name shown to an LLM: the bare name, or `name of parent...` when another
    /// node on the same level carries the same name.
    pub fn display_name(&self, id: NodeId) -> String {
        let node = &self.nodes[id.index()];
        if id == NodeId::ROOT {
            return ROOT_NAME.to_string();
        }
        let collides = self.levels[node.level - 1]
            .iter()
            .any(|&other| other != id && self.nodes[other.index()].name == node.name);
        if collides {
            self.path_text(&self.path_to(id).expect("node exists"))
        } else {
            node.name.clone()
        }
    }

    /// Leaf-to-root names joined with " of ".
    pub fn path_text(&self, path: &LabelPath) -> String {
        path.nodes()
            .iter()
            .rev()
            .map(|&id| self.name(id))
            .collect::<Vec<_>>()
            .join(" of ")
    }

    pub fn label_text(&self, path: &LabelPath, mode: LabelTextMode) -> Result<String, TaxonomyError> {
        let leaf = path.leaf();
        match mode {
            LabelTextMode::OriginalLeaf => Ok(self.name(leaf).to_string()),
            LabelTextMode::PathText => Ok(self.path_text(path)),
            LabelTextMode::Description => self.nodes[leaf.index()]
                .description
                .clone()
                .filter(|d| !d.trim().is_empty())
                .ok_or_else(|| TaxonomyError::MissingDescription(self.qualified_name(leaf))),
        }
    }

    pub fn set_description(&mut self, id: NodeId, description: String) -> Result<(), TaxonomyError> {
        if id == NodeId::ROOT {
            return Err(TaxonomyError::UnknownNode(id));
        }
        let node = self.nodes.get_mut(id.index()).ok_or(TaxonomyError::UnknownNode(id))?;
        node.description = Some(description);
        Ok(())
    }

    /// Serialize back to the line format; parents are written fully qualified.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for node in self.nodes() {
            let parent = node.parent.expect("non-root");
            out.push_str(&node.name);
            out.push('\t');
            if parent == NodeId::ROOT {
                out.push_str(ROOT_REF);
            } else {
                out.push_str(&self.qualified_name(parent));
            }
            if let Some(d) = &node.description {
                out.push('\t');
                out.push_str(&escape(d));
            }
            out.push('\n');
        }
        out
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, line: usize) -> Result<String, TaxonomyError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(TaxonomyError::Malformed {
                    line,
                    reason: format!("bad escape `\\{}`", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

fn valid_name(name: &str) -> bool {
    !name.trim().is_empty() && !name.contains(['/', '\t', '\n', '\r']) && name != ROOT_REF
}

fn parse_records(source: &str) -> Result<Vec<RawRecord>, TaxonomyError> {
    let mut records = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        let text = raw.strip_suffix('\r').unwrap_or(raw);
        if text.trim().is_empty() || text.starts_with('#') {
            continue;
        }
        let mut fields = text.splitn(3, '\t');
        let name = fields.next().unwrap_or_default().trim();
        let parent = fields
            .next()
            .map(str::trim)
            .ok_or_else(|| TaxonomyError::Malformed { line, reason: "expected `name<TAB>parent`".into() })?;
        if !valid_name(name) {
            return Err(TaxonomyError::Malformed { line, reason: format!("invalid label name `{name}`") });
        }
        let parent = if parent == ROOT_REF {
            None
        } else {
            let parts: Vec<String> = parent.split('/').map(|p| p.trim().to_string()).collect();
            if parts.iter().any(|p| !valid_name(p)) {
                return Err(TaxonomyError::Malformed { line, reason: format!("invalid parent reference `{parent}`") });
            }
            Some(parts)
        };
        let description = match fields.next() {
            Some(d) if !d.is_empty() => Some(unescape(d, line)?),
            _ => None,
        };
        records.push(RawRecord { line, name: name.to_string(), parent, description });
    }
    Ok(records)
}

/// Map each record to the index of its parent record (None = root).
fn resolve_parents(records: &[RawRecord]) -> Result<Vec<Option<usize>>, TaxonomyError> {
    let mut by_name: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        by_name.entry(r.name.as_str()).or_default().push(i);
    }

    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Fresh,
        Visiting,
        Done(Option<usize>),
    }
    let mut state = vec![State::Fresh; records.len()];

    // Whether candidate `c` sits at the top-anchored location `prefix/<c>`.
    fn qualified_match(
        c: usize,
        prefix: &[String],
        records: &[RawRecord],
        by_name: &HashMap<&str, Vec<usize>>,
        state: &mut Vec<State>,
    ) -> Result<bool, TaxonomyError> {
        let mut cur = c;
        for want in prefix.iter().rev() {
            match resolve(cur, records, by_name, state)? {
                Some(p) if records[p].name == *want => cur = p,
                _ => return Ok(false),
            }
        }
        Ok(prefix.is_empty() || resolve(cur, records, by_name, state)?.is_none())
    }

    fn resolve(
        i: usize,
        records: &[RawRecord],
        by_name: &HashMap<&str, Vec<usize>>,
        state: &mut Vec<State>,
    ) -> Result<Option<usize>, TaxonomyError> {
        match state[i] {
            State::Done(p) => return Ok(p),
            State::Visiting => {
                return Err(TaxonomyError::Cycle { line: records[i].line, name: records[i].name.clone() })
            }
            State::Fresh => {}
        }
        state[i] = State::Visiting;
        let rec = &records[i];
        let parent = match &rec.parent {
            None => None,
            Some(parts) => {
                let (last, prefix) = parts.split_last().expect("non-empty reference");
                let candidates = by_name.get(last.as_str()).cloned().unwrap_or_default();
                let mut matched = Vec::new();
                for &c in candidates.iter().filter(|&&c| c != i) {
                    if qualified_match(c, prefix, records, by_name, state)? {
                        matched.push(c);
                    }
                }
                match matched.as_slice() {
                    [] if candidates.contains(&i) => {
                        return Err(TaxonomyError::Cycle { line: rec.line, name: rec.name.clone() })
                    }
                    [] => {
                        return Err(TaxonomyError::Orphan {
                            line: rec.line,
                            name: rec.name.clone(),
                            parent: parts.join("/"),
                        })
                    }
                    [one] => Some(*one),
                    _ => return Err(TaxonomyError::AmbiguousParent { line: rec.line, parent: parts.join("/") }),
                }
            }
        };
        state[i] = State::Done(parent);
        Ok(parent)
    }

    let mut out = Vec::with_capacity(records.len());
    for i in 0..records.len() {
        out.push(resolve(i, records, &by_name, &mut state)?);
    }
    Ok(out)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_taxonomy() -> impl Strategy<Value = Taxonomy> {
        (1usize..4, proptest::collection::vec(1usize..4, 1..4), any::<u64>()).prop_map(|(top, rest, seed)| {
            let mut branching = vec![top];
            branching.extend(rest);
            crate::synthetic::SyntheticSpec { branching, seed, ..Default::default() }.taxonomy()
        })
    }

    proptest! {
        #[test]
        fn structure_is_consistent(t in arb_taxonomy()) {
            for node in t.nodes() {
                let parent = node.parent.unwrap();
                prop_assert!(t.children_of(parent).unwrap().contains(&node.id));
                prop_assert_eq!(node.level, t.node(parent).unwrap().level + 1);
            }
            prop_assert_eq!(Taxonomy::parse(&t.to_text()).unwrap(), t);
        }

        #[test]
        fn path_text_is_injective(t in arb_taxonomy()) {
            let texts: BTreeSet<String> =
                t.leaves().iter().map(|&l| t.path_text(&t.path_to(l).unwrap())).collect();
            prop_assert_eq!(texts.len(), t.leaves().len());
        }
    }
}
