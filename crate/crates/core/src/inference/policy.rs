//! Candidate sets, reply parsing and the fallback rule.

use serde::{Deserialize, Serialize};

use super::{Demonstration, FallbackPolicy, InferenceConfig, InferenceError};
use crate::corpus::words;
use crate::retrieval::RetrievalDatabase;
use crate::taxonomy::{LabelPath, NodeId, Taxonomy};

/// Children of `current` offered at the next level, best demo rank first.
///
/// With pruning on, only children carried by a demonstration are kept,
/// unless none is, in which case every child is offered. With pruning off,
/// demo-carried children still come first and the rest follow in id order.
pub fn candidate_label_set(
    taxonomy: &Taxonomy,
    current: NodeId,
    demos: &[Demonstration],
    cfg: &InferenceConfig,
) -> Result<Vec<NodeId>, InferenceError> {
    let children = taxonomy.children_of(current)?;
    if children.is_empty() {
        return Err(InferenceError::LeafCurrent(taxonomy.qualified_name(current)));
    }
    let level = taxonomy.node(current)?.level + 1;
    let mut out: Vec<NodeId> = Vec::with_capacity(children.len());
    for demo in demos {
        let id = demo.path.at_level(level);
        if children.contains(&id) && !out.contains(&id) {
            out.push(id);
        }
    }
    if !cfg.pruning || out.is_empty() {
        let mut rest: Vec<NodeId> = children.iter().copied().filter(|c| !out.contains(c)).collect();
        rest.sort();
        out.extend(rest);
    }
    Ok(out)
}

/// How a reply was matched to a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    CaseInsensitive,
    Contained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "index")]
pub enum ParseOutcome {
    Matched(usize, MatchKind),
    NoMatch,
    Ambiguous,
}

impl ParseOutcome {
    pub fn index(self) -> Option<usize> {
        match self {
            ParseOutcome::Matched(i, _) => Some(i),
            _ => None,
        }
    }
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Match an LLM reply against candidate names.
///
/// Tried in order: the trimmed reply equals a candidate; equals one ignoring
/// case; contains the word sequence of exactly one candidate. A candidate
/// whose words sit inside another contained candidate does not count on its
/// own, so "machine learning" is not ambiguous with "learning".
pub fn parse_llm_label(reply: &str, candidates: &[String]) -> ParseOutcome {
    let trimmed = reply.trim();
    if let Some(i) = candidates.iter().position(|c| c == trimmed) {
        return ParseOutcome::Matched(i, MatchKind::Exact);
    }
    let lower = trimmed.to_lowercase();
    let ci: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].to_lowercase() == lower).collect();
    match ci.len() {
        1 => return ParseOutcome::Matched(ci[0], MatchKind::CaseInsensitive),
        n if n > 1 => return ParseOutcome::Ambiguous,
        _ => {}
    }
    let reply_words: Vec<String> = words(trimmed).collect();
    let cand_words: Vec<Vec<String>> = candidates.iter().map(|c| words(c).collect()).collect();
    let hits: Vec<usize> = (0..candidates.len()).filter(|&i| contains_run(&reply_words, &cand_words[i])).collect();
    let maximal: Vec<usize> = hits
        .iter()
        .copied()
        .filter(|&i| {
            !hits.iter().any(|&o| {
                cand_words[o] != cand_words[i]
                    && cand_words[o].len() > cand_words[i].len()
                    && contains_run(&cand_words[o], &cand_words[i])
            })
        })
        .collect();
    match maximal.len() {
        0 => ParseOutcome::NoMatch,
        1 => ParseOutcome::Matched(maximal[0], MatchKind::Contained),
        _ => ParseOutcome::Ambiguous,
    }
}

/// Where a substituted label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackSource {
    /// Level-j label of the best demonstration passing through the current label.
    ConsistentDemo,
    /// Level-j label of the overall most similar instance.
    Top1Label,
    /// Remaining path of the most similar instance passing through the current label.
    RemainingPath,
    /// The most similar instance's whole path, replacing earlier levels.
    Top1Path,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fallback {
    pub source: FallbackSource,
    pub doc_id: String,
    /// Nodes for levels `level..=C`, or the full path for [`FallbackSource::Top1Path`].
    pub nodes: Vec<NodeId>,
}

/// Substitute a label at `level` (1-based) below `current` when the reply
/// matched nothing.
pub fn fallback(
    taxonomy: &Taxonomy,
    db: &RetrievalDatabase,
    query: &[Vec<f32>],
    current: NodeId,
    level: usize,
    demos: &[Demonstration],
    policy: FallbackPolicy,
) -> Result<Fallback, InferenceError> {
    let children = taxonomy.children_of(current)?;
    if policy == FallbackPolicy::Consistent {
        if let Some(d) = demos.iter().find(|d| children.contains(&d.path.at_level(level))) {
            return Ok(Fallback {
                source: FallbackSource::ConsistentDemo,
                doc_id: d.doc_id.clone(),
                nodes: vec![d.path.at_level(level)],
            });
        }
    }
    let top = db.top1(query)?;
    let label = top.instance.path.at_level(level);
    if children.contains(&label) {
        return Ok(Fallback { source: FallbackSource::Top1Label, doc_id: top.instance.doc_id.clone(), nodes: vec![label] });
    }
    let mut best: Option<(f64, &crate::retrieval::IndexedInstance)> = None;
    for hit in db.score_all(query)? {
        if (current == NodeId::ROOT || hit.instance.path.passes_through(current))
            && best.is_none_or(|(s, _)| hit.score > s)
        {
            best = Some((hit.score, hit.instance));
        }
    }
    Ok(match best {
        Some((_, inst)) => Fallback {
            source: FallbackSource::RemainingPath,
            doc_id: inst.doc_id.clone(),
            nodes: inst.path.nodes()[level - 1..].to_vec(),
        },
        None => Fallback {
            source: FallbackSource::Top1Path,
            doc_id: top.instance.doc_id.clone(),
            nodes: top.instance.path.nodes().to_vec(),
        },
    })
}

/// Pick a demonstration number out of a select-prompt reply.
pub fn parse_selection(reply: &str, count: usize) -> Option<usize> {
    reply
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse::<usize>().ok())
        .find(|n| (1..=count).contains(n))
        .map(|n| n - 1)
}

/// Full label paths rendered for the flat prompt.
pub fn flat_candidates(taxonomy: &Taxonomy, demos: &[Demonstration], cfg: &InferenceConfig) -> Vec<LabelPath> {
    let mut out: Vec<LabelPath> = Vec::new();
    for d in demos {
        if !out.contains(&d.path) {
            out.push(d.path.clone());
        }
    }
    if !cfg.pruning || out.is_empty() {
        for &leaf in taxonomy.leaves() {
            let p = taxonomy.path_to(leaf).expect("leaf exists");
            if !out.contains(&p) {
                out.push(p);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn cascade() {
        let c = cands(&["Machine Learning", "Learning", "CS"]);
        assert_eq!(parse_llm_label("CS", &c), ParseOutcome::Matched(2, MatchKind::Exact));
        assert_eq!(parse_llm_label("  cs\n", &c), ParseOutcome::Matched(2, MatchKind::CaseInsensitive));
        assert_eq!(
            parse_llm_label("The answer is: Machine Learning.", &c),
            ParseOutcome::Matched(0, MatchKind::Contained)
        );
        assert_eq!(parse_llm_label("banana", &c), ParseOutcome::NoMatch);
        assert_eq!(parse_llm_label("either CS or Learning", &c), ParseOutcome::Ambiguous);
        assert_eq!(parse_llm_label("", &c), ParseOutcome::NoMatch);
        assert_eq!(parse_llm_label("x", &[]), ParseOutcome::NoMatch);
    }

    #[test]
    fn containment_needs_whole_words() {
        let c = cands(&["CS", "Bio"]);
        assert_eq!(parse_llm_label("physics", &c), ParseOutcome::NoMatch);
        assert_eq!(parse_llm_label("biology", &c), ParseOutcome::NoMatch);
        assert_eq!(parse_llm_label("Label:   bio ", &c), ParseOutcome::Matched(1, MatchKind::Contained));
    }

    #[test]
    fn selection_numbers() {
        assert_eq!(parse_selection("Example 2 is closest", 3), Some(1));
        assert_eq!(parse_selection("7 then 1", 3), Some(0));
        assert_eq!(parse_selection("none", 3), None);
        assert_eq!(parse_selection("0", 3), None);
    }
}
