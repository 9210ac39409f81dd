//! Micro/Macro-F1 over hierarchical label sets.
//!
//! Each document contributes the C labels on its path. Micro-F1 pools
//! TP/FP/FN over all label occurrences; Macro-F1 averages per-class F1 over
//! classes that occur at least once in the gold data. Per-level slices
//! restrict both to the labels of one level.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{LabelPath, NodeId, Taxonomy};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{gold} gold paths but {pred} predictions")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("document {0} has no candidate paths")]
    NoCandidates(usize),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("prediction for unknown document `{0}`")]
    UnknownDocument(String),
    #[error("no prediction for document `{0}`")]
    MissingPrediction(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: NodeId,
    pub level: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScore {
    pub level: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_level: Vec<LevelScore>,
    pub per_class: Vec<ClassScore>,
    pub n_docs: usize,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn f1(c: Counts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Label occurrences of a path with their levels.
fn labels(path: &LabelPath) -> BTreeSet<(usize, NodeId)> {
    path.nodes().iter().enumerate().map(|(i, &n)| (i + 1, n)).collect()
}

struct Tally {
    per_class: BTreeMap<(usize, NodeId), Counts>,
    support: BTreeMap<(usize, NodeId), usize>,
}

fn tally(golds: &[LabelPath], preds: &[LabelPath]) -> Tally {
    let mut per_class: BTreeMap<(usize, NodeId), Counts> = BTreeMap::new();
    let mut support = BTreeMap::new();
    for (g, p) in golds.iter().zip(preds) {
        let (gs, ps) = (labels(g), labels(p));
        for l in &gs {
            *support.entry(*l).or_default() += 1;
            if ps.contains(l) {
                per_class.entry(*l).or_default().tp += 1;
            } else {
                per_class.entry(*l).or_default().fn_ += 1;
            }
        }
        for l in ps.difference(&gs) {
            per_class.entry(*l).or_default().fp += 1;
        }
    }
    Tally { per_class, support }
}

fn summarize(t: &Tally, level: Option<usize>) -> (Counts, f64) {
    let mut micro = Counts::default();
    let mut f1s = Vec::new();
    for (key, c) in &t.per_class {
        if level.is_some_and(|l| key.0 != l) {
            continue;
        }
        micro.tp += c.tp;
        micro.fp += c.fp;
        micro.fn_ += c.fn_;
        if t.support.contains_key(key) {
            f1s.push(f1(*c).2);
        }
    }
    let macro_f1 = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
    (micro, macro_f1)
}

pub fn micro_macro_f1(golds: &[LabelPath], preds: &[LabelPath]) -> Result<EvalReport, EvalError> {
    if golds.len() != preds.len() {
        return Err(EvalError::LengthMismatch { gold: golds.len(), pred: preds.len() });
    }
    if golds.is_empty() {
        return Err(EvalError::Empty);
    }
    let t = tally(golds, preds);
    let (micro, macro_f1) = summarize(&t, None);
    let (micro_precision, micro_recall, micro_f1) = f1(micro);
    let depth = golds.iter().map(LabelPath::depth).max().unwrap_or(0);
    let per_level = (1..=depth)
        .map(|level| {
            let (c, m) = summarize(&t, Some(level));
            LevelScore { level, micro_f1: f1(c).2, macro_f1: m }
        })
        .collect();
    let per_class = t
        .per_class
        .iter()
        .map(|(&(level, label), &c)| {
            let (precision, recall, f) = f1(c);
            ClassScore {
                label,
                level,
                name: None,
                precision,
                recall,
                f1: f,
                support: t.support.get(&(level, label)).copied().unwrap_or(0),
            }
        })
        .collect();
    Ok(EvalReport {
        micro_precision,
        micro_recall,
        micro_f1,
        macro_f1,
        per_level,
        per_class,
        n_docs: golds.len(),
        config: serde_json::Value::Null,
    })
}

/// Per document, the candidate with the largest label overlap with gold
/// (earlier rank wins ties).
pub fn best_overlap_choice(gold: &LabelPath, candidates: &[LabelPath]) -> Option<usize> {
    let gs = labels(gold);
    let mut best: Option<(usize, usize)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let overlap = labels(c).intersection(&gs).count();
        if best.is_none_or(|(_, o)| overlap > o) {
            best = Some((i, overlap));
        }
    }
    best.map(|(i, _)| i)
}

/// Score the best-overlapping path among each document's Top-K candidates.
pub fn topk_oracle_f1(golds: &[LabelPath], topk: &[Vec<LabelPath>]) -> Result<EvalReport, EvalError> {
    if golds.len() != topk.len() {
        return Err(EvalError::LengthMismatch { gold: golds.len(), pred: topk.len() });
    }
    let chosen = golds
        .iter()
        .zip(topk)
        .enumerate()
        .map(|(i, (g, cands))| {
            best_overlap_choice(g, cands).map(|k| cands[k].clone()).ok_or(EvalError::NoCandidates(i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    micro_macro_f1(golds, &chosen)
}

impl EvalReport {
    pub fn with_names(mut self, taxonomy: &Taxonomy) -> Self {
        for c in &mut self.per_class {
            c.name = Some(taxonomy.qualified_name(c.label));
        }
        self
    }

    /// One JSON record per line: a summary record, one per level, one per class.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let summary = serde_json::json!({
            "kind": "summary",
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "n_docs": self.n_docs,
            "config": self.config,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        for l in &self.per_level {
            let mut v = serde_json::to_value(l).expect("serializable");
            v["kind"] = "level".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        for c in &self.per_class {
            let mut v = serde_json::to_value(c).expect("serializable");
            v["kind"] = "class".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "documents  {}\nmicro-F1   {:.4}  (P {:.4}, R {:.4})\nmacro-F1   {:.4}\n\nlevel  micro-F1  macro-F1\n",
            self.n_docs, self.micro_f1, self.micro_precision, self.micro_recall, self.macro_f1
        );
        for l in &self.per_level {
            out.push_str(&format!("{:>5}  {:>8.4}  {:>8.4}\n", l.level, l.micro_f1, l.macro_f1));
        }
        out
    }
}

/// A labeled line of a gold or prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub id: String,
    pub path: LabelPath,
    /// Ranked alternative paths, when the file carries `topk`.
    pub topk: Vec<LabelPath>,
}

#[derive(Deserialize)]
struct RawLabeled {
    id: Option<String>,
    labels: Vec<String>,
    #[serde(default)]
    topk: Vec<Vec<String>>,
}

/// Parse JSON Lines of `{"id", "labels": [...], "topk": [[...], ...]}`.
pub fn parse_labeled(source: &str, taxonomy: &Taxonomy) -> Result<Vec<LabeledRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| EvalError::Malformed { line: line_no, reason };
        let raw: RawLabeled = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let path = taxonomy.resolve_names(&raw.labels).map_err(|e| malformed(e.to_string()))?;
        let topk = raw
            .topk
            .iter()
            .map(|names| taxonomy.resolve_names(names).map_err(|e| malformed(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(LabeledRecord { id: raw.id.unwrap_or_else(|| format!("line-{line_no}")), path, topk });
    }
    Ok(out)
}

/// Order predictions like the gold records, matching by id.
pub fn align<'a>(gold: &'a [LabeledRecord], pred: &'a [LabeledRecord]) -> Result<Vec<(&'a LabeledRecord, &'a LabeledRecord)>, EvalError> {
    let by_id: HashMap<&str, &LabeledRecord> = pred.iter().map(|r| (r.id.as_str(), r)).collect();
    let gold_ids: BTreeSet<&str> = gold.iter().map(|r| r.id.as_str()).collect();
    if let Some(extra) = pred.iter().find(|r| !gold_ids.contains(r.id.as_str())) {
        return Err(EvalError::UnknownDocument(extra.id.clone()));
    }
    gold.iter()
        .map(|g| by_id.get(g.id.as_str()).map(|p| (g, *p)).ok_or_else(|| EvalError::MissingPrediction(g.id.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(ids: &[u32]) -> LabelPath {
        LabelPath(ids.iter().map(|&i| NodeId(i)).collect())
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![p(&[1, 3]), p(&[2, 4])];
        let r = micro_macro_f1(&g, &g).unwrap();
        assert_eq!((r.micro_f1, r.macro_f1), (1.0, 1.0));
        assert_eq!(r.per_level.len(), 2);
    }

    #[test]
    fn hand_computed_fixture() {
        // doc1 fully correct; doc2 right at level 1 only: TP=3, FP=1, FN=1.
        let gold = vec![p(&[1, 3]), p(&[1, 4])];
        let pred = vec![p(&[1, 3]), p(&[1, 5])];
        let r = micro_macro_f1(&gold, &pred).unwrap();
        assert!((r.micro_precision - 0.75).abs() < 1e-15);
        assert!((r.micro_recall - 0.75).abs() < 1e-15);
        assert!((r.micro_f1 - 0.75).abs() < 1e-15);
        // classes with gold support: 1 (F1 1), 3 (F1 1), 4 (F1 0) -> 2/3
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_level[0].micro_f1, 1.0);
        assert!((r.per_level[1].micro_f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_wrong_is_zero() {
        let r = micro_macro_f1(&[p(&[1, 3])], &[p(&[2, 4])]).unwrap();
        assert_eq!((r.micro_f1, r.macro_f1), (0.0, 0.0));
    }

    #[test]
    fn error_cases() {
        assert_eq!(micro_macro_f1(&[p(&[1])], &[]).unwrap_err(), EvalError::LengthMismatch { gold: 1, pred: 0 });
        assert_eq!(micro_macro_f1(&[], &[]).unwrap_err(), EvalError::Empty);
        assert_eq!(topk_oracle_f1(&[p(&[1])], &[vec![]]).unwrap_err(), EvalError::NoCandidates(0));
    }

    #[test]
    fn topk_k1_and_upper_bound() {
        let gold = vec![p(&[1, 3]), p(&[2, 4])];
        let top1 = vec![p(&[1, 4]), p(&[2, 4])];
        let a = topk_oracle_f1(&gold, &top1.iter().map(|x| vec![x.clone()]).collect::<Vec<_>>()).unwrap();
        assert_eq!(a, micro_macro_f1(&gold, &top1).unwrap());
        let top3 = vec![vec![p(&[2, 5]), p(&[1, 3]), p(&[1, 4])], vec![p(&[2, 4])]];
        assert_eq!(topk_oracle_f1(&gold, &top3).unwrap().micro_f1, 1.0);
    }

    #[test]
    fn ties_prefer_higher_rank() {
        let gold = p(&[1, 3]);
        assert_eq!(best_overlap_choice(&gold, &[p(&[1, 4]), p(&[1, 5]), p(&[2, 6])]), Some(0));
        assert_eq!(best_overlap_choice(&gold, &[p(&[2, 4]), p(&[1, 5])]), Some(1));
    }

    #[test]
    fn parse_and_align_files() {
        let t = Taxonomy::parse("A\tROOT\nB\tROOT\na\tA\nb\tB\n").unwrap();
        let gold = parse_labeled("{\"id\":\"1\",\"labels\":[\"A\",\"a\"]}\n{\"id\":\"2\",\"labels\":[\"B\",\"b\"]}\n", &t).unwrap();
        let pred = parse_labeled(
            "{\"id\":\"2\",\"labels\":[\"A\",\"a\"],\"topk\":[[\"A\",\"a\"],[\"B\",\"b\"]]}\n{\"id\":\"1\",\"labels\":[\"A\",\"a\"]}\n",
            &t,
        )
        .unwrap();
        let pairs = align(&gold, &pred).unwrap();
        assert_eq!(pairs[1].1.topk.len(), 2);
        assert!(matches!(parse_labeled("{\"labels\":[\"A\"]}", &t).unwrap_err(), EvalError::Malformed { line: 1, .. }));
        assert_eq!(align(&gold, &pred[..1]).unwrap_err(), EvalError::MissingPrediction("1".into()));
    }
}
