//! Annotation records and their append-only JSONL log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use hticl::LabelPath;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Which aids the annotator saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    /// Label names only.
    #[default]
    Direct,
    /// Label names plus generated descriptions.
    WithDescriptions,
    /// Descriptions plus the Top-K similar labelled examples.
    RetrievalAssisted,
}

impl AnnotationMode {
    pub const ALL: [AnnotationMode; 3] =
        [AnnotationMode::Direct, AnnotationMode::WithDescriptions, AnnotationMode::RetrievalAssisted];

    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationMode::Direct => "direct",
            AnnotationMode::WithDescriptions => "with_descriptions",
            AnnotationMode::RetrievalAssisted => "retrieval_assisted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Position in the log, starting at 0.
    pub seq: u64,
    pub doc_id: String,
    pub annotator: String,
    /// Chosen label names, level 1 first.
    pub labels: Vec<String>,
    pub path: LabelPath,
    pub mode: AnnotationMode,
    /// Labels suggested to the annotator at each level (may be empty).
    #[serde(default)]
    pub suggestions: Vec<Vec<String>>,
    pub seconds: f64,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

/// Append-only log. Each record is one line; a line is fsynced before
/// [`AnnotationLog::append`] returns.
#[derive(Debug)]
pub struct AnnotationLog {
    path: PathBuf,
    file: File,
    len: u64,
    next_seq: u64,
}

impl AnnotationLog {
    /// Open (creating if needed) and replay the log. An incomplete final line,
    /// left by a crash mid-write, is cut off; a malformed complete line is an
    /// error.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<AnnotationRecord>), ServiceError> {
        let path = path.as_ref().to_path_buf();
        let io = |e| ServiceError::Io { path: path.clone(), source: e };
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path).map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;

        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            log::warn!(
                "{}: dropping {} bytes of an unterminated final record",
                path.display(),
                bytes.len() - complete
            );
            file.set_len(complete as u64).map_err(io)?;
            file.sync_all().map_err(io)?;
        }
        let mut records = Vec::new();
        for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let rec: AnnotationRecord = serde_json::from_slice(line)
                .map_err(|e| ServiceError::CorruptLog { path: path.clone(), line: i + 1, message: e.to_string() })?;
            records.push(rec);
        }
        file.seek(SeekFrom::End(0)).map_err(io)?;
        let next_seq = records.iter().map(|r| r.seq + 1).max().unwrap_or(0);
        Ok((Self { path, file, len: complete as u64, next_seq }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Stamp `record.seq`, write it and fsync. On failure the file is cut back
    /// to its previous length so later appends stay parseable.
    pub fn append(&mut self, mut record: AnnotationRecord) -> Result<AnnotationRecord, ServiceError> {
        record.seq = self.next_seq;
        let mut line = serde_json::to_vec(&record).expect("annotation records serialize");
        line.push(b'\n');
        let written = self.file.write_all(&line).and_then(|_| self.file.sync_data());
        if let Err(e) = written {
            let _ = self.file.set_len(self.len);
            return Err(ServiceError::Io { path: self.path.clone(), source: e });
        }
        self.len += line.len() as u64;
        self.next_seq += 1;
        Ok(record)
    }
}

/// Outcome of voting over one document's annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum VoteOutcome {
    /// A path chosen by more than half of the annotators.
    Majority { labels: Vec<String>, votes: usize, unanimous: bool },
    /// No path has a strict majority.
    Unresolved { tally: Vec<(Vec<String>, usize)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocVote {
    pub doc_id: String,
    pub annotators: usize,
    #[serde(flatten)]
    pub outcome: VoteOutcome,
}

/// Majority vote over full label paths, one vote per annotator (their latest
/// record counts). Documents whose annotators all disagree are reported as
/// unresolved rather than broken by an arbitrary rule.
pub fn majority_vote(records: &[AnnotationRecord]) -> Vec<DocVote> {
    let mut by_doc: BTreeMap<&str, BTreeMap<&str, &AnnotationRecord>> = BTreeMap::new();
    for r in records {
        let slot = by_doc.entry(&r.doc_id).or_default().entry(&r.annotator).or_insert(r);
        if r.seq >= slot.seq {
            *slot = r;
        }
    }
    by_doc
        .into_iter()
        .map(|(doc_id, votes)| {
            let mut tally: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in votes.values() {
                *tally.entry(&r.labels).or_default() += 1;
            }
            let n = votes.len();
            let (best, count) = tally.iter().max_by_key(|(_, &c)| c).map(|(l, &c)| (*l, c)).expect("non-empty");
            let outcome = if 2 * count > n {
                VoteOutcome::Majority { labels: best.to_vec(), votes: count, unanimous: count == n }
            } else {
                if n >= 3 && tally.len() == n {
                    log::warn!("{doc_id}: {n}-way split among {n} annotators left unresolved");
                }
                let mut tally: Vec<(Vec<String>, usize)> = tally.into_iter().map(|(l, c)| (l.to_vec(), c)).collect();
                tally.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                VoteOutcome::Unresolved { tally }
            };
            DocVote { doc_id: doc_id.to_string(), annotators: n, outcome }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use hticl::NodeId;

    fn rec(doc: &str, who: &str, labels: &[&str]) -> AnnotationRecord {
        AnnotationRecord {
            seq: 0,
            doc_id: doc.into(),
            annotator: who.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            path: LabelPath(vec![NodeId(1)]),
            mode: AnnotationMode::Direct,
            suggestions: vec![],
            seconds: 1.5,
            timestamp_ms: 7,
        }
    }

    #[test]
    fn log_round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        {
            let (mut log, recs) = AnnotationLog::open(&p).unwrap();
            assert!(recs.is_empty());
            assert_eq!(log.append(rec("d1", "a", &["x"])).unwrap().seq, 0);
            assert_eq!(log.append(rec("d2", "a", &["y"])).unwrap().seq, 1);
        }
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(br#"{"seq":2,"doc_id":"d3","annot"#).unwrap();
        drop(f);

        let (mut log, recs) = AnnotationLog::open(&p).unwrap();
        assert_eq!(recs.iter().map(|r| r.doc_id.as_str()).collect::<Vec<_>>(), ["d1", "d2"]);
        assert_eq!(log.append(rec("d3", "a", &["z"])).unwrap().seq, 2);
        drop(log);
        let (_, recs) = AnnotationLog::open(&p).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].labels, ["z"]);
    }

    #[test]
    fn malformed_complete_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        std::fs::write(&p, "not json\n").unwrap();
        assert!(matches!(AnnotationLog::open(&p), Err(ServiceError::CorruptLog { line: 1, .. })));
    }

    #[test]
    fn votes() {
        let recs = vec![
            rec("d1", "a", &["x"]),
            rec("d1", "b", &["x"]),
            rec("d1", "c", &["y"]),
            rec("d2", "a", &["x"]),
            rec("d2", "b", &["y"]),
            rec("d2", "c", &["z"]),
            rec("d3", "a", &["q"]),
        ];
        let v = majority_vote(&recs);
        assert_eq!(v[0].outcome, VoteOutcome::Majority { labels: vec!["x".into()], votes: 2, unanimous: false });
        assert!(matches!(&v[1].outcome, VoteOutcome::Unresolved { tally } if tally.len() == 3));
        assert_eq!(v[2].outcome, VoteOutcome::Majority { labels: vec!["q".into()], votes: 1, unanimous: true });
    }
}
