use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// A document waiting for annotation. Extra fields on the input line (such as
/// gold labels) are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub text: String,
}

/// Parse a JSONL task pool. Blank lines are skipped; ids must be unique and
/// non-empty.
pub fn parse_tasks(source: &str) -> Result<Vec<Task>, ServiceError> {
    let mut seen = HashSet::new();
    let mut tasks = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task =
            serde_json::from_str(line).map_err(|e| ServiceError::Tasks { line: line_no, message: e.to_string() })?;
        if task.id.is_empty() {
            return Err(ServiceError::Tasks { line: line_no, message: "empty id".into() });
        }
        if !seen.insert(task.id.clone()) {
            return Err(ServiceError::Tasks { line: line_no, message: format!("duplicate id `{}`", task.id) });
        }
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let t = parse_tasks("{\"id\":\"a\",\"text\":\"x\",\"labels\":[\"q\"]}\n\n{\"id\":\"b\",\"text\":\"y\"}\n").unwrap();
        assert_eq!(t.len(), 2);
        assert!(matches!(parse_tasks("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}"), Err(ServiceError::Tasks { line: 2, .. })));
        assert!(parse_tasks("{\"id\":\"\",\"text\":\"x\"}").is_err());
        assert!(parse_tasks("[1,2]").is_err());
    }
}
