use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tasks::{Example, TaskSuite};
use crate::error::{Error, Result};

pub const META_FILE: &str = "dataset.meta.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task_id: usize,
    input: String,
    target: String,
    fingerprint: String,
}

/// One JSON object per line: `{task_id, input, target, fingerprint}`.
pub fn write_jsonl(path: &Path, examples: &[Example], suite: &TaskSuite) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let fingerprint = suite.fingerprint();
    for ex in examples {
        let rec = Record {
            task_id: ex.task_id,
            input: ex.raw_input.clone(),
            target: ex.raw_target.clone(),
            fingerprint: fingerprint.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads examples back, re-tokenizing each line. Blank lines are skipped; a
/// line that fails to parse, tokenize, or carries another suite's fingerprint
/// is reported with its 1-based line number.
pub fn read_jsonl(path: &Path, suite: &TaskSuite, max_seq_len: usize) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let fingerprint = suite.fingerprint();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse { line: line_no, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if rec.fingerprint != fingerprint {
            return Err(parse(format!(
                "fingerprint {} does not match task suite {fingerprint}",
                rec.fingerprint
            )));
        }
        if rec.task_id >= suite.specs.len() {
            return Err(parse(format!("unknown task id {}", rec.task_id)));
        }
        let ex = suite
            .encode_pair(rec.task_id, &rec.input, &rec.target, max_seq_len)
            .map_err(|e| parse(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

/// Sidecar describing a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    pub fingerprint: String,
    pub max_seq_len: usize,
    /// split → task name → count
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub prompts: Vec<String>,
}

impl DatasetMeta {
    pub fn describe(suite: &TaskSuite, seed: u64, max_seq_len: usize, splits: &[(&str, &[Example])]) -> Self {
        let counts = splits
            .iter()
            .map(|(name, exs)| {
                let per_task = suite
                    .specs
                    .iter()
                    .enumerate()
                    .map(|(id, s)| {
                        (
                            s.task_type.name().to_string(),
                            exs.iter().filter(|e| e.task_id == id).count(),
                        )
                    })
                    .collect();
                (name.to_string(), per_task)
            })
            .collect();
        DatasetMeta {
            seed,
            fingerprint: suite.fingerprint(),
            max_seq_len,
            counts,
            prompts: suite.specs.iter().map(|s| s.prompt_prefix.clone()).collect(),
        }
    }
}

/// Writes `{split}.jsonl` for each split plus `dataset.meta.json`.
pub fn write_dataset(dir: &Path, suite: &TaskSuite, meta: &DatasetMeta, splits: &[(&str, &[Example])]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, exs) in splits {
        write_jsonl(&dir.join(format!("{name}.jsonl")), exs, suite)?;
    }
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_split(dir: &Path, split: &str, suite: &TaskSuite, max_seq_len: usize) -> Result<Vec<Example>> {
    read_jsonl(&dir.join(format!("{split}.jsonl")), suite, max_seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tasks::generate_dataset;

    #[test]
    fn round_trip_thousand_examples() {
        let suite = TaskSuite::default();
        let exs = generate_dataset(&suite, 9, 334, 64).unwrap();
        assert!(exs.len() >= 1000);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, &exs, &suite).unwrap();
        assert_eq!(read_jsonl(&p, &suite, 64).unwrap(), exs);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "").unwrap();
        assert!(read_jsonl(&p, &TaskSuite::default(), 64).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let suite = TaskSuite::default();
        let exs = generate_dataset(&suite, 2, 2, 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        write_jsonl(&p, &exs, &suite).unwrap();
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("{\"task_id\": 0, \"input\": \"classify: po");
        fs::write(&p, text).unwrap();
        match read_jsonl(&p, &suite, 64) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, exs.len() + 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_reported_as_such() {
        let err = read_jsonl(Path::new("/nonexistent/x.jsonl"), &TaskSuite::default(), 64).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
