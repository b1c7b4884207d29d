//! The JSONL instance format.
//!
//! One object per line with fields `id` (string), `features` (array of
//! strings) and `labels` (nonempty array of strings). Corpora arrive
//! pre-featurized; no text processing happens here.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Instance, LabelVocab, DEFAULT_NONE_NAME};

/// Parses instances from a JSONL reader. Malformed lines abort with their
/// line number; blank lines are skipped.
pub fn read_instances<R: BufRead>(reader: R, source: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if inst.labels.is_empty() {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: "labels array is empty".to_string(),
            });
        }
        out.push(inst);
    }
    Ok(out)
}

/// Writes instances as JSONL.
pub fn write_instances<W: Write>(mut writer: W, data: &[Instance], sink: &str) -> Result<()> {
    for inst in data {
        let line = serde_json::to_string(inst)?;
        writeln!(writer, "{line}").map_err(|e| Error::io(sink, e))?;
    }
    Ok(())
}

/// Loads instances without building a vocabulary.
pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(name.clone(), e))?;
    read_instances(BufReader::new(file), &name)
}

/// Builds the label vocabulary of a dataset: the union of all observed
/// labels and the NONE name, sorted, with `none_index` pointing at NONE.
pub fn build_vocab(data: &[Instance], none_name: &str) -> Result<LabelVocab> {
    let mut names: BTreeSet<&str> = data
        .iter()
        .flat_map(|inst| inst.labels.iter().map(|l| l.as_str()))
        .collect();
    names.insert(none_name);
    let labels: Vec<String> = names.into_iter().map(String::from).collect();
    let none_index = labels
        .iter()
        .position(|l| l == none_name)
        .expect("NONE was inserted");
    LabelVocab::new(labels, none_index)
}

/// Loads a JSONL dataset and derives its vocabulary (NONE named `"NONE"`).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Vec<Instance>, LabelVocab)> {
    load_dataset_with_none(path, DEFAULT_NONE_NAME)
}

/// Loads a JSONL dataset with a configured NONE label name.
pub fn load_dataset_with_none(
    path: impl AsRef<Path>,
    none_name: &str,
) -> Result<(Vec<Instance>, LabelVocab)> {
    let data = load_instances(path)?;
    let vocab = build_vocab(&data, none_name)?;
    Ok((data, vocab))
}

/// Saves a dataset as JSONL, overwriting any existing file.
pub fn save_dataset(path: impl AsRef<Path>, data: &[Instance]) -> Result<()> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut writer = BufWriter::new(file);
    write_instances(&mut writer, data, &name)?;
    writer.flush().map_err(|e| Error::io(name, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_well_formed_lines() {
        let text = r#"{"id":"1","features":["f1"],"labels":["A"]}
{"id":"2","features":[],"labels":["NONE","B"]}
"#;
        let data = read_instances(text.as_bytes(), "test").unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].id, "1");
        assert_eq!(data[0].features, vec!["f1".to_string()]);
        assert_eq!(data[1].labels, vec!["NONE".to_string(), "B".to_string()]);
    }

    #[test]
    fn missing_field_names_the_line() {
        let text = r#"{"id":"1","features":["f1"]}"#;
        let err = read_instances(text.as_bytes(), "corpus.jsonl").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("corpus.jsonl:1"), "{msg}");
        assert!(msg.contains("labels"), "{msg}");
    }

    #[test]
    fn empty_labels_array_is_rejected_with_line_number() {
        let text = "{\"id\":\"1\",\"features\":[],\"labels\":[\"A\"]}\n{\"id\":\"2\",\"features\":[],\"labels\":[]}";
        let err = read_instances(text.as_bytes(), "x").unwrap_err();
        assert!(err.to_string().contains("x:2"), "{err}");
    }

    #[test]
    fn vocab_includes_none_and_sorts_labels() {
        let data = read_instances(
            r#"{"id":"1","features":[],"labels":["B","A"]}"#.as_bytes(),
            "t",
        )
        .unwrap();
        let vocab = build_vocab(&data, "NONE").unwrap();
        assert_eq!(vocab.labels(), &["A", "B", "NONE"]);
        assert_eq!(vocab.none_name(), "NONE");
        assert_eq!(vocab.none_index(), 2);
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let data = vec![
            Instance::new("a", vec!["f1".into(), "f1".into()], vec!["R1".into()]).unwrap(),
            Instance::new("b", vec![], vec!["NONE".into(), "R2".into()]).unwrap(),
            Instance::new("weird \"id\"", vec!["füt,ure".into()], vec!["R1".into()]).unwrap(),
        ];
        save_dataset(&path, &data).unwrap();
        let (loaded, vocab) = load_dataset(&path).unwrap();
        assert_eq!(loaded, data);
        assert_eq!(vocab.labels(), &["NONE", "R1", "R2"]);

        // Loading what was saved again reproduces both exactly.
        let path2 = dir.path().join("copy.jsonl");
        save_dataset(&path2, &loaded).unwrap();
        let (again, vocab2) = load_dataset(&path2).unwrap();
        assert_eq!(again, loaded);
        assert_eq!(vocab2, vocab);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_instances("/nonexistent/nowhere.jsonl").unwrap_err();
        assert!(err.to_string().contains("nowhere.jsonl"));
    }
}
