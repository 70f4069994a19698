use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{RelationInventory, Triple};
use crate::{Error, Result};

/// One sentence with its gold triples; a line of a `.jsonl` dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub text: String,
    pub triples: Vec<Triple>,
}

/// Reads line-delimited JSON records. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetInstance>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: DatasetInstance = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, instances: &[DatasetInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut f, inst)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Relations of `instances` in order of first appearance.
pub fn inventory_from(instances: &[DatasetInstance]) -> Result<RelationInventory> {
    let mut rels: Vec<String> = Vec::new();
    for t in instances.iter().flat_map(|i| &i.triples) {
        let r = t.normalized().relation;
        if !rels.contains(&r) {
            rels.push(r);
        }
    }
    RelationInventory::new(&rels)
}

fn contains_span(words: &[&str], span: &str) -> bool {
    let span: Vec<&str> = span.split_whitespace().collect();
    !span.is_empty() && words.windows(span.len()).any(|w| w == span.as_slice())
}

/// Load-time checks. Violations are reported, never fatal: distantly
/// supervised data is noisy and such instances are kept.
pub fn check_instance(instance: &DatasetInstance, inventory: &RelationInventory) -> Vec<String> {
    let text = instance.text.to_lowercase();
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut problems = Vec::new();
    for t in &instance.triples {
        let n = t.normalized();
        if !inventory.contains(&n.relation) {
            problems.push(format!("unknown relation {:?} in {t}", t.relation));
        }
        for (side, span) in [("head", &n.head), ("tail", &n.tail)] {
            if !contains_span(&words, span) {
                problems.push(format!("{side} {span:?} of {t} not found in text"));
            }
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_single_line_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_dataset(&p).unwrap().is_empty());
        fs::write(
            &p,
            r#"{"text":"alice works at acme","triples":[{"head":"alice","relation":"works at","tail":"acme"}]}"#,
        )
        .unwrap();
        let d = load_dataset(&p).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].triples[0], Triple::new("alice", "works at", "acme"));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "{\"text\":\"a\",\"triples\":[]}\n\n{oops}\n").unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip_up_to_key_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(
            &p,
            "{\"triples\":[{\"tail\":\"b\",\"relation\":\"r\",\"head\":\"a\"}],\"text\":\"a r b\"}\n{\"text\":\"x\",\"triples\":[]}\n",
        )
        .unwrap();
        let first = load_dataset(&p).unwrap();
        let q = dir.path().join("e.jsonl");
        save_dataset(&q, &first).unwrap();
        let parse_lines = |path: &Path| -> Vec<serde_json::Value> {
            fs::read_to_string(path)
                .unwrap()
                .lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect()
        };
        assert_eq!(parse_lines(&p), parse_lines(&q));
    }

    #[test]
    fn checks_flag_but_keep() {
        let inv = RelationInventory::new(&["works at"]).unwrap();
        let good = DatasetInstance {
            text: "Alice works at New York Times".into(),
            triples: vec![Triple::new("alice", "works at", "new york times")],
        };
        assert!(check_instance(&good, &inv).is_empty());
        let bad = DatasetInstance {
            text: "alice works at acme".into(),
            triples: vec![Triple::new("bob", "lives in", "acme")],
        };
        assert_eq!(check_instance(&bad, &inv).len(), 2);
    }

    #[test]
    fn inventory_in_first_seen_order() {
        let d = vec![
            DatasetInstance {
                text: String::new(),
                triples: vec![
                    Triple::new("a", "lives in", "b"),
                    Triple::new("a", "Works  At", "c"),
                ],
            },
            DatasetInstance {
                text: String::new(),
                triples: vec![Triple::new("a", "lives in", "d")],
            },
        ];
        assert_eq!(
            inventory_from(&d).unwrap().relations(),
            ["lives in", "works at"]
        );
    }
}
