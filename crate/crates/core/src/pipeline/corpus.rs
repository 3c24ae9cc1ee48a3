//! JSONL corpus files and deterministic splits.

use std::collections::HashSet;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fnv::FnvHasher;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tags::DialogueExample;

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| Error::Jsonl {
            path: path.to_owned(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Fails on the first repeated id.
pub fn check_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_owned()));
        }
    }
    Ok(())
}

/// Reads and validates a corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<DialogueExample>> {
    let corpus: Vec<DialogueExample> = read_jsonl(path)?;
    check_unique_ids(corpus.iter().map(|e| e.id.as_str()))?;
    for ex in &corpus {
        ex.validate()?;
    }
    Ok(corpus)
}

/// 64-bit FNV-1a of the id.
pub fn id_hash(id: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(id.as_bytes());
    h.finish()
}

/// Ids hashing to 0 mod 10 go to dev.
pub fn is_dev(id: &str) -> bool {
    id_hash(id).is_multiple_of(10)
}

/// Splits into (train, dev) by [`is_dev`], preserving order.
pub fn split_dev<T: Clone>(items: &[T], id: impl Fn(&T) -> &str) -> (Vec<T>, Vec<T>) {
    items.iter().cloned().partition(|x| !is_dev(id(x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(id_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(id_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn split_is_roughly_ninety_ten() {
        let ids: Vec<String> = (0..2000).map(|i| format!("ex-{i}")).collect();
        let (train, dev) = split_dev(&ids, |s| s.as_str());
        assert_eq!(train.len() + dev.len(), 2000);
        assert!((150..250).contains(&dev.len()), "{}", dev.len());
        assert_eq!(split_dev(&ids, |s| s.as_str()), (train, dev));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let ex = DialogueExample {
            id: "a".into(),
            context: vec![vec!["hi".into()]],
            source: vec!["yo".into()],
            target: None,
        };
        write_jsonl(&p, std::slice::from_ref(&ex)).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), vec![ex.clone()]);

        write_jsonl(&p, &[ex.clone(), ex]).unwrap();
        assert!(matches!(read_corpus(&p), Err(Error::DuplicateId(id)) if id == "a"));

        std::fs::write(&p, "{\"id\":\"a\"}\n\nnot json\n").unwrap();
        match read_jsonl::<serde_json::Value>(&p) {
            Err(Error::Jsonl { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
