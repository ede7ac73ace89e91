//! JSONL corpora: one `{"id", "segments", "gold_for", "meta"}` object per line.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{Context, Result};
use retap_core::{ModalityInput, Role, Segment};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub segments: Vec<Segment>,
    /// Queries this record answers (evaluation only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_for: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl CorpusRecord {
    pub fn input(&self, role: Role) -> ModalityInput {
        ModalityInput { segments: self.segments.clone(), role }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    /// Rejected lines; loading continues past them.
    pub errors: Vec<LineError>,
}

impl Corpus {
    pub fn inputs(&self, role: Role) -> Vec<(String, ModalityInput)> {
        self.records.iter().map(|r| (r.id.clone(), r.input(role))).collect()
    }

    /// Query id -> ids of the records listing it in `gold_for`.
    pub fn gold(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut gold: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &self.records {
            for q in &r.gold_for {
                gold.entry(q.clone()).or_default().insert(r.id.clone());
            }
        }
        gold
    }
}

fn parse_line(line: &str, seen: &BTreeSet<String>) -> Result<CorpusRecord, String> {
    let record: CorpusRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if record.id.is_empty() {
        return Err("empty id".into());
    }
    if seen.contains(&record.id) {
        return Err(format!("duplicate id '{}'", record.id));
    }
    record.input(Role::Query).validate().map_err(|e| format!("record '{}': {e}", record.id))?;
    Ok(record)
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, &seen) {
            Ok(record) => {
                seen.insert(record.id.clone());
                corpus.records.push(record);
            }
            Err(message) => corpus.errors.push(LineError { line: i + 1, message }),
        }
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    parse_corpus(BufReader::new(file)).with_context(|| format!("reading corpus {}", path.display()))
}

pub fn write_corpus(mut w: impl Write, records: &[CorpusRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    write_corpus(&mut w, records)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_lines_are_reported_not_fatal() {
        let text = r#"{"id":"a","segments":[{"kind":"text","payload":"one"}]}

{"segments":[{"kind":"text","payload":"no id"}]}
{"id":"a","segments":[{"kind":"text","payload":"dup"}]}
not json
{"id":"b","segments":[{"kind":"image","payload":"img/b.png"}],"gold_for":["q1"],"meta":{"src":"x"}}
{"id":"c","segments":[]}
"#;
        let c = parse_corpus(text.as_bytes()).unwrap();
        assert_eq!(c.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(c.errors.iter().map(|e| e.line).collect::<Vec<_>>(), [3, 4, 5, 7]);
        assert!(c.errors[0].message.contains("id"));
        assert_eq!(c.gold()["q1"], BTreeSet::from(["b".to_string()]));
    }

    #[test]
    fn empty_input() {
        let c = parse_corpus(&b""[..]).unwrap();
        assert!(c.records.is_empty() && c.errors.is_empty());
    }
}
