//! JSONL sample records and the synthetic corpora.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One line of a dataset file. Fields other than the known ones are kept in
/// `extra` and written back unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SampleRecord {
    pub fn restoration(id: impl Into<String>, context: impl Into<String>) -> Self {
        SampleRecord {
            id: id.into(),
            context: context.into(),
            question: None,
            answers: None,
            extra: Map::new(),
        }
    }

    /// Question and first answer, or a data error naming the record.
    pub fn qa(&self) -> Result<(&str, &str)> {
        let q = self
            .question
            .as_deref()
            .ok_or_else(|| Error::Data(format!("record {} has no question", self.id)))?;
        let a = self
            .answers
            .as_ref()
            .and_then(|a| a.first())
            .ok_or_else(|| Error::Data(format!("record {} has no answers", self.id)))?;
        Ok((q, a))
    }
}

/// Joins several documents into one context field.
pub fn join_documents<S: AsRef<str>>(docs: &[S], separator: &str) -> String {
    docs.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(separator)
}

fn parse_line(line: &str, lineno: usize) -> Result<SampleRecord> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: lineno,
        message: e.to_string(),
    })?;
    let Value::Object(obj) = &value else {
        return Err(Error::Malformed {
            line: lineno,
            message: "expected a JSON object".into(),
        });
    };
    for field in ["id", "context"] {
        if !obj.get(field).is_some_and(Value::is_string) {
            return Err(Error::Schema {
                line: lineno,
                field: field.into(),
            });
        }
    }
    if obj.get("question").is_some_and(|q| !q.is_string() && !q.is_null()) {
        return Err(Error::Schema {
            line: lineno,
            field: "question".into(),
        });
    }
    serde_json::from_value(value).map_err(|_| Error::Schema {
        line: lineno,
        field: "answers".into(),
    })
}

pub fn parse_dataset(text: &str) -> Result<Vec<SampleRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(parse_line(&line, i + 1)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for row in rows {
        serde_json::to_writer(&mut file, row)?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(path: &Path, records: &[SampleRecord]) -> Result<()> {
    write_jsonl(path, records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Restoration,
    KvQa,
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restoration" => Ok(CorpusKind::Restoration),
            "kv-qa" => Ok(CorpusKind::KvQa),
            other => Err(Error::Usage(format!("unknown corpus kind `{other}`"))),
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    if rng.gen_bool(0.3) {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
    }
    w
}

/// Space-separated pseudo-words cut to exactly `len` bytes, never ending in
/// a space.
pub fn restoration_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut s = String::new();
    while s.len() < len {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(&word(rng));
    }
    s.truncate(len);
    if s.ends_with(' ') {
        s.pop();
        s.push(*VOWELS.choose(rng).unwrap() as char);
    }
    s
}

/// Keys are two lowercase letters, values three digits.
fn kv_record(rng: &mut ChaCha8Rng, id: String, pairs: usize) -> SampleRecord {
    let mut keys = HashSet::new();
    let mut entries = Vec::with_capacity(pairs);
    while entries.len() < pairs {
        let k: String = (0..2).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        if keys.insert(k.clone()) {
            let v = format!("{:03}", rng.gen_range(0..1000));
            entries.push((k, v));
        }
    }
    let (key, value) = entries.choose(rng).unwrap().clone();
    let context = entries.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
    SampleRecord {
        id,
        context,
        question: Some(format!("{key}?")),
        answers: Some(vec![value]),
        extra: Map::new(),
    }
}

/// Seed-determined synthetic corpus. For restoration `len` is the context
/// length in bytes; for kv-qa it is the number of key-value pairs.
pub fn generate_synthetic_dataset(kind: CorpusKind, count: usize, len: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    if count == 0 || len == 0 {
        return Err(Error::Usage("count and len must be at least 1".into()));
    }
    if kind == CorpusKind::KvQa && len > 26 * 26 {
        return Err(Error::Usage(format!("at most {} distinct keys per context", 26 * 26)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| match kind {
            CorpusKind::Restoration => SampleRecord::restoration(format!("r{i:05}"), restoration_text(&mut rng, len)),
            CorpusKind::KvQa => kv_record(&mut rng, format!("kv{i:05}"), len),
        })
        .collect())
}

/// A kv-qa train/test pair whose test contexts never occur in training.
pub fn kv_qa_split(train: usize, test: usize, pairs: usize, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let train_set = generate_synthetic_dataset(CorpusKind::KvQa, train, pairs, seed)?;
    let seen: HashSet<&str> = train_set.iter().map(|r| r.context.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut test_set = Vec::with_capacity(test);
    while test_set.len() < test {
        let r = kv_record(&mut rng, format!("kvt{:05}", test_set.len()), pairs);
        if !seen.contains(r.context.as_str()) {
            test_set.push(r);
        }
    }
    Ok((train_set, test_set))
}
