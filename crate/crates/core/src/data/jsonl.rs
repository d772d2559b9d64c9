//! JSONL corpora: one `{"task", "input", "target"}` object per line.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Example, PAD, UNK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlRecord {
    pub task: String,
    pub input: String,
    pub target: String,
}

pub const NEWLINE: &str = "\n";

/// Whitespace tokens; line breaks survive as a [`NEWLINE`] token so that
/// segment-level metrics can split on them.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push(NEWLINE);
        }
        out.extend(line.split_whitespace());
    }
    out
}

/// Frequency-ordered vocabulary with `PAD = 0` and `UNK = 1` reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Most frequent first; ties broken lexicographically.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = ["<pad>", "<unk>"]
            .into_iter()
            .chain(ranked.into_iter().map(|(w, _)| w))
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn newline_id(&self) -> Option<u32> {
        self.index.get(NEWLINE).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).into_iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&i| match i {
                PAD => "<pad>",
                _ => self.tokens.get(i as usize).map_or("<unk>", String::as_str),
            })
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Tasks of one JSONL file, indexed by first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedTasks {
    pub vocabulary: Vocabulary,
    pub task_names: Vec<String>,
    pub examples: Vec<Vec<Example>>,
    pub records: Vec<JsonlRecord>,
}

/// Reads a JSONL corpus. Without a vocabulary one is built from this file;
/// with one, unseen words map to `UNK`.
pub fn load_jsonl(path: &Path, vocabulary: Option<&Vocabulary>) -> Result<LoadedTasks> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(line).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("{} has no records", path.display())));
    }
    let vocabulary = match vocabulary {
        Some(v) => v.clone(),
        None => Vocabulary::build(
            records
                .iter()
                .flat_map(|r| tokenize(&r.input).into_iter().chain(tokenize(&r.target))),
        ),
    };
    let mut task_names: Vec<String> = Vec::new();
    let mut examples: Vec<Vec<Example>> = Vec::new();
    for r in &records {
        let t = match task_names.iter().position(|n| *n == r.task) {
            Some(t) => t,
            None => {
                task_names.push(r.task.clone());
                examples.push(Vec::new());
                task_names.len() - 1
            }
        };
        examples[t].push(Example {
            tokens: vocabulary.encode(&r.input),
            target: vocabulary.encode(&r.target),
        });
    }
    Ok(LoadedTasks {
        vocabulary,
        task_names,
        examples,
        records,
    })
}

pub fn write_jsonl(path: &Path, records: &[JsonlRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
