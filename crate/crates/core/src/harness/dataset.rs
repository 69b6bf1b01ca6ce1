//! Question dataset ingestion: JSON-lines, one item per line. Malformed
//! lines are collected and reported together with their line numbers so a
//! bad file is fixed in one pass, not one error at a time.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::TopicLabel;
use crate::harness::HarnessError;

/// One multiple-choice question. The answer is the full text of the correct
/// choice, which must appear in `choices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer: String,
    pub topic: TopicLabel,
}

impl QaItem {
    /// Index of the correct choice. Valid for any item that passed loading.
    pub fn answer_index(&self) -> usize {
        self.choices
            .iter()
            .position(|c| c == &self.answer)
            .expect("loader enforces answer membership")
    }
}

/// All malformed lines of one file, 1-based line numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct MalformedLines(pub Vec<(usize, String)>);

impl fmt::Display for MalformedLines {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (line, msg)) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "line {line}: {msg}")?;
        }
        Ok(())
    }
}

fn check_item(item: &QaItem) -> Result<(), String> {
    if item.id.trim().is_empty() {
        return Err("empty id".to_string());
    }
    if item.question.trim().is_empty() {
        return Err("empty question".to_string());
    }
    if item.choices.is_empty() {
        return Err("no choices".to_string());
    }
    if !item.choices.contains(&item.answer) {
        return Err(format!("answer {:?} is not one of the choices", item.answer));
    }
    Ok(())
}

/// Parses a JSON-lines dataset. Every malformed line is an error; all are
/// reported at once. An empty file is an empty dataset, with a warning.
pub fn load_dataset(path: &Path) -> Result<Vec<QaItem>, HarnessError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|source| HarnessError::DatasetIo { path: path.to_path_buf(), source })?;
    let mut items = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            bad.push((lineno, "blank line".to_string()));
            continue;
        }
        match serde_json::from_str::<QaItem>(line) {
            Ok(item) => match check_item(&item) {
                Ok(()) => items.push(item),
                Err(msg) => bad.push((lineno, msg)),
            },
            Err(e) => bad.push((lineno, e.to_string())),
        }
    }
    if !bad.is_empty() {
        return Err(HarnessError::DatasetMalformed(MalformedLines(bad)));
    }
    if items.is_empty() {
        log::warn!("dataset {} is empty", path.display());
    }
    Ok(items)
}
