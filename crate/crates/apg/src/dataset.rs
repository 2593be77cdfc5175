//! Evaluation datasets: one JSON record per line,
//! `{id, question, answers, keywords?, modality, hop, sources}` with sources
//! in the format of [`crate::sources`].

use std::path::Path;

use apg_core::eval::{Example, Hop};
use serde::Deserialize;
use serde_json::Value;

use crate::error::{read_to_string, Error, Result};
use crate::sources::{base_dir, SourceRecord};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    question: String,
    answers: Vec<String>,
    #[serde(default)]
    keywords: Option<Vec<String>>,
    modality: String,
    hop: Hop,
    sources: Vec<SourceRecord>,
}

fn record_id(v: &Value, line: usize) -> String {
    match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
        None => format!("line {line}"),
    }
}

/// Loads every example, expanding tables into one source per row.
pub fn load_dataset(path: &Path) -> Result<Vec<Example>> {
    let text = read_to_string(path)?;
    let base = base_dir(path);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = i + 1;
        let value: Value = serde_json::from_str(line)
            .map_err(|source| Error::Json { path: path.to_path_buf(), line: line_no, source })?;
        let id = record_id(&value, line_no);
        let record: Record = serde_json::from_value(value).map_err(|e| Error::schema(path, &id, e.to_string()))?;
        let mut sources = Vec::new();
        for s in &record.sources {
            let expanded = s
                .expand(base.as_deref())
                .map_err(|r| Error::schema(path, &id, format!("source `{}`: {r}", s.id)))?;
            sources.extend(expanded);
        }
        let example = Example {
            id: record.id,
            question: record.question,
            answers: record.answers,
            keywords: record.keywords,
            modality: record.modality,
            hop: record.hop,
            sources,
        };
        example.validate().map_err(|e| Error::schema(path, &id, e.to_string()))?;
        out.push(example);
    }
    Ok(out)
}
