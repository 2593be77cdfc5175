//! Source records as stored on disk, and table expansion.
//!
//! A record is `{id, type, title?, caption?, body?, image_path?, table?}`
//! with `type` one of `text`, `image`, `table`. A table carries
//! `{headers: [...], rows: [[...], ...]}` and becomes one source per row,
//! `<id>#<row>`, whose body is the linearized row. Source files are either a
//! JSON array of records or one record per line.

use std::path::{Path, PathBuf};

use apg_core::kb::{linearize_table_row, Source, SourceModality};
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceType {
    Text,
    Image,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRecord {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: SourceType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Table>,
}

impl SourceRecord {
    /// Converts to engine sources. Relative image paths are resolved against
    /// `base` when the file exists there.
    pub fn expand(&self, base: Option<&Path>) -> std::result::Result<Vec<Source>, String> {
        let base_source = |modality| Source {
            id: self.id.clone(),
            modality,
            title: self.title.clone(),
            caption: self.caption.clone(),
            body: self.body.clone(),
            image_ref: None,
        };
        let sources = match self.kind {
            SourceType::Text => vec![base_source(SourceModality::Text)],
            SourceType::Image => {
                let path = self.image_path.as_deref().ok_or("image source needs `image_path`")?;
                let mut s = base_source(SourceModality::Image);
                s.image_ref = Some(resolve(path, base));
                vec![s]
            }
            SourceType::Table => match &self.table {
                None => vec![base_source(SourceModality::Table)],
                Some(table) => {
                    let title = self.title.as_deref().unwrap_or(&self.id);
                    table
                        .rows
                        .iter()
                        .enumerate()
                        .map(|(i, row)| {
                            let body = linearize_table_row(&table.headers, row, title).map_err(|e| e.to_string())?;
                            Ok(Source {
                                id: format!("{}#{}", self.id, i + 1),
                                modality: SourceModality::Table,
                                title: None,
                                caption: None,
                                body: Some(body),
                                image_ref: None,
                            })
                        })
                        .collect::<std::result::Result<Vec<_>, String>>()?
                }
            },
        };
        for s in &sources {
            s.validate().map_err(|e| e.to_string())?;
        }
        Ok(sources)
    }
}

fn resolve(path: &str, base: Option<&Path>) -> String {
    let p = Path::new(path);
    match base {
        Some(base) if p.is_relative() && base.join(p).exists() => base.join(p).display().to_string(),
        _ => path.to_string(),
    }
}

/// Parses either a JSON array or newline-delimited JSON objects.
pub(crate) fn parse_records<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    let json_err = |line: usize, source: serde_json::Error| Error::Json { path: path.to_path_buf(), line, source };
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| json_err(e.line(), e));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| json_err(i + 1, e)))
        .collect()
}

pub fn base_dir(path: &Path) -> Option<PathBuf> {
    path.parent().map(Path::to_path_buf)
}

/// Loads and expands a sources file.
pub fn load_sources(path: &Path) -> Result<Vec<Source>> {
    let records: Vec<SourceRecord> = parse_records(&read_to_string(path)?, path)?;
    let base = base_dir(path);
    let mut out = Vec::new();
    for r in &records {
        out.extend(r.expand(base.as_deref()).map_err(|reason| Error::schema(path, &r.id, reason))?);
    }
    Ok(out)
}
