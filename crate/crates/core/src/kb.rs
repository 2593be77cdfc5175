//! Knowledge-base construction: sources, triplet extraction, table-row
//! linearization and the text/image knowledge-base pair.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Gateway, Purpose};
use crate::index::{EmbeddingEntry, KnowledgeBase, Modality, PayloadKind};
use crate::prompts::{TemplateName, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceModality {
    Text,
    Image,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub id: String,
    pub modality: SourceModality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

fn non_blank(s: &Option<String>) -> Option<&str> {
    s.as_deref().filter(|s| !s.trim().is_empty())
}

impl Source {
    pub fn text(id: impl Into<String>, body: impl Into<String>) -> Self {
        Source {
            id: id.into(),
            modality: SourceModality::Text,
            title: None,
            caption: None,
            body: Some(body.into()),
            image_ref: None,
        }
    }

    pub fn image(id: impl Into<String>, image_ref: impl Into<String>) -> Self {
        Source {
            id: id.into(),
            modality: SourceModality::Image,
            title: None,
            caption: None,
            body: None,
            image_ref: Some(image_ref.into()),
        }
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }

    pub fn with_caption(mut self, caption: impl Into<String>) -> Self {
        self.caption = Some(caption.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::invalid("source id must be non-empty"));
        }
        match self.modality {
            SourceModality::Image if non_blank(&self.image_ref).is_none() => Err(Error::invalid(
                format!("image source `{}` has no image reference", self.id),
            )),
            SourceModality::Text | SourceModality::Table if non_blank(&self.body).is_none() => {
                Err(Error::invalid(format!("source `{}` has no body", self.id)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub source_id: String,
}

impl Triplet {
    /// Embedding payload: the three slots joined by single spaces.
    pub fn render(&self) -> String {
        format!("{} {} {}", self.subject, self.relation, self.object)
    }
}

/// Parses `(subject | relation | object)` lines. Lines that do not have that
/// shape, or have an empty slot, are skipped.
pub fn parse_triplets(response: &str, source_id: &str) -> Vec<Triplet> {
    response
        .lines()
        .filter_map(|line| {
            let line = line.trim().trim_start_matches(['-', '*', ' ']);
            let inner = line.strip_prefix('(')?.trim_end().trim_end_matches(['.', ',']).strip_suffix(')')?;
            let slots: Vec<&str> = inner.split('|').map(str::trim).collect();
            match slots.as_slice() {
                [s, r, o] if !s.is_empty() && !r.is_empty() && !o.is_empty() => Some(Triplet {
                    subject: String::from(*s),
                    relation: String::from(*r),
                    object: String::from(*o),
                    source_id: String::from(source_id),
                }),
                _ => None,
            }
        })
        .collect()
}

/// Asks the chat backend for the triplets stated in `body`.
pub fn extract_triplets(
    body: &str,
    source_id: &str,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<Vec<Triplet>> {
    if body.trim().is_empty() {
        return Err(Error::invalid("source body must be non-empty"));
    }
    let prompt = templates.render(
        TemplateName::Triplet,
        &[
            ("few_shot", templates.body(TemplateName::FewShotTriplet)),
            ("text", body),
        ],
    )?;
    let response = gateway.chat(Purpose::Triplet, prompt)?;
    Ok(parse_triplets(&response, source_id))
}

/// Turns one table row into a sentence:
/// `In <title>, <h1> is <v1>, <h2> is <v2>.` Empty cells are skipped.
pub fn linearize_table_row(headers: &[String], row: &[String], table_title: &str) -> Result<String> {
    if headers.len() != row.len() {
        return Err(Error::invalid(format!(
            "row has {} cells but the table has {} headers",
            row.len(),
            headers.len()
        )));
    }
    let mut sentence = format!("In {}", table_title.trim());
    for (h, v) in headers.iter().zip(row) {
        let v = v.trim();
        if v.is_empty() {
            continue;
        }
        sentence.push_str(", ");
        sentence.push_str(h.trim());
        sentence.push_str(" is ");
        sentence.push_str(v);
    }
    sentence.push('.');
    Ok(sentence)
}

/// The text and image knowledge bases built from one source set, plus the
/// image reference of every image source so that title/caption hits can be
/// traced back to their picture.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBases {
    pub text: KnowledgeBase,
    pub image: KnowledgeBase,
    pub image_refs: BTreeMap<String, String>,
}

impl KnowledgeBases {
    pub fn image_ref(&self, source_id: &str) -> Option<&str> {
        self.image_refs.get(source_id).map(String::as_str)
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.text.len(), self.image.len())
    }
}

struct EntrySink {
    dim: Option<usize>,
}

impl EntrySink {
    fn entry(
        &mut self,
        vector: Vec<f32>,
        payload: &str,
        source_id: &str,
        payload_kind: PayloadKind,
    ) -> Result<EmbeddingEntry> {
        match self.dim {
            None => self.dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(Error::Build(format!(
                    "embedding of `{payload}` has dimension {} but earlier embeddings have {d}",
                    vector.len()
                )))
            }
            Some(_) => {}
        }
        Ok(EmbeddingEntry {
            vector,
            payload: String::from(payload),
            source_id: String::from(source_id),
            payload_kind,
        })
    }
}

/// Builds `KB_text` (triplets from text bodies, table rows, titles, captions)
/// and `KB_image` (one pixel embedding per image source).
pub fn build_knowledge_bases(
    sources: &[Source],
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<KnowledgeBases> {
    if sources.is_empty() {
        return Err(Error::Build("no sources to index".into()));
    }
    let mut seen = BTreeMap::new();
    for s in sources {
        s.validate()?;
        if seen.insert(s.id.as_str(), ()).is_some() {
            return Err(Error::Build(format!("duplicate source id `{}`", s.id)));
        }
    }

    let mut sink = EntrySink { dim: None };
    let mut text_entries = Vec::new();
    let mut image_entries = Vec::new();
    let mut image_refs = BTreeMap::new();
    let embed_failed = |e: Error| match e {
        Error::DimensionMismatch { expected, actual } => Error::Build(format!(
            "embedding backend changed dimension from {expected} to {actual}"
        )),
        other => other,
    };

    for source in sources {
        let id = source.id.as_str();
        match source.modality {
            SourceModality::Text => {
                let body = non_blank(&source.body).unwrap_or_default();
                let triplets = extract_triplets(body, id, gateway, templates)?;
                if triplets.is_empty() {
                    // Nothing parsed: keep the passage retrievable as a whole.
                    let v = gateway.embed_text(body).map_err(embed_failed)?;
                    text_entries.push(sink.entry(v, body, id, PayloadKind::Triplet)?);
                }
                for t in triplets {
                    let payload = t.render();
                    let v = gateway.embed_text(&payload).map_err(embed_failed)?;
                    text_entries.push(sink.entry(v, &payload, id, PayloadKind::Triplet)?);
                }
            }
            SourceModality::Table => {
                // Linearized rows are already single facts.
                let body = non_blank(&source.body).unwrap_or_default();
                let v = gateway.embed_text(body).map_err(embed_failed)?;
                text_entries.push(sink.entry(v, body, id, PayloadKind::Triplet)?);
            }
            SourceModality::Image => {
                let image_ref = non_blank(&source.image_ref).unwrap_or_default();
                let v = gateway.embed_image(image_ref).map_err(embed_failed)?;
                image_entries.push(sink.entry(v, image_ref, id, PayloadKind::Image)?);
                image_refs.insert(source.id.clone(), String::from(image_ref));
            }
        }
        for (text, kind) in [(&source.title, PayloadKind::Title), (&source.caption, PayloadKind::Caption)] {
            if let Some(text) = non_blank(text) {
                let v = gateway.embed_text(text).map_err(embed_failed)?;
                text_entries.push(sink.entry(v, text, id, kind)?);
            }
        }
    }

    let dim = sink
        .dim
        .ok_or_else(|| Error::Build("sources produced no embeddings".into()))?;
    Ok(KnowledgeBases {
        text: KnowledgeBase::new(Modality::Text, dim, text_entries)?,
        image: KnowledgeBase::new(Modality::Image, dim, image_entries)?,
        image_refs,
    })
}
