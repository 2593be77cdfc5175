//! Answer metrics, report aggregation and the modality-gap diagnostic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::CallLedger;
use crate::index::{dot, l2_norm, KnowledgeBase};
use crate::kb::Source;

/// Labels for manual error annotation of wrong answers.
pub mod error_category {
    pub const INCORRECT: &str = "Incorrect";
    pub const MOSTLY_CORRECT: &str = "Mostly Correct";
    pub const INCOMPLETE: &str = "Incomplete";
    pub const ABBREVIATION: &str = "Abbreviation";
    pub const OVERLAP: &str = "Overlap";
    pub const REDUNDANT: &str = "Redundant";

    pub const ALL: [&str; 6] = [INCORRECT, MOSTLY_CORRECT, INCOMPLETE, ABBREVIATION, OVERLAP, REDUNDANT];
}

/// Lowercases, drops punctuation and the articles a/an/the, and collapses
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(s: &str) -> Vec<String> {
    normalize_answer(s).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let p = tokens(prediction);
    let g = tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut bag: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *bag.entry(t).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(n) = bag.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best exact match over the gold answers.
pub fn em_score<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    let p = normalize_answer(prediction);
    let hit = golds.iter().any(|g| normalize_answer(g.as_ref()) == p);
    if hit { 1.0 } else { 0.0 }
}

/// Best token-overlap F1 over the gold answers.
pub fn f1_score<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    golds
        .iter()
        .map(|g| f1_single(prediction, g.as_ref()))
        .fold(0.0, f64::max)
}

/// Fraction of keywords whose normalized form occurs in the normalized
/// prediction.
pub fn keyword_accuracy<S: AsRef<str>>(prediction: &str, keywords: &[S]) -> Result<f64> {
    if keywords.is_empty() {
        return Err(Error::invalid("keyword list must be non-empty"));
    }
    let p = format!(" {} ", normalize_answer(prediction));
    let hits = keywords
        .iter()
        .filter(|k| {
            let k = normalize_answer(k.as_ref());
            !k.is_empty() && p.contains(&format!(" {k} "))
        })
        .count();
    Ok(hits as f64 / keywords.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hop {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    /// Free-form modality tag, e.g. `text`, `image`, `table`, `multi`.
    pub modality: String,
    pub hop: Hop,
    pub sources: Vec<Source>,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("example `{}`: {what}", self.id)));
        if self.id.trim().is_empty() {
            return Err(Error::invalid("example id must be non-empty"));
        }
        if self.question.trim().is_empty() {
            return bad("question is empty");
        }
        if self.answers.iter().all(|a| a.trim().is_empty()) {
            return bad("needs at least one gold answer");
        }
        if self.sources.is_empty() {
            return bad("needs at least one source");
        }
        if self.keywords.as_ref().is_some_and(|k| k.is_empty()) {
            return bad("keyword list is empty");
        }
        for s in &self.sources {
            s.validate().or_else(|e| bad(&e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub modality: String,
    pub hop: Hop,
    pub prediction: String,
    pub em: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_category: Option<String>,
}

impl EvalRow {
    pub fn scored(example: &Example, prediction: &str) -> Self {
        EvalRow {
            id: example.id.clone(),
            modality: example.modality.clone(),
            hop: example.hop,
            prediction: prediction.to_string(),
            em: em_score(prediction, &example.answers),
            f1: f1_score(prediction, &example.answers),
            qa_acc: example.keywords.as_ref().and_then(|k| keyword_accuracy(prediction, k).ok()),
            error: None,
            error_category: None,
        }
    }

    /// A failed example scores zero and keeps the diagnostic.
    pub fn failed(example: &Example, diagnostic: &str) -> Self {
        EvalRow {
            id: example.id.clone(),
            modality: example.modality.clone(),
            hop: example.hop,
            prediction: String::new(),
            em: 0.0,
            f1: 0.0,
            qa_acc: example.keywords.as_ref().map(|_| 0.0),
            error: Some(diagnostic.to_string()),
            error_category: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    /// Mean over the rows that carry keywords.
    pub qa_acc: Option<f64>,
}

impl Aggregate {
    fn of<'r>(rows: impl IntoIterator<Item = &'r EvalRow>) -> Self {
        let (mut count, mut em, mut f1, mut acc, mut acc_n) = (0usize, 0.0, 0.0, 0.0, 0usize);
        for r in rows {
            count += 1;
            em += r.em;
            f1 += r.f1;
            if let Some(a) = r.qa_acc {
                acc += a;
                acc_n += 1;
            }
        }
        if count == 0 {
            return Aggregate::default();
        }
        Aggregate {
            count,
            em: em / count as f64,
            f1: f1 / count as f64,
            qa_acc: (acc_n > 0).then(|| acc / acc_n as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub overall: Aggregate,
    pub by_modality: BTreeMap<String, Aggregate>,
    pub by_hop: BTreeMap<Hop, Aggregate>,
    pub ledger: CallLedger,
    pub error_categories: Vec<String>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, ledger: CallLedger) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot report on an empty dataset"));
        }
        let mut modalities: BTreeMap<String, Vec<&EvalRow>> = BTreeMap::new();
        let mut hops: BTreeMap<Hop, Vec<&EvalRow>> = BTreeMap::new();
        for r in &rows {
            modalities.entry(r.modality.clone()).or_default().push(r);
            hops.entry(r.hop).or_default().push(r);
        }
        let by_modality = modalities.into_iter().map(|(k, v)| (k, Aggregate::of(v))).collect();
        let by_hop = hops.into_iter().map(|(k, v)| (k, Aggregate::of(v))).collect();
        Ok(EvalReport {
            overall: Aggregate::of(&rows),
            rows,
            by_modality,
            by_hop,
            ledger,
            error_categories: error_category::ALL.iter().map(|c| c.to_string()).collect(),
        })
    }
}

/// Indices into the text and image knowledge bases: a caption, a text entry
/// paired with it, and the image the caption describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapPair {
    pub text: usize,
    pub peer_text: usize,
    pub image: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub text_text: Vec<f64>,
    pub text_image: Vec<f64>,
    pub text_text_mean: f64,
    pub text_image_mean: f64,
}

impl GapReport {
    /// Two-column CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("text_text,text_image\n");
        for (a, b) in self.text_text.iter().zip(&self.text_image) {
            out.push_str(&format!("{a},{b}\n"));
        }
        out
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 { 0.0 } else { dot(a, b) / n }
}

/// Cosine similarities of caption/text pairs versus caption/image pairs.
pub fn modality_gap_report(kb_text: &KnowledgeBase, kb_image: &KnowledgeBase, pairs: &[GapPair]) -> Result<GapReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("modality-gap report needs at least one pair"));
    }
    let text = kb_text.entries();
    let image = kb_image.entries();
    let mut text_text = Vec::with_capacity(pairs.len());
    let mut text_image = Vec::with_capacity(pairs.len());
    for p in pairs {
        let get = |entries: &[crate::index::EmbeddingEntry], i: usize, what: &str| {
            entries
                .get(i)
                .map(|e| e.vector.clone())
                .ok_or_else(|| Error::invalid(format!("{what} index {i} out of range")))
        };
        let t = get(text, p.text, "text")?;
        text_text.push(cosine(&t, &get(text, p.peer_text, "text")?));
        text_image.push(cosine(&t, &get(image, p.image, "image")?));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(GapReport {
        text_text_mean: mean(&text_text),
        text_image_mean: mean(&text_image),
        text_text,
        text_image,
    })
}
