//! The retrieval pipeline behind Retrieval nodes.
//!
//! An instruction is split into a text part and an image part; the text part
//! yields key phrases, the image part yields either identifiers of a specific
//! image (searched in the text knowledge base through titles and captions) or
//! descriptive phrases (searched in the image knowledge base). Every hit within
//! the configured radius is examined by the chat or vision backend and the
//! relevant findings are condensed into the node content.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Gateway, Purpose, VisionRequest};
use crate::index::{Candidate, PayloadKind};
use crate::kb::KnowledgeBases;
use crate::prompts::{TemplateName, TemplateSet};
use crate::text::{last_field, parse_string_list};

pub const DEFAULT_RADIUS_TEXT: f64 = 0.9;
pub const DEFAULT_RADIUS_IMAGE: f64 = 1.1;
pub const DEFAULT_CANDIDATE_CAP: usize = 20;
/// First token of an examination reply that rejects the candidate.
pub const IRRELEVANT: &str = "IRRELEVANT";
pub const NO_RESULTS_PREFIX: &str = "No results found for: ";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub radius_text: f64,
    pub radius_image: f64,
    pub candidate_cap: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            radius_text: DEFAULT_RADIUS_TEXT,
            radius_image: DEFAULT_RADIUS_IMAGE,
            candidate_cap: DEFAULT_CANDIDATE_CAP,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_text >= 0.0 && self.radius_image >= 0.0) {
            return Err(Error::invalid("retrieval radii must be non-negative"));
        }
        if self.candidate_cap == 0 {
            return Err(Error::invalid("candidate cap must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageMode {
    None,
    Targeted,
    Descriptive,
}

impl ImageMode {
    fn purpose(self) -> Option<Purpose> {
        match self {
            ImageMode::None => None,
            ImageMode::Targeted => Some(Purpose::TgtImage),
            ImageMode::Descriptive => Some(Purpose::DescrImage),
        }
    }

    fn other(self) -> ImageMode {
        match self {
            ImageMode::Targeted => ImageMode::Descriptive,
            ImageMode::Descriptive => ImageMode::Targeted,
            ImageMode::None => ImageMode::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposedInstruction {
    pub text_part: Option<String>,
    pub image_part: Option<String>,
    pub image_mode: ImageMode,
}

impl DecomposedInstruction {
    pub fn text_only(text: &str) -> Self {
        DecomposedInstruction {
            text_part: Some(text.to_string()),
            image_part: None,
            image_mode: ImageMode::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub decomposed: DecomposedInstruction,
    /// Chat calls spent (1, or 2 after a retry).
    pub calls: u64,
    /// The reply never parsed and the whole instruction became the text part.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePlan {
    pub mode: ImageMode,
    pub queries: Vec<String>,
    pub exam_question: String,
}

impl ImagePlan {
    /// No image was named (targeted) or no description found (descriptive):
    /// the instruction was probably classified into the wrong mode.
    pub fn needs_mode_switch(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    /// Key phrases plus, in targeted mode, the image identifiers.
    pub text_queries: Vec<String>,
    pub image_queries: Vec<String>,
    pub exam_question: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExamChannel {
    Text,
    Vision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExaminationResult {
    pub source_id: String,
    pub payload: String,
    pub channel: ExamChannel,
    pub finding: String,
    pub relevant: bool,
    /// False when the request never reached the backend (unresolvable image).
    #[serde(default = "yes")]
    pub dispatched: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamCounts {
    pub text: u64,
    pub vision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub content: String,
    pub candidates_examined: ExamCounts,
    /// No relevant finding survived; `content` is the no-results sentinel or
    /// a diagnostic.
    pub empty: bool,
}

/// Everything a retrieval did, in enough detail to recount its model calls.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub instruction: String,
    pub decomposition: Option<Decomposition>,
    pub extract_called: bool,
    /// Mode of each image-planning call, in order. Two entries mean the first
    /// mode produced no queries and the other mode was tried.
    pub image_plan_modes: Vec<ImageMode>,
    pub queries: QuerySet,
    pub embedded_queries: u64,
    pub candidates: Vec<Candidate>,
    pub verdicts: Vec<ExaminationResult>,
    pub aggregated: bool,
    pub content: String,
    pub error: Option<String>,
}

/// Model calls a retrieval should have made, reconstructed from its trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCalls {
    pub decomp: u64,
    pub text_extract: u64,
    pub tgt_image: u64,
    pub descr_image: u64,
    pub exam_text: u64,
    pub aggregate: u64,
    pub vision: u64,
    pub text_embed: u64,
}

impl StageCalls {
    pub fn chat_total(&self) -> u64 {
        self.decomp + self.text_extract + self.tgt_image + self.descr_image + self.exam_text + self.aggregate
    }

    pub fn purpose(&self, p: Purpose) -> u64 {
        match p {
            Purpose::Decomp => self.decomp,
            Purpose::TextExtract => self.text_extract,
            Purpose::TgtImage => self.tgt_image,
            Purpose::DescrImage => self.descr_image,
            Purpose::ExamText => self.exam_text,
            Purpose::Aggregate => self.aggregate,
            _ => 0,
        }
    }
}

impl RetrievalTrace {
    pub fn expected_calls(&self) -> StageCalls {
        let mut calls = StageCalls {
            decomp: self.decomposition.as_ref().map_or(0, |d| d.calls),
            text_extract: u64::from(self.extract_called),
            aggregate: u64::from(self.aggregated),
            text_embed: self.embedded_queries,
            ..StageCalls::default()
        };
        for mode in &self.image_plan_modes {
            match mode {
                ImageMode::Targeted => calls.tgt_image += 1,
                ImageMode::Descriptive => calls.descr_image += 1,
                ImageMode::None => {}
            }
        }
        for v in self.verdicts.iter().filter(|v| v.dispatched) {
            match v.channel {
                ExamChannel::Text => calls.exam_text += 1,
                ExamChannel::Vision => calls.vision += 1,
            }
        }
        calls
    }

    pub fn retries(&self) -> u64 {
        let decomp_retries = self.decomposition.as_ref().map_or(0, |d| d.calls.saturating_sub(1));
        decomp_retries + (self.image_plan_modes.len() as u64).saturating_sub(1)
    }
}

fn absent_marker(value: &str) -> bool {
    let v = value.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '`');
    v.is_empty()
        || ["none", "n/a", "na", "null", "nil", "-", "[]"]
            .iter()
            .any(|m| v.eq_ignore_ascii_case(m))
}

fn optional_part(reply: &str, key: &str) -> Option<Option<String>> {
    last_field(reply, key).map(|v| (!absent_marker(v)).then(|| v.trim().to_string()))
}

fn parse_decomposition(reply: &str) -> Option<DecomposedInstruction> {
    let text = optional_part(reply, "text");
    let image = optional_part(reply, "image");
    if text.is_none() && image.is_none() {
        return None;
    }
    let text_part = text.flatten();
    let image_part = image.flatten();
    let mode = last_field(reply, "mode").map(str::to_ascii_lowercase);
    let image_mode = match (&image_part, mode.as_deref()) {
        (None, _) => ImageMode::None,
        (Some(_), Some(m)) if m.contains("target") => ImageMode::Targeted,
        (Some(_), Some(m)) if m.contains("descri") => ImageMode::Descriptive,
        // An image part without a usable mode is not a decomposition.
        (Some(_), _) => return None,
    };
    if text_part.is_none() && image_part.is_none() {
        return None;
    }
    Some(DecomposedInstruction { text_part, image_part, image_mode })
}

fn numbered(items: &[String]) -> String {
    if items.is_empty() {
        return "(none)".to_string();
    }
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("[{}] {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Splits an instruction into its text- and image-related parts. A reply
/// that does not parse is retried once; after that the whole instruction is
/// treated as text.
pub fn decompose_instruction(
    instruction: &str,
    parent_contents: &[String],
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<Decomposition> {
    if instruction.trim().is_empty() {
        return Err(Error::invalid("retrieval instruction must be non-empty"));
    }
    let parents = numbered(parent_contents);
    let prompt = templates.render(
        TemplateName::Decomp,
        &[("parents", &parents), ("instruction", instruction)],
    )?;
    for attempt in 1..=2u64 {
        let reply = gateway.chat(Purpose::Decomp, prompt.as_str())?;
        if let Some(decomposed) = parse_decomposition(&reply) {
            return Ok(Decomposition { decomposed, calls: attempt, degraded: false });
        }
    }
    Ok(Decomposition {
        decomposed: DecomposedInstruction::text_only(instruction),
        calls: 2,
        degraded: true,
    })
}

fn dedup_nonempty(items: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in items {
        let item = item.trim().to_string();
        if !item.is_empty() && !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn list_after(reply: &str, key: &str) -> Vec<String> {
    let list = last_field(reply, key)
        .and_then(parse_string_list)
        .or_else(|| {
            // The list may sit on the line after the label.
            let lower = reply.to_ascii_lowercase();
            let at = lower.rfind(&key.to_ascii_lowercase())?;
            parse_string_list(&reply[at..])
        })
        .or_else(|| parse_string_list(reply));
    dedup_nonempty(list.unwrap_or_default())
}

/// Key phrases for searching the text knowledge base.
pub fn extract_text_queries(
    text_part: &str,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<Vec<String>> {
    if text_part.trim().is_empty() {
        return Err(Error::invalid("text part must be non-empty"));
    }
    let prompt = templates.render(
        TemplateName::Extract,
        &[
            ("few_shot", templates.body(TemplateName::FewShotText)),
            ("instruction", text_part),
        ],
    )?;
    let reply = gateway.chat(Purpose::TextExtract, prompt)?;
    Ok(list_after(&reply, "key phrase"))
}

/// Image identifiers (targeted) or descriptive phrases (descriptive), plus
/// the question to put to the vision model.
pub fn plan_image_retrieval(
    image_part: &str,
    mode: ImageMode,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<ImagePlan> {
    if image_part.trim().is_empty() {
        return Err(Error::invalid("image part must be non-empty"));
    }
    let (template, few_shot, list_key) = match mode {
        ImageMode::Targeted => (TemplateName::Target, TemplateName::FewShotTarget, "target"),
        ImageMode::Descriptive => (TemplateName::Describe, TemplateName::FewShotDescribe, "key phrase"),
        ImageMode::None => return Err(Error::invalid("image planning needs a targeted or descriptive mode")),
    };
    let prompt = templates.render(
        template,
        &[("few_shot", templates.body(few_shot)), ("instruction", image_part)],
    )?;
    let purpose = mode.purpose().unwrap_or(Purpose::TgtImage);
    let reply = gateway.chat(purpose, prompt)?;
    let exam_question = last_field(&reply, "question")
        .filter(|q| !absent_marker(q))
        .map(str::to_string)
        .unwrap_or_else(|| image_part.to_string());
    Ok(ImagePlan { mode, queries: list_after(&reply, list_key), exam_question })
}

/// Radius-searches both knowledge bases and merges the hits: one candidate
/// per `(source_id, payload)` at its smallest distance, nearest first, at
/// most `cap` of them.
pub fn gather_candidates(
    queries: &QuerySet,
    kbs: &KnowledgeBases,
    config: &RetrievalConfig,
    gateway: &Gateway<'_>,
) -> Result<Vec<Candidate>> {
    let mut embedded = 0;
    gather_counting(queries, kbs, config, gateway, &mut embedded)
}

fn gather_counting(
    queries: &QuerySet,
    kbs: &KnowledgeBases,
    config: &RetrievalConfig,
    gateway: &Gateway<'_>,
    embedded: &mut u64,
) -> Result<Vec<Candidate>> {
    let mut merged: Vec<Candidate> = Vec::new();
    let mut slot: BTreeMap<(String, String), usize> = BTreeMap::new();
    let searches = queries
        .text_queries
        .iter()
        .map(|q| (q, &kbs.text, config.radius_text))
        .chain(queries.image_queries.iter().map(|q| (q, &kbs.image, config.radius_image)));
    for (query, kb, radius) in searches {
        *embedded += 1;
        let vector = gateway.embed_text(query)?;
        for hit in kb.radius_query(&vector, radius)? {
            let key = (hit.source_id.clone(), hit.payload.clone());
            match slot.get(&key) {
                Some(&i) => {
                    if hit.distance < merged[i].distance {
                        merged[i].distance = hit.distance;
                    }
                }
                None => {
                    slot.insert(key, merged.len());
                    merged.push(hit);
                }
            }
        }
    }
    // Stable sort keeps first-seen order among equal distances.
    merged.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    merged.truncate(config.candidate_cap);
    Ok(merged)
}

fn is_irrelevant(reply: &str) -> bool {
    let first = reply
        .split_whitespace()
        .next()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .unwrap_or("");
    first.is_empty() || first.eq_ignore_ascii_case(IRRELEVANT)
}

/// Examines every candidate. Image hits, and in targeted mode title/caption
/// hits that belong to an image, go to the vision model with the image
/// question; everything else goes to the chat model with the text part of
/// the instruction. A failed examination marks its candidate irrelevant.
pub fn examine_candidates(
    candidates: &[Candidate],
    instruction: &str,
    decomposed: &DecomposedInstruction,
    exam_question: Option<&str>,
    kbs: &KnowledgeBases,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<Vec<ExaminationResult>> {
    let text_instruction = decomposed.text_part.as_deref().unwrap_or(instruction);
    let image_question = exam_question
        .or(decomposed.image_part.as_deref())
        .unwrap_or(instruction);
    let mut results = Vec::with_capacity(candidates.len());
    for c in candidates {
        let image_ref = match c.payload_kind {
            PayloadKind::Image => Some(kbs.image_ref(&c.source_id).unwrap_or(&c.payload)),
            PayloadKind::Title | PayloadKind::Caption if decomposed.image_mode == ImageMode::Targeted => {
                kbs.image_ref(&c.source_id)
            }
            _ => None,
        };
        let mut dispatched = true;
        let (channel, reply) = match image_ref {
            Some(image_ref) if !gateway.image_exists(image_ref) => {
                dispatched = false;
                (ExamChannel::Vision, Err(Error::invalid(format!("image `{image_ref}` cannot be resolved"))))
            }
            Some(image_ref) => {
                let prompt = templates.render(TemplateName::ExamImage, &[("exam_question", image_question)])?;
                let request = VisionRequest { prompt, image_ref: image_ref.to_string() };
                (ExamChannel::Vision, gateway.complete_vision(&request))
            }
            None => {
                let prompt = templates.render(
                    TemplateName::ExamText,
                    &[("instruction", text_instruction), ("candidate", &c.payload)],
                )?;
                (ExamChannel::Text, gateway.chat(Purpose::ExamText, prompt))
            }
        };
        let (finding, relevant) = match reply {
            Ok(reply) => {
                let relevant = !is_irrelevant(&reply);
                (reply.trim().to_string(), relevant)
            }
            Err(e) => (format!("examination failed: {e}"), false),
        };
        results.push(ExaminationResult {
            source_id: c.source_id.clone(),
            payload: c.payload.clone(),
            channel,
            finding,
            relevant,
            dispatched,
        });
    }
    Ok(results)
}

pub fn no_results(instruction: &str) -> String {
    format!("{NO_RESULTS_PREFIX}{instruction}")
}

fn counts(results: &[ExaminationResult]) -> ExamCounts {
    let mut c = ExamCounts::default();
    for r in results {
        match r.channel {
            ExamChannel::Text => c.text += 1,
            ExamChannel::Vision => c.vision += 1,
        }
    }
    c
}

/// Condenses the relevant findings. Without any, the outcome is the
/// no-results sentinel and no chat call is made.
pub fn aggregate_results(
    instruction: &str,
    results: &[ExaminationResult],
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<RetrievalOutcome> {
    let findings: Vec<String> = results
        .iter()
        .filter(|r| r.relevant)
        .map(|r| format!("({}) {}", r.source_id, r.finding))
        .collect();
    let candidates_examined = counts(results);
    if findings.is_empty() {
        return Ok(RetrievalOutcome { content: no_results(instruction), candidates_examined, empty: true });
    }
    let findings = numbered(&findings);
    let prompt = templates.render(
        TemplateName::Retrieve,
        &[("instruction", instruction), ("findings", &findings)],
    )?;
    let content = gateway.chat(Purpose::Aggregate, prompt)?;
    if content.trim().is_empty() {
        return Ok(RetrievalOutcome { content: no_results(instruction), candidates_examined, empty: true });
    }
    Ok(RetrievalOutcome { content, candidates_examined, empty: false })
}

/// Runs the whole pipeline for one Retrieval node. Only fatal backend errors
/// escape; every other failure becomes an empty outcome with a diagnostic.
pub fn retrieve(
    instruction: &str,
    parent_contents: &[String],
    kbs: &KnowledgeBases,
    config: &RetrievalConfig,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<(RetrievalOutcome, RetrievalTrace)> {
    let mut trace = RetrievalTrace { instruction: instruction.to_string(), ..RetrievalTrace::default() };
    match run_stages(instruction, parent_contents, kbs, config, gateway, templates, &mut trace) {
        Ok(outcome) => {
            trace.content = outcome.content.clone();
            Ok((outcome, trace))
        }
        Err(e) if e.is_fatal() => Err(e),
        Err(e) => {
            let content = format!("Retrieval failed for: {instruction} ({e})");
            trace.error = Some(e.to_string());
            trace.content = content.clone();
            let outcome = RetrievalOutcome {
                content,
                candidates_examined: counts(&trace.verdicts),
                empty: true,
            };
            Ok((outcome, trace))
        }
    }
}

fn run_stages(
    instruction: &str,
    parent_contents: &[String],
    kbs: &KnowledgeBases,
    config: &RetrievalConfig,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
    trace: &mut RetrievalTrace,
) -> Result<RetrievalOutcome> {
    let decomposition = decompose_instruction(instruction, parent_contents, gateway, templates)?;
    let decomposed = decomposition.decomposed.clone();
    trace.decomposition = Some(decomposition);

    let mut queries = QuerySet::default();
    if let Some(text_part) = &decomposed.text_part {
        trace.extract_called = true;
        queries.text_queries = extract_text_queries(text_part, gateway, templates)?;
    }
    if let Some(image_part) = &decomposed.image_part {
        let mut mode = decomposed.image_mode;
        trace.image_plan_modes.push(mode);
        let mut plan = plan_image_retrieval(image_part, mode, gateway, templates)?;
        if plan.needs_mode_switch() {
            mode = mode.other();
            trace.image_plan_modes.push(mode);
            plan = plan_image_retrieval(image_part, mode, gateway, templates)?;
        }
        match plan.mode {
            ImageMode::Targeted => {
                for q in plan.queries {
                    if !queries.text_queries.contains(&q) {
                        queries.text_queries.push(q);
                    }
                }
            }
            _ => queries.image_queries = plan.queries,
        }
        queries.exam_question = Some(plan.exam_question);
    }
    trace.queries = queries.clone();

    // Mode actually used for examination after any switch.
    let mut effective = decomposed.clone();
    if let Some(&mode) = trace.image_plan_modes.last() {
        effective.image_mode = mode;
    }

    let candidates = gather_counting(&queries, kbs, config, gateway, &mut trace.embedded_queries)?;
    trace.candidates = candidates.clone();

    let verdicts = examine_candidates(
        &candidates,
        instruction,
        &effective,
        queries.exam_question.as_deref(),
        kbs,
        gateway,
        templates,
    )?;
    trace.verdicts = verdicts.clone();

    trace.aggregated = verdicts.iter().any(|v| v.relevant);
    aggregate_results(instruction, &verdicts, gateway, templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{brute_force_radius, normalize, EmbeddingEntry, KnowledgeBase, Modality};
    use crate::kb::{build_knowledge_bases, Source};
    use crate::testing::{hash_embed, ScriptedBackend};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t() -> TemplateSet {
        TemplateSet::default()
    }

    fn unit(v: Vec<f32>) -> Vec<f32> {
        normalize(v).unwrap()
    }

    fn kbs_from(text: Vec<EmbeddingEntry>, image: Vec<EmbeddingEntry>, dim: usize) -> KnowledgeBases {
        let image_refs = image.iter().map(|e| (e.source_id.clone(), e.payload.clone())).collect();
        KnowledgeBases {
            text: KnowledgeBase::new(Modality::Text, dim, text).unwrap(),
            image: KnowledgeBase::new(Modality::Image, dim, image).unwrap(),
            image_refs,
        }
    }

    fn entry(payload: &str, source: &str, kind: PayloadKind, v: Vec<f32>) -> EmbeddingEntry {
        EmbeddingEntry { vector: unit(v), payload: payload.into(), source_id: source.into(), payload_kind: kind }
    }

    #[test]
    fn decomposition_modes() {
        let backend = ScriptedBackend::new()
            .chat(Some(Purpose::Decomp), "Stockport", "Text: None\nImage: Retrieve the structure at the top of the Stockport County F.C.'s logo\nMode: Targeted")
            .chat(Some(Purpose::Decomp), "bird", "Text: None\nImage: Retrieve the team whose logo has a bird on it\nMode: Descriptive")
            .chat(Some(Purpose::Decomp), "director", "Text: Retrieve the director of Jaws\nImage: None\nMode: None");
        let gw = Gateway::new(&backend);
        let d = decompose_instruction("Retrieve the structure at the top of the Stockport County F.C.'s logo", &[], &gw, &t()).unwrap();
        assert_eq!(d.decomposed.image_mode, ImageMode::Targeted);
        assert!(d.decomposed.image_part.is_some());
        assert_eq!(d.decomposed.text_part, None);
        let d = decompose_instruction("Retrieve the team whose logo has a bird on it", &[], &gw, &t()).unwrap();
        assert_eq!(d.decomposed.image_mode, ImageMode::Descriptive);
        let d = decompose_instruction("Retrieve the director of Jaws", &[], &gw, &t()).unwrap();
        assert_eq!(d.decomposed, DecomposedInstruction::text_only("Retrieve the director of Jaws"));
        assert_eq!((d.calls, d.degraded), (1, false));
    }

    #[test]
    fn decomposition_degrades_after_one_retry() {
        let backend = ScriptedBackend::new().chat(Some(Purpose::Decomp), "", "I cannot tell.");
        let gw = Gateway::new(&backend);
        let d = decompose_instruction("Retrieve X", &["parent says hi".into()], &gw, &t()).unwrap();
        assert_eq!(d.decomposed, DecomposedInstruction::text_only("Retrieve X"));
        assert_eq!((d.calls, d.degraded), (2, true));
        assert!(backend.prompts_for(Purpose::Decomp)[0].contains("parent says hi"));
        // An image part without a mode is not accepted either.
        let backend = ScriptedBackend::new().chat(Some(Purpose::Decomp), "", "Text: a\nImage: b");
        let gw = Gateway::new(&backend);
        assert!(decompose_instruction("Retrieve X", &[], &gw, &t()).unwrap().degraded);
    }

    #[test]
    fn text_query_extraction() {
        let backend = ScriptedBackend::new()
            .chat(Some(Purpose::TextExtract), "Instruction: Retrieve nothing", "[]")
            .chat(Some(Purpose::TextExtract), "Instruction: Retrieve the role", r#"Key Phrase: ["role Peppe Lanzetta played in the 2009 film"]"#);
        let gw = Gateway::new(&backend);
        assert_eq!(
            extract_text_queries("Retrieve the role Peppe Lanzetta played in the 2009 film.", &gw, &t()).unwrap(),
            ["role Peppe Lanzetta played in the 2009 film"]
        );
        assert!(extract_text_queries("Retrieve nothing", &gw, &t()).unwrap().is_empty());
        let prompt = &backend.prompts_for(Purpose::TextExtract)[0];
        assert!(prompt.contains("Example 5:"), "few-shot corpus is embedded");
    }

    #[test]
    fn image_planning() {
        let backend = ScriptedBackend::new()
            .chat(Some(Purpose::TgtImage), "green dress on it.\n\nReply", "Question: Is there a woman with a green dress on it?\nTarget: []")
            .chat(Some(Purpose::TgtImage), "Instruction: Retrieve the structure", "Question: What is the structure at the top of logo?\nTarget: [\"the Stockport County F.C.'s logo\"]");
        let gw = Gateway::new(&backend);
        let p = plan_image_retrieval("Retrieve the structure at the top of the Stockport County F.C.'s logo.", ImageMode::Targeted, &gw, &t()).unwrap();
        assert_eq!(p.queries, ["the Stockport County F.C.'s logo"]);
        assert_eq!(p.exam_question, "What is the structure at the top of logo?");
        let p = plan_image_retrieval("Retrieve the movie poster that has a woman with a green dress on it.", ImageMode::Targeted, &gw, &t()).unwrap();
        assert!(p.needs_mode_switch());
        assert!(plan_image_retrieval("x", ImageMode::None, &gw, &t()).is_err());
    }

    #[test]
    fn gather_self_match_and_dedup() {
        let v = vec![1.0, 0.0, 0.0, 0.0];
        let kbs = kbs_from(
            vec![
                entry("Britney Spears profession singer", "s1", PayloadKind::Triplet, v.clone()),
                entry("other", "s2", PayloadKind::Triplet, vec![0.0, 1.0, 0.0, 0.0]),
            ],
            vec![],
            4,
        );
        let backend = ScriptedBackend::new()
            .vector("q1", v.clone())
            .vector("q2", vec![0.9, 0.1, 0.0, 0.0]);
        let gw = Gateway::new(&backend);
        let cfg = RetrievalConfig::default();
        let qs = QuerySet { text_queries: vec!["q1".into()], ..Default::default() };
        let c = gather_candidates(&qs, &kbs, &cfg, &gw).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].distance, 0.0);
        let qs = QuerySet { text_queries: vec!["q2".into(), "q1".into()], ..Default::default() };
        let c = gather_candidates(&qs, &kbs, &cfg, &gw).unwrap();
        assert_eq!(c.len(), 1, "two queries hitting one entry give one candidate");
        assert_eq!(c[0].distance, 0.0, "minimum distance is kept");
    }

    #[test]
    fn gather_equals_brute_force_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 8;
        let mut random_unit = || unit((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect());
        let text: Vec<_> = (0..200)
            .map(|i| entry(&format!("t{i}"), &format!("s{}", i / 3), PayloadKind::Triplet, random_unit()))
            .collect();
        let image: Vec<_> = (0..40)
            .map(|i| entry(&format!("img{i}.png"), &format!("i{i}"), PayloadKind::Image, random_unit()))
            .collect();
        let mut backend = ScriptedBackend::new();
        let mut qs = QuerySet::default();
        for i in 0..5 {
            let name = format!("query {i}");
            backend = backend.vector(&name, random_unit());
            if i < 3 { qs.text_queries.push(name) } else { qs.image_queries.push(name) }
        }
        let kbs = kbs_from(text.clone(), image.clone(), dim);
        let gw = Gateway::new(&backend);
        let cfg = RetrievalConfig { radius_text: 1.0, radius_image: 1.1, candidate_cap: 1000 };
        let got = gather_candidates(&qs, &kbs, &cfg, &gw).unwrap();

        let mut oracle: BTreeMap<(String, String), f64> = BTreeMap::new();
        for (q, entries, r) in qs.text_queries.iter().map(|q| (q, &text, 1.0))
            .chain(qs.image_queries.iter().map(|q| (q, &image, 1.1)))
        {
            let v = backend.vectors_for_test(q);
            for c in brute_force_radius(entries, &v, r).unwrap() {
                let d = oracle.entry((c.source_id, c.payload)).or_insert(f64::INFINITY);
                *d = d.min(c.distance);
            }
        }
        let got_map: BTreeMap<(String, String), f64> =
            got.iter().map(|c| ((c.source_id.clone(), c.payload.clone()), c.distance)).collect();
        assert_eq!(got_map, oracle);
        assert!(got.windows(2).all(|w| w[0].distance <= w[1].distance));

        let capped = gather_candidates(&qs, &kbs, &RetrievalConfig { candidate_cap: 5, ..cfg }, &gw).unwrap();
        assert_eq!(capped.len(), 5.min(got.len()));
        assert_eq!(capped[..], got[..capped.len()]);
    }

    #[test]
    fn examination_routes_by_channel() {
        let kbs = kbs_from(
            vec![
                entry("a b c", "s1", PayloadKind::Triplet, vec![1.0, 0.0]),
                entry("Stockport County logo", "img1", PayloadKind::Title, vec![0.0, 1.0]),
            ],
            vec![entry("stockport.png", "img1", PayloadKind::Image, vec![0.0, 1.0])],
            2,
        );
        let backend = ScriptedBackend::new()
            .chat(Some(Purpose::ExamText), "a b c", "IRRELEVANT - nothing here")
            .chat(Some(Purpose::ExamText), "", "useful")
            .vision("stockport.png", "A castle sits at the top of the logo.");
        let gw = Gateway::new(&backend);
        let cands: Vec<Candidate> = kbs.text.entries().iter().map(|e| Candidate {
            source_id: e.source_id.clone(), payload: e.payload.clone(), payload_kind: e.payload_kind, distance: 0.1,
        }).collect();

        let targeted = DecomposedInstruction {
            text_part: None,
            image_part: Some("Retrieve the structure at the top of the Stockport County F.C.'s logo".into()),
            image_mode: ImageMode::Targeted,
        };
        let r = examine_candidates(&cands, "instr", &targeted, Some("What is the structure at the top of logo?"), &kbs, &gw, &t()).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].channel, r[0].relevant), (ExamChannel::Text, false));
        assert_eq!((r[1].channel, r[1].relevant), (ExamChannel::Vision, true));
        assert_eq!(gw.ledger().vlm_calls, 1);
        assert!(backend.vision_log.lock().unwrap()[0].prompt.contains("What is the structure at the top of logo?"));

        // Outside targeted mode the title is examined as text.
        let r = examine_candidates(&cands, "instr", &DecomposedInstruction::text_only("find"), None, &kbs, &gw, &t()).unwrap();
        assert!(r.iter().all(|x| x.channel == ExamChannel::Text));
        assert!(examine_candidates(&[], "instr", &targeted, None, &kbs, &gw, &t()).unwrap().is_empty());
    }

    #[test]
    fn examination_failure_marks_irrelevant() {
        let kbs = kbs_from(vec![], vec![entry("missing.png", "img9", PayloadKind::Image, vec![1.0])], 1);
        let backend = ScriptedBackend::new();
        let gw = Gateway::new(&backend);
        let c = Candidate { source_id: "img9".into(), payload: "missing.png".into(), payload_kind: PayloadKind::Image, distance: 0.0 };
        let r = examine_candidates(&[c], "i", &DecomposedInstruction::text_only("i"), None, &kbs, &gw, &t()).unwrap();
        assert!(!r[0].relevant);
        assert!(r[0].finding.starts_with("examination failed"));
    }

    #[test]
    fn aggregation() {
        let backend = ScriptedBackend::new().chat(Some(Purpose::Aggregate), "", "Britney Spears is a singer.");
        let gw = Gateway::new(&backend);
        let res = |relevant: bool, f: &str| ExaminationResult {
            source_id: "s".into(), payload: "p".into(), channel: ExamChannel::Text, finding: f.into(), relevant, dispatched: true,
        };
        let out = aggregate_results("Retrieve X", &[res(false, "IRRELEVANT")], &gw, &t()).unwrap();
        assert!(out.empty);
        assert_eq!(out.content, "No results found for: Retrieve X");
        assert_eq!(gw.ledger().purpose(Purpose::Aggregate), 0);
        assert!(aggregate_results("Retrieve X", &[], &gw, &t()).unwrap().empty);
        let out = aggregate_results("Retrieve X", &[res(true, "she sings"), res(true, "pop singer")], &gw, &t()).unwrap();
        assert_eq!(out.content, "Britney Spears is a singer.");
        assert!(!out.empty);
        let prompt = &backend.prompts_for(Purpose::Aggregate)[0];
        assert!(prompt.contains("she sings") && prompt.contains("pop singer") && prompt.contains("Retrieve X"));
    }

    fn profession_backend() -> ScriptedBackend {
        ScriptedBackend::new()
            .chat(Some(Purpose::Triplet), "Britney Spears is an American singer", "(Britney Spears | profession | singer)\n(Britney Spears | nationality | American)")
            .chat(Some(Purpose::Triplet), "Toxic", "(Toxic | performed by | Britney Spears)")
            .chat(Some(Purpose::Decomp), "profession", "Text: Retrieve Britney Spears' profession\nImage: None\nMode: None")
            .chat(Some(Purpose::Decomp), "", "Text: Retrieve the capital of Mars\nImage: None\nMode: None")
            .chat(Some(Purpose::TextExtract), "Instruction: Retrieve Britney Spears' profession", r#"Key Phrase: ["Britney Spears profession"]"#)
            .chat(Some(Purpose::TextExtract), "", r#"Key Phrase: ["capital of Mars"]"#)
            .chat(Some(Purpose::ExamText), "profession singer", "Britney Spears' profession is singer.")
            .chat(Some(Purpose::ExamText), "", "IRRELEVANT")
            .chat(Some(Purpose::Aggregate), "", "Britney Spears is a singer.")
    }

    #[test]
    fn end_to_end_text_retrieval() {
        let backend = profession_backend();
        let gw = Gateway::new(&backend);
        let sources = [
            Source::text("wiki1", "Britney Spears is an American singer."),
            Source::text("wiki2", "Toxic is a song by Britney Spears."),
        ];
        let kbs = build_knowledge_bases(&sources, &gw, &t()).unwrap();
        let before = gw.ledger();
        let (out, trace) = retrieve("Retrieve Britney Spears' profession", &[], &kbs, &RetrievalConfig::default(), &gw, &t()).unwrap();
        assert!(out.content.contains("singer"));
        assert!(!out.empty);
        let spent = gw.ledger().since(&before);
        let expected = trace.expected_calls();
        for p in Purpose::ALL {
            assert_eq!(spent.purpose(p), expected.purpose(p), "{p}");
        }
        assert_eq!(spent.vlm_calls, expected.vision);
        assert_eq!(spent.text_embed_calls, expected.text_embed);
        assert_eq!(trace.content, out.content);
    }

    #[test]
    fn nothing_within_radius_gives_sentinel() {
        let backend = profession_backend();
        let gw = Gateway::new(&backend);
        let kbs = build_knowledge_bases(&[Source::text("wiki1", "Britney Spears is an American singer.")], &gw, &t()).unwrap();
        let before = gw.ledger();
        let (out, trace) = retrieve("Retrieve the capital of Mars", &[], &kbs, &RetrievalConfig::default(), &gw, &t()).unwrap();
        assert!(out.empty);
        assert_eq!(out.content, no_results("Retrieve the capital of Mars"));
        assert!(trace.candidates.is_empty());
        assert_eq!(gw.ledger().since(&before).purpose(Purpose::Aggregate), 0);
    }

    #[test]
    fn descriptive_image_retrieval_examines_only_the_hit() {
        let backend = ScriptedBackend::new()
            .chat(Some(Purpose::Decomp), "", "Text: None\nImage: Retrieve the team whose logo has a bird on it\nMode: Descriptive")
            .chat(Some(Purpose::DescrImage), "", "Question: Is there a bird in the logo?\nKey Phrase: [\"logo with a bird\"]")
            .chat(Some(Purpose::Aggregate), "", "The Seahawks logo shows a bird.")
            .vision("bird.png", "A bird's head in profile.")
            .vector("bird.png", vec![1.0, 0.0, 0.0])
            .vector("car.png", vec![0.0, 1.0, 0.0])
            .vector("tree.png", vec![0.0, 0.0, 1.0])
            .vector("logo with a bird", vec![0.95, 0.2, 0.2]);
        let gw = Gateway::new(&backend);
        let sources = [Source::image("a", "bird.png"), Source::image("b", "car.png"), Source::image("c", "tree.png")];
        let kbs = build_knowledge_bases(&sources, &gw, &t()).unwrap();
        let cfg = RetrievalConfig { radius_image: 0.5, ..RetrievalConfig::default() };
        let (out, trace) = retrieve("Retrieve the team whose logo has a bird on it", &[], &kbs, &cfg, &gw, &t()).unwrap();
        assert_eq!(gw.ledger().vlm_calls, 1);
        assert_eq!(trace.candidates.len(), 1);
        assert_eq!(out.content, "The Seahawks logo shows a bird.");
        assert!(backend.vision_log.lock().unwrap()[0].prompt.contains("Is there a bird in the logo?"));
    }

    #[test]
    fn targeted_with_empty_target_switches_mode() {
        let backend = ScriptedBackend::new()
            .chat(Some(Purpose::Decomp), "", "Text: None\nImage: Retrieve the movie poster that has a woman with a green dress on it\nMode: Targeted")
            .chat(Some(Purpose::TgtImage), "", "Question: Is there a woman with a green dress on it?\nTarget: []")
            .chat(Some(Purpose::DescrImage), "", "Question: Is there a woman with a green dress on it?\nKey Phrase: [\"movie poster that has a woman with a green dress\"]")
            .vision("", "IRRELEVANT");
        let gw = Gateway::new(&backend);
        let kbs = build_knowledge_bases(&[Source::image("p", "poster.png")], &gw, &t()).unwrap();
        let (out, trace) = retrieve("Retrieve the movie poster that has a woman with a green dress on it", &[], &kbs, &RetrievalConfig { radius_image: 2.0, ..Default::default() }, &gw, &t()).unwrap();
        assert_eq!(trace.image_plan_modes, [ImageMode::Targeted, ImageMode::Descriptive]);
        assert_eq!(trace.queries.image_queries, ["movie poster that has a woman with a green dress"]);
        assert_eq!(trace.retries(), 1);
        assert!(out.empty);
    }

    #[test]
    fn stage_errors_become_diagnostics() {
        let backend = ScriptedBackend::new();
        let gw = Gateway::new(&backend);
        let kbs = kbs_from(vec![], vec![], 4);
        let (out, trace) = retrieve("Retrieve X", &[], &kbs, &RetrievalConfig::default(), &gw, &t()).unwrap();
        assert!(out.empty);
        assert!(out.content.starts_with("Retrieval failed for: Retrieve X"));
        assert!(trace.error.is_some());
    }

    #[test]
    fn irrelevance_detection() {
        assert!(is_irrelevant("IRRELEVANT"));
        assert!(is_irrelevant("  irrelevant. The text is about cars."));
        assert!(is_irrelevant(""));
        assert!(!is_irrelevant("The irrelevant part aside, she is a singer."));
        let _ = hash_embed("x");
    }
}
