//! Parsing planner replies into [`Decision`]s.
//!
//! The planner is asked to end its reply with a block of three lines:
//!
//! ```text
//! type: Retrieval
//! parents: [N0, N2]
//! instruction: Retrieve the year the magazine won the award
//! ```
//!
//! The block may be fenced with triple backticks and may be preceded by
//! free-form reasoning. When several fenced blocks carry a `type:` line, the
//! last one wins. Without any fenced block the whole reply is searched.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{DecisionField, Error, Result};
use crate::graph::{Decision, NodeId, NodeKind, PlanningGraph};
use crate::text::{field_on_line, last_field, single_line};

fn parse_error(field: DecisionField, reason: impl Into<String>) -> Error {
    Error::Parse { field, reason: reason.into() }
}

/// Contents of fenced blocks, in order of appearance.
fn fenced_blocks(raw: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<String> = None;
    for line in raw.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(block) => blocks.push(block),
                None => current = Some(String::new()),
            }
        } else if let Some(block) = current.as_mut() {
            block.push_str(line);
            block.push('\n');
        }
    }
    blocks
}

fn decision_block(raw: &str) -> String {
    fenced_blocks(raw)
        .into_iter()
        .rev()
        .find(|b| last_field(b, "type").is_some())
        .unwrap_or_else(|| String::from(raw))
}

/// Instruction text: the value on the last `instruction:` line plus any
/// continuation lines up to the next field.
fn instruction_of(block: &str) -> Option<String> {
    let lines: Vec<&str> = block.lines().collect();
    let start = lines
        .iter()
        .rposition(|l| field_on_line(l, "instruction").is_some())?;
    let mut text = String::from(field_on_line(lines[start], "instruction").unwrap_or(""));
    for line in &lines[start + 1..] {
        if field_on_line(line, "type").is_some() || field_on_line(line, "parents").is_some() {
            break;
        }
        text.push(' ');
        text.push_str(line);
    }
    Some(single_line(&text))
}

fn parse_kind(value: Option<&str>) -> Result<NodeKind> {
    let value = value.ok_or_else(|| parse_error(DecisionField::Type, "missing `type:` line"))?;
    let cleaned = value.trim_matches(|c: char| !c.is_alphanumeric());
    NodeKind::parse(cleaned)
        .ok_or_else(|| parse_error(DecisionField::Type, format!("unknown node type `{cleaned}`")))
}

fn parse_parent_token(token: &str) -> Option<usize> {
    let digits = token
        .strip_prefix('N')
        .or_else(|| token.strip_prefix('n'))
        .unwrap_or(token);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn parse_parents(value: &str, graph: &PlanningGraph) -> Result<Vec<NodeId>> {
    let mut ids = Vec::new();
    for token in value.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let index = parse_parent_token(token).ok_or_else(|| {
            parse_error(DecisionField::Parents, format!("unrecognized parent token `{token}`"))
        })?;
        let id = NodeId(index);
        if !graph.contains(id) {
            return Err(parse_error(DecisionField::Parents, format!("{id} does not exist")));
        }
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    Ok(ids)
}

pub(crate) fn parse_decision_with(
    raw: &str,
    graph: &PlanningGraph,
    parent_fallback: Option<&[NodeId]>,
) -> Result<Decision> {
    let block = decision_block(raw);
    let kind = parse_kind(last_field(&block, "type"))?;

    let instruction = instruction_of(&block).unwrap_or_default();
    if kind != NodeKind::Stop && instruction.is_empty() {
        return Err(parse_error(DecisionField::Instruction, "missing or empty `instruction:` line"));
    }

    let parents = match last_field(&block, "parents") {
        Some(v) => parse_parents(v, graph),
        None => Err(parse_error(DecisionField::Parents, "missing `parents:` line")),
    }
    .and_then(|p| {
        if p.is_empty() {
            Err(parse_error(DecisionField::Parents, "no parent named"))
        } else {
            Ok(p)
        }
    });
    let parents = match (parents, kind, parent_fallback) {
        (Ok(p), _, _) => p,
        // A Stop needs no real anchor; hang it off the newest node.
        (Err(_), NodeKind::Stop, _) => alloc::vec![graph.last_id()],
        (Err(_), _, Some(fallback)) => fallback.to_vec(),
        (Err(e), _, None) => return Err(e),
    };
    Ok(Decision { kind, parents, instruction })
}

/// Parses a planner reply against the current graph. Errors name the field
/// that could not be used.
pub fn parse_decision(raw: &str, graph: &PlanningGraph) -> Result<Decision> {
    parse_decision_with(raw, graph, None)
}
