//! Answer-node content and the whole-graph fallback answer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gateway::{Gateway, Purpose};
use crate::graph::PlanningGraph;
use crate::prompts::{TemplateName, TemplateSet};

fn render_context(parent_contents: &[String]) -> String {
    if parent_contents.is_empty() {
        return String::from("(none)");
    }
    parent_contents
        .iter()
        .enumerate()
        .map(|(i, c)| format!("[{}] {}", i + 1, c))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Produces the content of an Answer node from its instruction and the
/// contents of its parents.
pub fn answer(
    instruction: &str,
    parent_contents: &[String],
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> Result<String> {
    if instruction.trim().is_empty() {
        return Err(Error::invalid("answer instruction must be non-empty"));
    }
    let context = render_context(parent_contents);
    let prompt = templates.render(
        TemplateName::Reason,
        &[("parents", &context), ("instruction", instruction)],
    )?;
    gateway.chat(Purpose::Reason, prompt)
}

/// Asks for a final answer from the whole graph. Only valid when the graph
/// holds no Answer node; otherwise the last answer is the final answer.
pub fn final_answer_from_graph(
    graph: &PlanningGraph,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
    state_budget: usize,
) -> Result<String> {
    if graph.has_answer() {
        return Err(Error::Precondition(
            "graph already holds an Answer node; use its content".into(),
        ));
    }
    let state = graph.describe_state_with_budget(state_budget);
    let prompt = templates.render(
        TemplateName::FinalAnswer,
        &[("graph_state", &state), ("question", graph.question())],
    )?;
    gateway.chat(Purpose::Reason, prompt)
}
