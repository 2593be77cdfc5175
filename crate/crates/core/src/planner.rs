//! Overall-plan generation and next-step planning.

use alloc::format;
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use crate::decision::parse_decision_with;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, Purpose};
use crate::graph::{Decision, NodeId, PlanningGraph, DEFAULT_STATE_BUDGET};
use crate::prompts::{TemplateName, TemplateSet};

/// Default number of corrective re-prompts after an unusable planner reply.
pub const DEFAULT_PARSE_RETRIES: usize = 2;

/// The high-level guide produced once per run from the question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OverallPlan(String);

impl OverallPlan {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("overall plan must be non-empty"));
        }
        Ok(OverallPlan(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// How a planning step arrived at its decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanResolution {
    Parsed,
    /// Parents stayed unresolvable after a corrective re-prompt and were
    /// replaced by the root.
    ParentsCoerced,
    /// Every attempt was unusable; the run is stopped.
    StopFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub decision: Decision,
    /// Planning calls spent, including corrective re-prompts.
    pub calls: u64,
    pub resolution: PlanResolution,
}

#[derive(Debug, Clone, Copy)]
pub struct Planner<'t> {
    templates: &'t TemplateSet,
    parse_retries: usize,
    state_budget: usize,
}

impl<'t> Planner<'t> {
    pub fn new(templates: &'t TemplateSet) -> Self {
        Planner {
            templates,
            parse_retries: DEFAULT_PARSE_RETRIES,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }

    pub fn with_parse_retries(mut self, retries: usize) -> Self {
        self.parse_retries = retries;
        self
    }

    pub fn with_state_budget(mut self, budget: usize) -> Self {
        self.state_budget = budget;
        self
    }

    pub fn generate_overall_plan(&self, question: &str, gateway: &Gateway<'_>) -> Result<OverallPlan> {
        if question.trim().is_empty() {
            return Err(Error::invalid("question must be non-empty"));
        }
        let prompt = self.templates.render(TemplateName::PlanGen, &[("question", question)])?;
        let reply = gateway.chat(Purpose::PlanGen, prompt)?;
        OverallPlan::new(reply)
    }

    /// Plan, graph state, parent-selection and node-type sections, in that
    /// order, separated by blank lines.
    pub fn planning_prompt(&self, graph: &PlanningGraph, plan: &OverallPlan) -> Result<String> {
        let t = self.templates;
        let state = graph.describe_state_with_budget(self.state_budget);
        let sections = [
            t.render(TemplateName::Plan, &[("plan", plan.as_str())])?,
            t.render(
                TemplateName::State,
                &[("graph_state", &state), ("question", graph.question())],
            )?,
            t.render(TemplateName::Parent, &[])?,
            t.render(TemplateName::NodeType, &[])?,
        ];
        Ok(sections
            .iter()
            .map(|s| s.trim_end())
            .collect::<alloc::vec::Vec<_>>()
            .join("\n\n"))
    }

    /// Asks the planner for the next decision. Unusable replies are
    /// re-prompted with a format reminder up to the retry budget; a reply
    /// whose only defect is unresolvable parents is anchored to the root after
    /// one re-prompt; when the budget runs out the step becomes a Stop.
    pub fn plan_next_step(
        &self,
        graph: &PlanningGraph,
        plan: &OverallPlan,
        gateway: &Gateway<'_>,
    ) -> Result<PlannedStep> {
        let base = self.planning_prompt(graph, plan)?;
        let mut prompt = base.clone();
        let mut calls = 0u64;
        for attempt in 0..=self.parse_retries {
            let reply = gateway.chat(Purpose::Planning, prompt.as_str())?;
            calls += 1;
            let err = match parse_decision_with(&reply, graph, None) {
                Ok(decision) => {
                    return Ok(PlannedStep { decision, calls, resolution: PlanResolution::Parsed })
                }
                Err(e @ Error::Parse { .. }) => e,
                Err(other) => return Err(other),
            };
            if attempt >= 1 {
                if let Ok(decision) = parse_decision_with(&reply, graph, Some(&[NodeId::ROOT])) {
                    return Ok(PlannedStep {
                        decision,
                        calls,
                        resolution: PlanResolution::ParentsCoerced,
                    });
                }
            }
            let reminder = self
                .templates
                .render(TemplateName::FormatReminder, &[("error", &err.to_string())])?;
            prompt = format!("{base}\n\n{}", reminder.trim_end());
        }
        Ok(PlannedStep {
            decision: Decision::stop(graph.last_id()),
            calls,
            resolution: PlanResolution::StopFallback,
        })
    }
}
