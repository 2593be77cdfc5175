//! The plan/act loop: plan a step, execute it, append the node, until the
//! planner stops or the iteration cap is reached.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{CallLedger, Gateway, Purpose};
use crate::graph::{Decision, NodeId, NodeKind, PlanningGraph, DEFAULT_STATE_BUDGET};
use crate::kb::{build_knowledge_bases, KnowledgeBases, Source};
use crate::planner::{PlanResolution, Planner, DEFAULT_PARSE_RETRIES};
use crate::prompts::TemplateSet;
use crate::reasoning;
use crate::retrieval::{self, RetrievalConfig, RetrievalTrace, StageCalls};

pub const DEFAULT_MAX_ITERATIONS: usize = 10;
/// Answer reported when every answering path came back blank.
pub const UNKNOWN_ANSWER: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub max_iterations: usize,
    pub radius_text: f64,
    pub radius_image: f64,
    pub candidate_cap: usize,
    pub parse_retries: usize,
    /// Character budget per node in the rendered graph state.
    pub state_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RetrievalConfig::default();
        RunConfig {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            radius_text: r.radius_text,
            radius_image: r.radius_image,
            candidate_cap: r.candidate_cap,
            parse_retries: DEFAULT_PARSE_RETRIES,
            state_budget: DEFAULT_STATE_BUDGET,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if self.state_budget == 0 {
            return Err(Error::invalid("state_budget must be at least 1"));
        }
        self.retrieval().validate()
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            radius_text: self.radius_text,
            radius_image: self.radius_image,
            candidate_cap: self.candidate_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    /// Content of the highest-id Answer node.
    LastAnswer,
    /// Asked from the whole graph because no Answer node exists.
    GraphFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub iteration: usize,
    pub planning_calls: u64,
    pub resolution: PlanResolution,
    pub decision: Decision,
    pub node: Option<NodeId>,
    /// A reasoning call was made for an Answer node.
    #[serde(default)]
    pub answer_call: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub question: String,
    /// Calls spent building the knowledge bases; absent when they were
    /// supplied prebuilt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kb_build: Option<CallLedger>,
    /// Entries in the text and image knowledge bases.
    #[serde(default)]
    pub kb_sizes: (usize, usize),
    pub plan: Option<String>,
    pub steps: Vec<StepTrace>,
    pub answer_source: Option<AnswerSource>,
    pub answer: Option<String>,
}

impl RunTrace {
    pub fn planning_calls(&self) -> u64 {
        self.steps.iter().map(|s| s.planning_calls).sum()
    }

    pub fn retrieval_calls(&self) -> StageCalls {
        let mut total = StageCalls::default();
        for r in self.steps.iter().filter_map(|s| s.retrieval.as_ref()) {
            let c = r.expected_calls();
            total.decomp += c.decomp;
            total.text_extract += c.text_extract;
            total.tgt_image += c.tgt_image;
            total.descr_image += c.descr_image;
            total.exam_text += c.exam_text;
            total.aggregate += c.aggregate;
            total.vision += c.vision;
            total.text_embed += c.text_embed;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub answer: String,
    pub graph: PlanningGraph,
    pub ledger: CallLedger,
    pub trace: RunTrace,
}

/// A run that stopped early on a fatal error, with whatever it had built.
#[derive(Debug, Clone, PartialEq)]
pub struct RunAbort {
    pub error: Error,
    pub graph: Option<PlanningGraph>,
    pub trace: RunTrace,
    pub ledger: CallLedger,
}

impl fmt::Display for RunAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run aborted after {} step(s): {}", self.trace.steps.len(), self.error)
    }
}

impl core::error::Error for RunAbort {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        Some(&self.error)
    }
}

struct Session<'g, 'a> {
    gateway: &'g Gateway<'a>,
    trace: RunTrace,
    graph: Option<PlanningGraph>,
}

impl Session<'_, '_> {
    fn abort(self, error: Error) -> Box<RunAbort> {
        Box::new(RunAbort {
            error,
            graph: self.graph,
            trace: self.trace,
            ledger: self.gateway.ledger(),
        })
    }
}

/// Builds both knowledge bases from `sources`, then runs the loop.
pub fn run(
    question: &str,
    sources: &[Source],
    config: &RunConfig,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> core::result::Result<RunResult, Box<RunAbort>> {
    let mut session = Session {
        gateway,
        trace: RunTrace { question: question.to_string(), ..RunTrace::default() },
        graph: None,
    };
    if let Err(e) = config.validate() {
        return Err(session.abort(e));
    }
    let before = gateway.ledger();
    let kbs = match build_knowledge_bases(sources, gateway, templates) {
        Ok(kbs) => kbs,
        Err(e) => {
            session.trace.kb_build = Some(gateway.ledger().since(&before));
            return Err(session.abort(e));
        }
    };
    session.trace.kb_build = Some(gateway.ledger().since(&before));
    drive(session, &kbs, config, templates)
}

/// Runs the loop over prebuilt knowledge bases.
pub fn run_with_kbs(
    question: &str,
    kbs: &KnowledgeBases,
    config: &RunConfig,
    gateway: &Gateway<'_>,
    templates: &TemplateSet,
) -> core::result::Result<RunResult, Box<RunAbort>> {
    let session = Session {
        gateway,
        trace: RunTrace { question: question.to_string(), ..RunTrace::default() },
        graph: None,
    };
    if let Err(e) = config.validate() {
        return Err(session.abort(e));
    }
    drive(session, kbs, config, templates)
}

fn drive(
    mut s: Session<'_, '_>,
    kbs: &KnowledgeBases,
    config: &RunConfig,
    templates: &TemplateSet,
) -> core::result::Result<RunResult, Box<RunAbort>> {
    let gateway = s.gateway;
    let question = s.trace.question.clone();
    s.trace.kb_sizes = kbs.sizes();
    match PlanningGraph::new(&question) {
        Ok(g) => s.graph = Some(g),
        Err(e) => return Err(s.abort(e)),
    }
    let planner = Planner::new(templates)
        .with_parse_retries(config.parse_retries)
        .with_state_budget(config.state_budget);
    let plan = match planner.generate_overall_plan(&question, gateway) {
        Ok(p) => p,
        Err(e) => return Err(s.abort(e)),
    };
    s.trace.plan = Some(plan.as_str().to_string());
    let retrieval_config = config.retrieval();

    for iteration in 0..config.max_iterations {
        let graph = s.graph.as_ref().expect("graph initialized");
        let step = match planner.plan_next_step(graph, &plan, gateway) {
            Ok(step) => step,
            Err(e) => return Err(s.abort(e)),
        };
        let mut record = StepTrace {
            iteration,
            planning_calls: step.calls,
            resolution: step.resolution,
            decision: step.decision.clone(),
            node: None,
            answer_call: false,
            retrieval: None,
            error: None,
        };
        let decision = &step.decision;
        let parents = graph.contents_of(&decision.parents);
        let content = match decision.kind {
            NodeKind::Stop => Ok(String::new()),
            NodeKind::Question => Ok(decision.instruction.clone()),
            NodeKind::Answer => {
                record.answer_call = true;
                reasoning::answer(&decision.instruction, &parents, gateway, templates)
                    .map(|a| if a.trim().is_empty() { UNKNOWN_ANSWER.to_string() } else { a })
            }
            NodeKind::Retrieval => retrieval::retrieve(
                &decision.instruction,
                &parents,
                kbs,
                &retrieval_config,
                gateway,
                templates,
            )
            .map(|(outcome, trace)| {
                record.retrieval = Some(trace);
                outcome.content
            }),
        };
        let content = match content {
            Ok(c) => c,
            Err(e) if e.is_fatal() => {
                s.trace.steps.push(record);
                return Err(s.abort(e));
            }
            Err(e) => {
                record.error = Some(e.to_string());
                format!("Step failed for: {} ({e})", decision.instruction)
            }
        };
        let graph = s.graph.as_mut().expect("graph initialized");
        match graph.add_node(decision, &content) {
            Ok(id) => record.node = Some(id),
            Err(e) => {
                s.trace.steps.push(record);
                return Err(s.abort(e));
            }
        }
        s.trace.steps.push(record);
        if decision.kind == NodeKind::Stop {
            break;
        }
    }

    let graph = s.graph.as_ref().expect("graph initialized");
    let (answer, source) = match graph.last_answer() {
        Some(a) => (a.to_string(), AnswerSource::LastAnswer),
        None => match reasoning::final_answer_from_graph(graph, gateway, templates, config.state_budget) {
            Ok(a) => (a, AnswerSource::GraphFallback),
            Err(e) if e.is_fatal() => {
                s.trace.answer_source = Some(AnswerSource::GraphFallback);
                return Err(s.abort(e));
            }
            Err(_) => (String::new(), AnswerSource::GraphFallback),
        },
    };
    let answer = if answer.trim().is_empty() { UNKNOWN_ANSWER.to_string() } else { answer };
    s.trace.answer_source = Some(source);
    s.trace.answer = Some(answer.clone());
    Ok(RunResult {
        answer,
        graph: s.graph.expect("graph initialized"),
        ledger: gateway.ledger(),
        trace: s.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// Counted by the gateway.
    pub counted: CallLedger,
    /// Recounted from the trace and graph.
    pub expected: CallLedger,
    pub kb_sizes: (usize, usize),
    pub nodes_created: u64,
    pub planning_calls: u64,
    pub retrieval_nodes: u64,
    pub answer_nodes: u64,
    pub violations: Vec<String>,
}

/// Recounts every model call from the trace and graph and compares the
/// result with the gateway's ledger. Any difference is an accounting
/// violation.
pub fn account_costs(
    ledger: &CallLedger,
    trace: &RunTrace,
    graph: &PlanningGraph,
    kb_sizes: (usize, usize),
) -> Result<CostReport> {
    let mut violations = Vec::new();
    let nodes_created = (graph.len() - 1) as u64;
    let count_kind = |k: NodeKind| graph.nodes().iter().filter(|n| n.kind == k).count() as u64;
    let retrieval_nodes = count_kind(NodeKind::Retrieval);
    let answer_nodes = count_kind(NodeKind::Answer);

    if trace.steps.len() as u64 != nodes_created {
        violations.push(format!(
            "{} planning steps recorded but {nodes_created} nodes created",
            trace.steps.len()
        ));
    }
    for (i, step) in trace.steps.iter().enumerate() {
        let expected = NodeId(i + 1);
        let matches = step.node == Some(expected)
            && graph.node(expected).is_some_and(|n| n.kind == step.decision.kind);
        if !matches {
            violations.push(format!("step {i} does not correspond to node {expected}"));
        }
    }
    let answer_calls = trace.steps.iter().filter(|s| s.answer_call).count() as u64;
    if answer_calls != answer_nodes {
        violations.push(format!("{answer_calls} reasoning calls for {answer_nodes} Answer nodes"));
    }
    let traced_retrievals = trace.steps.iter().filter(|s| s.retrieval.is_some()).count() as u64;
    if traced_retrievals != retrieval_nodes {
        violations.push(format!("{traced_retrievals} retrieval traces for {retrieval_nodes} Retrieval nodes"));
    }

    if trace.kb_sizes != kb_sizes {
        violations.push(format!("trace records knowledge-base sizes {:?}, expected {kb_sizes:?}", trace.kb_sizes));
    }
    let mut expected = trace.kb_build.clone().unwrap_or_default();
    if let Some(build) = &trace.kb_build {
        if build.text_embed_calls != kb_sizes.0 as u64 || build.image_embed_calls != kb_sizes.1 as u64 {
            violations.push(format!(
                "knowledge-base build made {}/{} text/image embeddings for {}/{} entries",
                build.text_embed_calls, build.image_embed_calls, kb_sizes.0, kb_sizes.1
            ));
        }
    }
    let planning_calls = trace.planning_calls();
    let retrieval = trace.retrieval_calls();
    let fallback = u64::from(trace.answer_source == Some(AnswerSource::GraphFallback));
    let mut add = |p: Purpose, n: u64| {
        if n > 0 {
            *expected.by_purpose.entry(p).or_insert(0) += n;
            expected.llm_calls += n;
        }
    };
    add(Purpose::PlanGen, u64::from(trace.plan.is_some()));
    add(Purpose::Planning, planning_calls);
    add(Purpose::Reason, answer_calls + fallback);
    for p in [
        Purpose::Decomp,
        Purpose::TextExtract,
        Purpose::TgtImage,
        Purpose::DescrImage,
        Purpose::ExamText,
        Purpose::Aggregate,
    ] {
        add(p, retrieval.purpose(p));
    }
    expected.vlm_calls += retrieval.vision;
    expected.text_embed_calls += retrieval.text_embed;

    if !ledger.is_conserved() {
        violations.push("per-purpose counts do not sum to the chat-call total".to_string());
    }
    for p in Purpose::ALL {
        if ledger.purpose(p) != expected.purpose(p) {
            violations.push(format!(
                "{p}: counted {} but trace implies {}",
                ledger.purpose(p),
                expected.purpose(p)
            ));
        }
    }
    for (name, counted, implied) in [
        ("chat", ledger.llm_calls, expected.llm_calls),
        ("vision", ledger.vlm_calls, expected.vlm_calls),
        ("text embedding", ledger.text_embed_calls, expected.text_embed_calls),
        ("image embedding", ledger.image_embed_calls, expected.image_embed_calls),
    ] {
        if counted != implied {
            violations.push(format!("{name}: counted {counted} but trace implies {implied}"));
        }
    }

    let report = CostReport {
        counted: ledger.clone(),
        expected,
        kb_sizes,
        nodes_created,
        planning_calls,
        retrieval_nodes,
        answer_nodes,
        violations,
    };
    if report.violations.is_empty() {
        Ok(report)
    } else {
        Err(Error::AccountingViolation(report.violations.join("; ")))
    }
}
