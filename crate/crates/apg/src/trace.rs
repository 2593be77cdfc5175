//! Line-delimited JSON run traces.
//!
//! Every line is an object tagged by `record`: one `run` header, the root
//! `node`, then a `step` followed by the `node` it created for each planning
//! iteration, and finally `result` or `abort`. Nodes carry
//! `{id, kind, content, instruction, parents}`; steps carry the decision and
//! the per-stage retrieval trace.

use std::io::Write;
use std::path::Path;

use apg_core::orchestrator::{AnswerSource, CostReport, RunAbort, RunTrace, StepTrace};
use apg_core::{CallLedger, Node, PlanningGraph, RunConfig, RunResult};
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Run {
        question: String,
        config: RunConfig,
        kb_sizes: (usize, usize),
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kb_build: Option<CallLedger>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        plan: Option<String>,
    },
    Node(Node),
    Step(StepTrace),
    Result {
        answer: String,
        answer_source: Option<AnswerSource>,
        ledger: CallLedger,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        costs: Option<CostReport>,
    },
    Abort {
        error: String,
        ledger: CallLedger,
    },
}

/// What a run left behind, finished or not.
pub enum Outcome<'r> {
    Finished { result: &'r RunResult, costs: Option<&'r CostReport> },
    Aborted(&'r RunAbort),
}

fn header(trace: &RunTrace, config: &RunConfig) -> TraceRecord {
    TraceRecord::Run {
        question: trace.question.clone(),
        config: *config,
        kb_sizes: trace.kb_sizes,
        kb_build: trace.kb_build.clone(),
        plan: trace.plan.clone(),
    }
}

pub fn records(outcome: &Outcome<'_>, config: &RunConfig) -> Vec<TraceRecord> {
    let (trace, graph) = match outcome {
        Outcome::Finished { result, .. } => (&result.trace, Some(&result.graph)),
        Outcome::Aborted(abort) => (&abort.trace, abort.graph.as_ref()),
    };
    let mut out = vec![header(trace, config)];
    let node = |id: apg_core::NodeId| graph.and_then(|g| g.node(id)).cloned().map(TraceRecord::Node);
    out.extend(node(apg_core::NodeId::ROOT));
    for step in &trace.steps {
        out.push(TraceRecord::Step(step.clone()));
        out.extend(step.node.and_then(node));
    }
    out.push(match outcome {
        Outcome::Finished { result, costs } => TraceRecord::Result {
            answer: result.answer.clone(),
            answer_source: result.trace.answer_source,
            ledger: result.ledger.clone(),
            costs: costs.cloned(),
        },
        Outcome::Aborted(abort) => TraceRecord::Abort { error: abort.error.to_string(), ledger: abort.ledger.clone() },
    });
    out
}

pub fn write_records(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("trace records serialize");
        buf.push(b'\n');
    }
    crate::error::write(path, buf)
}

/// Appends records to an open writer, flushing after each line.
pub fn append(writer: &mut impl Write, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *writer, r)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<TraceRecord>> {
    crate::sources::parse_records(&read_to_string(path)?, path)
}

/// A trace read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Replayed {
    pub graph: PlanningGraph,
    pub trace: RunTrace,
    pub config: RunConfig,
    pub kb_sizes: (usize, usize),
    pub ledger: Option<CallLedger>,
    pub answer: Option<String>,
}

/// Rebuilds the graph node by node (checking every construction rule) and
/// the run trace.
pub fn replay(records: &[TraceRecord], path: &Path) -> Result<Replayed> {
    let bad = |reason: &str| Error::Trace { path: path.to_path_buf(), reason: reason.to_string() };
    let Some(TraceRecord::Run { question, config, kb_sizes, kb_build, plan }) = records.first() else {
        return Err(bad("trace does not start with a run record"));
    };
    let mut trace = RunTrace {
        question: question.clone(),
        kb_build: kb_build.clone(),
        kb_sizes: *kb_sizes,
        plan: plan.clone(),
        ..RunTrace::default()
    };
    let mut nodes = Vec::new();
    let mut ledger = None;
    let mut answer = None;
    for r in &records[1..] {
        match r {
            TraceRecord::Node(n) => nodes.push(n.clone()),
            TraceRecord::Step(s) => trace.steps.push(s.clone()),
            TraceRecord::Result { answer: a, answer_source, ledger: l, .. } => {
                trace.answer_source = *answer_source;
                trace.answer = Some(a.clone());
                answer = Some(a.clone());
                ledger = Some(l.clone());
            }
            TraceRecord::Abort { ledger: l, .. } => ledger = Some(l.clone()),
            TraceRecord::Run { .. } => return Err(bad("second run record")),
        }
    }
    let graph = PlanningGraph::replay(&nodes)?;
    if graph.question() != question {
        return Err(bad("root node does not hold the run's question"));
    }
    Ok(Replayed { graph, trace, config: *config, kb_sizes: *kb_sizes, ledger, answer })
}

pub fn replay_file(path: &Path) -> Result<Replayed> {
    replay(&read_records(path)?, path)
}
