//! Single runs with trace output, and concurrent batch evaluation.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use apg_core::eval::{EvalReport, EvalRow, Example};
use apg_core::orchestrator::{account_costs, run, run_with_kbs, CostReport, RunAbort};
use apg_core::{CallLedger, Gateway, ModelBackend, RunConfig, RunResult, Source, TemplateSet};

use crate::error::{Error, Result};
use crate::store;
use crate::trace::{self, Outcome, TraceRecord};

/// Where cached knowledge bases live and which embedder built them.
#[derive(Debug, Clone)]
pub struct KbCache {
    pub dir: PathBuf,
    pub embedder: String,
}

#[derive(Debug)]
pub struct RunOutput {
    pub outcome: std::result::Result<RunResult, Box<RunAbort>>,
    pub costs: Option<std::result::Result<CostReport, apg_core::Error>>,
    pub records: Vec<TraceRecord>,
    /// Calls across knowledge-base building and the run.
    pub ledger: CallLedger,
}

impl RunOutput {
    pub fn answer(&self) -> Option<&str> {
        self.outcome.as_ref().ok().map(|r| r.answer.as_str())
    }
}

/// Runs one question, optionally through a knowledge-base cache, and checks
/// the call accounting.
pub fn run_question(
    question: &str,
    sources: &[Source],
    config: &RunConfig,
    backend: &dyn ModelBackend,
    templates: &TemplateSet,
    cache: Option<&KbCache>,
) -> Result<RunOutput> {
    let gateway = Gateway::new(backend);
    let mut ledger = CallLedger::default();
    let outcome = match cache {
        None => run(question, sources, config, &gateway, templates),
        Some(cache) => {
            let build_gateway = Gateway::new(backend);
            let (kbs, _) = store::build_or_load(&cache.dir, sources, &cache.embedder, &build_gateway, templates)?;
            ledger.absorb(&build_gateway.ledger());
            run_with_kbs(question, &kbs, config, &gateway, templates)
        }
    };
    ledger.absorb(&gateway.ledger());
    let costs = outcome
        .as_ref()
        .ok()
        .map(|r| account_costs(&r.ledger, &r.trace, &r.graph, r.trace.kb_sizes));
    let records = match &outcome {
        Ok(result) => trace::records(&Outcome::Finished { result, costs: costs.as_ref().and_then(|c| c.as_ref().ok()) }, config),
        Err(abort) => trace::records(&Outcome::Aborted(abort), config),
    };
    Ok(RunOutput { outcome, costs, records, ledger })
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub config: RunConfig,
    pub workers: usize,
    /// One `<example id>.jsonl` trace per example is written here.
    pub trace_dir: Option<PathBuf>,
}

/// Evaluates every example with up to `workers` concurrent runs. A failed
/// example scores zero and keeps its diagnostic.
pub fn run_eval(
    examples: &[Example],
    options: &EvalOptions,
    backend: &dyn ModelBackend,
    templates: &TemplateSet,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(apg_core::Error::invalid("dataset holds no examples").into());
    }
    options.config.validate()?;
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<(EvalRow, CallLedger)>>> = Mutex::new(vec![None; examples.len()]);
    let trace_error: Mutex<Option<Error>> = Mutex::new(None);
    let workers = options.workers.clamp(1, examples.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(example) = examples.get(i) else { break };
                let (row, ledger) = evaluate(example, options, backend, templates, &trace_error);
                rows.lock().expect("rows")[i] = Some((row, ledger));
            });
        }
    });

    if let Some(e) = trace_error.into_inner().expect("trace error") {
        return Err(e);
    }
    let mut total = CallLedger::default();
    let rows = rows
        .into_inner()
        .expect("rows")
        .into_iter()
        .map(|r| {
            let (row, ledger) = r.expect("every example evaluated");
            total.absorb(&ledger);
            row
        })
        .collect();
    Ok(EvalReport::from_rows(rows, total)?)
}

fn evaluate(
    example: &Example,
    options: &EvalOptions,
    backend: &dyn ModelBackend,
    templates: &TemplateSet,
    trace_error: &Mutex<Option<Error>>,
) -> (EvalRow, CallLedger) {
    let output = match run_question(&example.question, &example.sources, &options.config, backend, templates, None) {
        Ok(o) => o,
        Err(e) => return (EvalRow::failed(example, &e.to_string()), CallLedger::default()),
    };
    if let Some(dir) = &options.trace_dir {
        let path = dir.join(format!("{}.jsonl", file_stem(&example.id)));
        if let Err(e) = trace::write_records(&path, &output.records) {
            trace_error.lock().expect("trace error").get_or_insert(e);
        }
    }
    let row = match (&output.outcome, &output.costs) {
        (Ok(result), Some(Err(violation))) => {
            let mut row = EvalRow::scored(example, &result.answer);
            row.error = Some(violation.to_string());
            row
        }
        (Ok(result), _) => EvalRow::scored(example, &result.answer),
        (Err(abort), _) => EvalRow::failed(example, &abort.to_string()),
    };
    (row, output.ledger)
}

pub fn default_trace_dir(report: &Path) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    report.with_file_name(format!("{stem}.traces"))
}
