use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use apg::batch::{default_trace_dir, run_eval, run_question, EvalOptions, KbCache};
use apg::config::Config;
use apg::http::HttpBackend;
use apg::{dataset, gap, sources, store, templates, trace, MockBackend};
use apg_core::{Gateway, ModelBackend, TemplateSet};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "apg", version, about = "Adaptive planning-graph question answering over text and image sources")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config with run parameters and model endpoints.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scripted mock backend (JSON) used instead of HTTP endpoints.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Directory with one `<name>.txt` per prompt template.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct RunOverrides {
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
    #[arg(long)]
    radius_text: Option<f64>,
    #[arg(long)]
    radius_image: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist the text and image knowledge bases.
    BuildKb {
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Answer one question and write its trace.
    Run {
        #[arg(long)]
        question: String,
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Knowledge-base cache directory; reused when the sources match.
        #[arg(long)]
        kb_cache: Option<PathBuf>,
        #[command(flatten)]
        overrides: RunOverrides,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a dataset and write a JSON report plus one trace per example.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Defaults to `<report stem>.traces/` next to the report.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[command(flatten)]
        overrides: RunOverrides,
        #[command(flatten)]
        common: Common,
    },
    /// Text-text versus text-image similarity samples as CSV.
    GapReport {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in templates to a directory.
    ExportTemplates {
        #[arg(long)]
        out: PathBuf,
    },
}

struct Setup {
    config: Config,
    backend: Box<dyn ModelBackend>,
    embedder: String,
    templates: TemplateSet,
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn setup(common: &Common, overrides: Option<&RunOverrides>) -> Result<Setup> {
    let mut config = Config::load(common.config.as_deref())?;
    if let Some(o) = overrides {
        if let Some(k) = o.max_iter {
            config.run.max_iterations = k;
        }
        if let Some(r) = o.radius_text {
            config.run.radius_text = r;
        }
        if let Some(r) = o.radius_image {
            config.run.radius_image = r;
        }
    }
    config.run.validate().context("invalid run configuration")?;
    let templates = match &common.templates {
        Some(dir) => templates::load_dir(dir).with_context(|| format!("loading templates from {}", dir.display()))?,
        None => TemplateSet::default(),
    };
    let (backend, embedder): (Box<dyn ModelBackend>, String) = match &common.mock_script {
        Some(path) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            (Box::new(MockBackend::load(path)?), format!("mock:{}", digest(&bytes)))
        }
        None => {
            let id = format!(
                "http:{}|{}",
                config.embed_text.model.as_deref().unwrap_or(""),
                config.embed_image.model.as_deref().unwrap_or("")
            );
            (Box::new(HttpBackend::from_config(&config)?), id)
        }
    };
    Ok(Setup { config, backend, embedder, templates })
}

fn build_kb(sources_path: &Path, out: &Path, common: &Common) -> Result<()> {
    let s = setup(common, None)?;
    let sources = sources::load_sources(sources_path)?;
    let gateway = Gateway::new(s.backend.as_ref());
    let (kbs, status) = store::build_or_load(out, &sources, &s.embedder, &gateway, &s.templates)?;
    let (t, i) = kbs.sizes();
    println!(
        "{} {} text and {} image entries in {}",
        if status == store::CacheStatus::Hit { "cached:" } else { "built:" },
        t,
        i,
        out.display()
    );
    Ok(())
}

fn run_cmd(question: &str, sources_path: &Path, out: &Path, kb_cache: Option<PathBuf>, overrides: &RunOverrides, common: &Common) -> Result<()> {
    let s = setup(common, Some(overrides))?;
    let sources = sources::load_sources(sources_path)?;
    let cache = kb_cache.map(|dir| KbCache { dir, embedder: s.embedder.clone() });
    let output = run_question(question, &sources, &s.config.run, s.backend.as_ref(), &s.templates, cache.as_ref())?;
    trace::write_records(out, &output.records)?;
    match &output.outcome {
        Ok(result) => {
            println!("{}", result.answer);
            if let Some(Err(violation)) = &output.costs {
                bail!("{violation}");
            }
            Ok(())
        }
        Err(abort) => bail!("{abort} (partial trace in {})", out.display()),
    }
}

fn eval_cmd(dataset_path: &Path, out: &Path, workers: usize, traces: Option<PathBuf>, overrides: &RunOverrides, common: &Common) -> Result<()> {
    let s = setup(common, Some(overrides))?;
    let examples = dataset::load_dataset(dataset_path)?;
    let options = EvalOptions {
        config: s.config.run,
        workers,
        trace_dir: Some(traces.unwrap_or_else(|| default_trace_dir(out))),
    };
    let report = run_eval(&examples, &options, s.backend.as_ref(), &s.templates)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    let o = &report.overall;
    println!("examples: {}  EM: {:.4}  F1: {:.4}", o.count, o.em, o.f1);
    if let Some(acc) = o.qa_acc {
        println!("QA-Acc: {acc:.4}");
    }
    Ok(())
}

fn gap_cmd(kb: &Path, pairs: &Path, out: &Path) -> Result<()> {
    let kbs = store::load(kb)?;
    let report = gap::gap_report(&kbs, pairs)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    println!("text-text mean: {:.6}", report.text_text_mean);
    println!("text-image mean: {:.6}", report.text_image_mean);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::BuildKb { sources, out, common } => build_kb(&sources, &out, &common),
        Command::Run { question, sources, out, kb_cache, overrides, common } => {
            run_cmd(&question, &sources, &out, kb_cache, &overrides, &common)
        }
        Command::Eval { dataset, out, workers, traces, overrides, common } => {
            eval_cmd(&dataset, &out, workers, traces, &overrides, &common)
        }
        Command::GapReport { kb, pairs, out } => gap_cmd(&kb, &pairs, &out),
        Command::ExportTemplates { out } => Ok(templates::export_builtin(&out)?),
    }
}

