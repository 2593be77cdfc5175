use std::path::{Path, PathBuf};
use std::process::Command;

use apg::trace::{read_records, replay_file, TraceRecord};
use apg_core::orchestrator::account_costs;
use apg_core::NodeKind;

const QUESTION: &str = "What is the profession of the performer of the song on the Toxic single cover?";

fn demo(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo").join(name)
}

fn apg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_apg")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_a_replayable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.jsonl");
    let o = apg(&[
        "run", "--question", QUESTION,
        "--sources", s(&demo("case_study.sources.json")),
        "--mock-script", s(&demo("case_study.mock.json")),
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "singer");

    let records = read_records(&out).unwrap();
    assert!(matches!(records[0], TraceRecord::Run { .. }));
    assert!(matches!(records.last(), Some(TraceRecord::Result { .. })));
    let replayed = replay_file(&out).unwrap();
    let kinds: Vec<NodeKind> = replayed.graph.nodes().iter().map(|n| n.kind).collect();
    use NodeKind::*;
    assert_eq!(kinds, [Question, Retrieval, Retrieval, Retrieval, Retrieval, Answer, Stop]);
    let report = account_costs(replayed.ledger.as_ref().unwrap(), &replayed.trace, &replayed.graph, replayed.kb_sizes).unwrap();
    assert!(report.violations.is_empty());
    let retrieval_steps = replayed.trace.steps.iter().filter(|s| s.retrieval.is_some()).count();
    assert_eq!(retrieval_steps, 4);
}

#[test]
fn run_flag_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.jsonl");
    let o = apg(&[
        "run", "--question", QUESTION,
        "--sources", s(&demo("case_study.sources.json")),
        "--mock-script", s(&demo("case_study.mock.json")),
        "--max-iter", "2", "--radius-text", "0.5", "--radius-image", "0.4",
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let replayed = replay_file(&out).unwrap();
    assert_eq!(replayed.config.max_iterations, 2);
    assert_eq!(replayed.config.radius_text, 0.5);
    assert_eq!(replayed.config.radius_image, 0.4);
    assert_eq!(replayed.graph.len(), 3);

    let bad = apg(&["run", "--question", "q", "--sources", s(&demo("case_study.sources.json")), "--max-iter", "0", "--out", s(&out)]);
    assert!(!bad.status.success());
}

#[test]
fn build_kb_then_cached_run() {
    let dir = tempfile::tempdir().unwrap();
    let kb = dir.path().join("kb");
    let args = |cmd: &str| {
        vec![
            cmd.to_string(),
            "--sources".into(), s(&demo("case_study.sources.json")).into(),
            "--mock-script".into(), s(&demo("case_study.mock.json")).into(),
        ]
    };
    let mut build = args("build-kb");
    build.extend(["--out".into(), s(&kb).into()]);
    let o = Command::new(env!("CARGO_BIN_EXE_apg")).args(&build).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("built:"));
    assert!(kb.join("manifest.json").is_file());
    let o = Command::new(env!("CARGO_BIN_EXE_apg")).args(&build).output().unwrap();
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("cached:"));

    let out = dir.path().join("t.jsonl");
    let mut run = args("run");
    run.extend(["--question".into(), QUESTION.into(), "--kb-cache".into(), s(&kb).into(), "--out".into(), s(&out).into()]);
    let o = Command::new(env!("CARGO_BIN_EXE_apg")).args(&run).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "singer");
    let replayed = replay_file(&out).unwrap();
    assert!(replayed.trace.kb_build.is_none());
    assert_eq!(replayed.kb_sizes, (6, 1));
}

#[test]
fn eval_writes_report_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = apg(&[
        "eval",
        "--dataset", s(&demo("case_study.dataset.jsonl")),
        "--mock-script", s(&demo("case_study.mock.json")),
        "--workers", "2",
        "--out", s(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["overall"]["em"], 0.5);
    assert!((v["overall"]["f1"].as_f64().unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(v["overall"]["qa_acc"], 0.5);
    assert_eq!(v["error_categories"].as_array().unwrap().len(), 6);
    assert!(dir.path().join("report.traces/cs-1.jsonl").is_file());
    assert!(dir.path().join("report.traces/cs-2.jsonl").is_file());
}

#[test]
fn gap_report_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let sources = dir.path().join("sources.json");
    std::fs::write(
        &sources,
        r#"[{"id": "p1", "type": "image", "image_path": "p1.png", "caption": "a red bus"},
            {"id": "d1", "type": "text", "body": "The bus is red."}]"#,
    )
    .unwrap();
    let script = dir.path().join("mock.json");
    std::fs::write(&script, r#"{"rules": [{"purpose": "triplet", "reply": "(bus | color | red)"}]}"#).unwrap();
    let kb = dir.path().join("kb");
    let o = apg(&["build-kb", "--sources", s(&sources), "--mock-script", s(&script), "--out", s(&kb)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pairs = dir.path().join("pairs.json");
    std::fs::write(&pairs, r#"[{"caption": "p1", "text": "d1"}]"#).unwrap();
    let csv = dir.path().join("gap.csv");
    let o = apg(&["gap-report", "--kb", s(&kb), "--pairs", s(&pairs), "--out", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "text_text,text_image");
    assert_eq!(lines.len(), 2);

    std::fs::write(&pairs, "[]").unwrap();
    assert!(!apg(&["gap-report", "--kb", s(&kb), "--pairs", s(&pairs), "--out", s(&csv)]).status.success());
}

#[test]
fn custom_templates_dir() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("templates");
    assert!(apg(&["export-templates", "--out", s(&t)]).status.success());
    let out = dir.path().join("trace.jsonl");
    let run = |out: &Path| {
        apg(&[
            "run", "--question", QUESTION,
            "--sources", s(&demo("case_study.sources.json")),
            "--mock-script", s(&demo("case_study.mock.json")),
            "--templates", s(&t),
            "--out", s(out),
        ])
    };
    assert!(run(&out).status.success());
    std::fs::remove_file(t.join("reason.txt")).unwrap();
    let o = run(&out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("reason.txt"));
}

#[test]
fn abort_flushes_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("mock.json");
    std::fs::write(
        &script,
        r#"{"rules": [
            {"purpose": "triplet", "reply": "(a | b | c)"},
            {"purpose": "plan_gen", "reply": "plan"},
            {"purpose": "planning", "reply": "type: Answer\nparents: [N0]\ninstruction: guess"},
            {"purpose": "reason", "unavailable": true}
        ]}"#,
    )
    .unwrap();
    let sources = dir.path().join("s.json");
    std::fs::write(&sources, r#"[{"id": "s", "type": "text", "body": "a b c"}]"#).unwrap();
    let out = dir.path().join("trace.jsonl");
    let o = apg(&["run", "--question", "Q?", "--sources", s(&sources), "--mock-script", s(&script), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unavailable"));
    let records = read_records(&out).unwrap();
    assert!(matches!(records.last(), Some(TraceRecord::Abort { .. })));
    assert!(records.iter().any(|r| matches!(r, TraceRecord::Step(_))));
}
