mod common;

use std::process::{Command, Output};
use std::time::Duration;

use common::corpus_dir;
use trigscan::batch::{run_batch, Manifest};
use trigscan::pipeline::{analyze_source, AnalysisConfig};
use trigscan::report::{AnalysisReport, Status};

fn trigscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trigscan"))
        .args(args)
        .output()
        .expect("run trigscan")
}

fn corpus(name: &str) -> String {
    corpus_dir().join(name).display().to_string()
}

#[test]
fn time_bomb_exits_one_with_a_time_finding() {
    let out = trigscan(&["analyze", &corpus("time_bomb.tbir")]);
    assert_eq!(out.status.code(), Some(1));
    let r = AnalysisReport::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(r.findings.len(), 1);
    assert_eq!(r.counts_by_trigger["Time"], 1);
    assert_eq!(r.config.callgraph, "cha");
}

#[test]
fn empty_program_exits_zero() {
    assert_eq!(trigscan(&["analyze", &corpus("empty.tbir")]).status.code(), Some(0));
}

#[test]
fn unsupported_call_graph_is_a_usage_error() {
    let out = trigscan(&["analyze", "--callgraph", "vta", &corpus("time_bomb.tbir")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn bad_inputs_are_usage_errors() {
    assert_eq!(
        trigscan(&["analyze", "--filters", "sym,bogus", &corpus("time_bomb.tbir")]).status.code(),
        Some(2)
    );
    assert_eq!(
        trigscan(&["analyze", "--sensitive-list", "/no/such/list", &corpus("time_bomb.tbir")])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(trigscan(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unparsable_program_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tbir");
    std::fs::write(&bad, "class a.B kind Activity {\n  method m( {\n").unwrap();
    let out = trigscan(&["analyze", "--format", "text", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stdout).unwrap().contains("bad: error"));
}

#[test]
fn library_filter_clears_card_io() {
    let out = trigscan(&["analyze", "--filters", "lib", &corpus("card_io.tbir")]);
    assert_eq!(out.status.code(), Some(0));
    let r = AnalysisReport::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(r.removed_findings.len(), 1);
    assert_eq!(r.config.filters, vec!["lib"]);
}

#[test]
fn rta_clears_the_polymorphic_fixture() {
    assert_eq!(trigscan(&["analyze", &corpus("polymorphic.tbir")]).status.code(), Some(1));
    assert_eq!(
        trigscan(&["analyze", "--callgraph", "rta", &corpus("polymorphic.tbir")]).status.code(),
        Some(0)
    );
}

#[test]
fn report_file_and_text_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.txt");
    let out = trigscan(&[
        "analyze",
        "--format",
        "text",
        "--report",
        path.to_str().unwrap(),
        &corpus("sms_bomb.tbir"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.contains("SMS trigger `#sms/#body.startsWith(\"!CMD:\")`"));
    assert!(text.contains("processCmd"));
}

#[test]
fn batch_canonical_output_is_stable() {
    let manifest = corpus("manifest.tsv");
    let a = trigscan(&["batch", "--canonical", "--jobs", "3", &manifest]);
    let b = trigscan(&["batch", "--canonical", "--jobs", "1", &manifest]);
    assert_eq!(a.status.code(), Some(1));
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["summary"]["programs"], 14);
    assert_eq!(v["summary"]["mismatches"], serde_json::json!([]));
}

#[test]
fn sweep_and_synth_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = trigscan(&["synth", dir.path().to_str().unwrap(), "--count", "10", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = dir.path().join("manifest.tsv");
    let out = trigscan(&[
        "sweep",
        "--ordering",
        "most-used-first",
        "--steps",
        "3",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let points = v[0]["points"].as_array().unwrap();
    assert_eq!(points.len(), 4);
    assert_eq!(points[3]["fp"], 0.0);
    assert_eq!(points[3]["fn_rate"], 1.0);
}

#[test]
fn dump_icfg_prints_dot() {
    let out = trigscan(&["dump-icfg", &corpus("sms_bomb.tbir")]);
    assert_eq!(out.status.code(), Some(0));
    let dot = String::from_utf8(out.stdout).unwrap();
    assert!(dot.starts_with("digraph icfg"));
    assert!(dot.contains("processCmd"));
}

#[test]
fn expired_deadline_reports_timeout() {
    let text = std::fs::read_to_string(corpus_dir().join("holy_colbert.tbir")).unwrap();
    let config = AnalysisConfig {
        timeout: Some(Duration::ZERO),
        ..AnalysisConfig::default()
    };
    let r = analyze_source(&text, "holy_colbert", &config);
    assert_eq!(r.status, Status::Timeout);
    assert!(r.findings.iter().all(|f| f.partial));

    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(corpus_dir().join("holy_colbert.tbir"), dir.path().join("h.tbir")).unwrap();
    let m = Manifest::parse("h.tbir\tmalicious\n", dir.path()).unwrap();
    let b = run_batch(&m, &config, 1);
    assert_eq!(b.summary.timeouts, 1);
    assert_eq!(b.summary.success_rate, 0.0);
}
