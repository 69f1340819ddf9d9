mod common;

use std::fs;
use std::path::Path;
use std::process::Output;

use ppsr_core::eval::MetricReport;
use ppsr_core::pipeline::Layout;
use ppsr_core::rerank;

use common::*;

fn run(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = ppsr();
    cmd.args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().unwrap()
}

fn pipeline_work(dir: &Path, until: Option<&str>) -> Layout {
    let f = office_dir();
    let mut cmd = ppsr();
    cmd.args(["pipeline", "--name", "office"])
        .arg("--meta")
        .arg(f.join("metadata.jsonl"))
        .arg("--interactions")
        .arg(f.join("interactions.jsonl"))
        .arg("--base")
        .arg(f.join("base.jsonl"))
        .arg("--work")
        .arg(dir);
    if let Some(u) = until {
        cmd.args(["--until", u]);
    }
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    Layout::new(dir)
}

#[test]
fn prompt_render_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let l = pipeline_work(dir.path(), Some("embed"));
    let out = run(
        &[
            "prompt",
            "render",
            "--log",
            "U01#5",
            "--candidate",
            "B000CARD04",
        ],
        &[
            ("--dataset", &l.dataset()),
            ("--store", &l.store()),
            ("--summaries", &l.summaries()),
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let golden =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/prompt_U01_5_B000CARD04.txt");
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        fs::read_to_string(golden).unwrap()
    );
}

#[test]
fn prompt_list_names_builtin_templates() {
    let out = run(&["prompt", "list"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for id in ["rerank", "summary"] {
        assert!(text.lines().any(|l| l.starts_with(id)), "{text}");
    }
}

#[test]
fn rerank_and_evaluate_commands() {
    let dir = tempfile::tempdir().unwrap();
    let l = pipeline_work(dir.path(), Some("embed"));
    let base = office_dir().join("base.jsonl");
    let ranked = dir.path().join("cli.jsonl");
    let out = run(
        &["rerank"],
        &[
            ("--dataset", &l.dataset()),
            ("--base", &base),
            ("--store", &l.store()),
            ("--summaries", &l.summaries()),
            ("--out", &ranked),
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let runs = rerank::load_rankings(&ranked).unwrap();
    assert_eq!(runs.len(), 12);
    assert!(runs.values().all(|r| r.len() == 10));

    let base_report = dir.path().join("base_report.json");
    let out = run(
        &["evaluate"],
        &[
            ("--run", &base),
            ("--test", &l.dataset()),
            ("--out", &base_report),
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report_path = dir.path().join("report.json");
    let out = run(
        &["evaluate", "--metrics", "M@8,R@1"],
        &[
            ("--run", &ranked),
            ("--test", &l.dataset()),
            ("--baseline", &base_report),
            ("--out", &report_path),
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = MetricReport::load(&report_path).unwrap();
    assert_eq!(report.metric_order, vec!["M@8", "R@1"]);
    assert_eq!(report.log_count, 12);
    assert!(report.rel_impr.is_some());
    assert!(String::from_utf8(out.stdout).unwrap().contains("M@8"));
}

#[test]
fn stage2_emit_without_store_fails() {
    let dir = tempfile::tempdir().unwrap();
    let l = pipeline_work(dir.path(), Some("summarize"));
    let out = run(
        &["emit-train", "--stage", "stage2"],
        &[
            ("--dataset", &l.dataset()),
            ("--base", &office_dir().join("base.jsonl")),
            ("--out", &dir.path().join("t2.jsonl")),
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing embedding store"));
}

#[test]
fn stale_artifact_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let l = pipeline_work(dir.path(), None);
    fs::write(l.reranked(), "{}\n").unwrap();
    let f = office_dir();
    let out = ppsr()
        .args(["pipeline", "--name", "office"])
        .arg("--meta")
        .arg(f.join("metadata.jsonl"))
        .arg("--interactions")
        .arg(f.join("interactions.jsonl"))
        .arg("--base")
        .arg(f.join("base.jsonl"))
        .arg("--work")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stale"));
}

#[test]
fn unknown_backend_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let l = pipeline_work(dir.path(), Some("ingest"));
    let out = run(
        &["--backend", "nonsense", "embed"],
        &[
            ("--dataset", &l.dataset()),
            ("--out", &dir.path().join("e.jsonl")),
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}
