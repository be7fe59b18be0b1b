use std::path::Path;
use std::process::{Command, Output};

use pixart::pipeline::{MockBehavior, MockScript, MockServer};

fn pixart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixart"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pixart(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SHORT: [&str; 8] = [
    "--set",
    "stage.0.steps=2",
    "--set",
    "stage.1.steps=2",
    "--set",
    "stage.2.steps=2",
    "--set",
    "checkpoint_every=0",
];

#[test]
fn synth_plan_sample_reparam_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ok(&["synth", "--out", s(dir.path())]);
    let plan = plan.trim();

    let mut args = vec!["plan", "--config", plan];
    args.extend(SHORT);
    let finals: Vec<String> = ok(&args).lines().map(String::from).collect();
    assert_eq!(finals.len(), 3);
    let ledger = std::fs::read_to_string(dir.path().join("runs/ledger.jsonl")).unwrap();
    assert_eq!(
        ledger
            .lines()
            .filter(|l| l.contains("\"kind\":\"step\""))
            .count(),
        6
    );

    let samples = dir.path().join("samples");
    ok(&[
        "sample",
        "--checkpoint",
        &finals[2],
        "--prompt",
        "a red square",
        "--sweep",
        "--steps",
        "4",
        "--out",
        s(&samples),
    ]);
    let meta = std::fs::read_to_string(samples.join("samples.jsonl")).unwrap();
    assert_eq!(meta.lines().count(), 6);

    let out = pixart(&[
        "sample",
        "--checkpoint",
        &finals[0],
        "--prompt",
        "x",
        "--out",
        s(&samples),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let surged = dir.path().join("surged.ckpt");
    let report = dir.path().join("report.json");
    ok(&[
        "reparam",
        "--source",
        &finals[0],
        "--t-star",
        "500",
        "--out",
        s(&surged),
        "--report",
        s(&report),
    ]);
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(rep["max_modulation_residual"].as_f64().unwrap() < 1e-10);

    let kv = dir.path().join("stats.kv");
    let table = ok(&[
        "analyze",
        "--manifest",
        s(&dir.path().join("data/square/manifest.jsonl")),
        "--threshold",
        "10",
        "--out",
        s(&kv),
    ]);
    assert!(table.contains("VN/DN") && table.contains("Total Noun") && table.contains("Average"));
    let kv = std::fs::read_to_string(kv).unwrap();
    assert!(kv.contains("a.total_nouns="));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ok(&["synth", "--out", s(dir.path())]);
    let plan = plan.trim();

    let out = pixart(&["plan", "--config", plan, "--set", "stage.0.lr=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pixart(&[
        "plan",
        "--config",
        plan,
        "--set",
        "stage.0.multi_aspect=true",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = pixart(&[
        "plan",
        "--config",
        plan,
        "--set",
        "stage.0.manifest_path=/nonexistent.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let out = pixart(&[
        "plan",
        "--config",
        plan,
        "--set",
        "stage.0.lr=1e300",
        "--set",
        "stage.0.steps=4",
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = pixart(&[
        "reparam",
        "--source",
        plan,
        "--out",
        s(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn autolabel_against_mock_server() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", s(dir.path())]);
    let manifest = dir.path().join("data/square/manifest.jsonl");
    let script = MockScript::fixed("labelled").with("s00003", MockBehavior::AlwaysFail);
    let server = MockServer::start(script).unwrap();
    let out = dir.path().join("relabelled.jsonl");
    let endpoint = server.addr.to_string();
    ok(&[
        "autolabel",
        "--manifest",
        s(&manifest),
        "--endpoint",
        &endpoint,
        "--backoff",
        "0",
        "--out",
        s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 63);
    assert!(text.lines().all(|l| l.contains("\"caption\":\"labelled\"")));
    let q = std::fs::read_to_string(out.with_extension("quarantine.jsonl")).unwrap();
    assert!(q.contains("s00003"));
    assert_eq!(server.service.attempts("s00003"), 6);
}
