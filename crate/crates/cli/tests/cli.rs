use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--max-contexts",
    "40",
    "--n-controls",
    "20",
    "--n-bootstrap",
    "5",
    "--louvain-restarts",
    "5",
    "--n-random-heads",
    "3",
];

fn plateau(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plateau"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("a.actv");
    let sim = json(&plateau(&with_small(&["simulate", "--dump", s(&dump)])));
    assert_eq!(sim["planted_neurons"], serde_json::json!([0, 1, 2, 3]));
    let ing = json(&plateau(&["ingest", s(&dump)]));
    assert_eq!(ing["neurons"], sim["neurons"]);
    assert_eq!(ing["rare_contexts"], sim["rare_contexts"]);
    assert_eq!(ing["model"], sim["model"]);
}

#[test]
fn report_writes_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rep");
    let summary = json(&plateau(&with_small(&["report", "-o", s(&out)])));
    let files = summary["files"].as_array().unwrap();
    for name in ["report.json", "table1_communities.csv", "table2_ablation.csv", "influence_rare.csv"] {
        assert!(files.iter().any(|f| f == name), "{name} listed");
        assert!(out.join(name).is_file(), "{name} written");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["skipped"].as_array().unwrap().is_empty());
}

#[test]
fn subcommands_write_their_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("influence", "influence_common.csv"),
        ("graph", "plateau_partition.csv"),
        ("communities", "table1_communities.csv"),
        ("attention", "attention_heads.csv"),
        ("ablate", "table2_ablation.csv"),
    ];
    for (cmd, file) in cases {
        let out = dir.path().join(cmd);
        json(&plateau(&with_small(&[cmd, "-o", s(&out)])));
        assert!(out.join(file).is_file(), "{cmd} wrote {file}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(plateau(&["graph", "--no-such-flag", "1"]).status.code(), Some(2));
    assert_eq!(plateau(&["graph", "--seed", "minus one"]).status.code(), Some(2));
    assert_eq!(plateau(&[]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "seed = 1\nno_such_key = 3\n").unwrap();
    let out = plateau(&["simulate", "-c", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn corrupt_dump_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.actv");
    std::fs::write(&bad, b"NOPE and then some").unwrap();
    let out = plateau(&["ingest", s(&bad)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "split_mode = percentile\nsplit_percentile = 30\nd_mlp = 48\n").unwrap();
    let dump = dir.path().join("a.actv");
    let sim = json(&plateau(&with_small(&[
        "simulate",
        "-c",
        s(&cfg),
        "--d-mlp",
        "40",
        "--dump",
        s(&dump),
    ])));
    assert_eq!(sim["neurons"], 40);
    let rare = sim["rare_tokens"].as_u64().unwrap();
    let common = sim["common_tokens"].as_u64().unwrap();
    assert_eq!(rare, ((rare + common) as f64 * 0.3).round() as u64);
}

#[test]
fn dump_mode_report() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("a.actv");
    json(&plateau(&with_small(&["simulate", "--dump", s(&dump)])));
    let out = dir.path().join("rep");
    let summary = json(&plateau(&with_small(&[
        "report",
        "--source",
        "dump",
        "--dump-path",
        s(&dump),
        "--plateau-neurons",
        "0,1,2,3",
        "-o",
        s(&out),
    ])));
    let files = summary["files"].as_array().unwrap();
    assert!(!files.iter().any(|f| f == "table2_ablation.csv"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let stages: Vec<&str> = report["skipped"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x["stage"].as_str().unwrap())
        .collect();
    assert!(stages.contains(&"influence") && stages.contains(&"ablation"));
}

#[test]
fn dump_mode_without_plateau_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("a.actv");
    json(&plateau(&with_small(&["simulate", "--dump", s(&dump)])));
    let out = plateau(&["communities", "--source", "dump", "--dump-path", s(&dump)]);
    assert_eq!(out.status.code(), Some(2));
}
