use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ringwatch_core::corpus::load_snapshots;
use ringwatch_core::detectors::{read_reports_jsonl, ReportKind};
use ringwatch_core::eval::METRICS_HEADER;
use ringwatch_core::graph::InteractionGraph;
use ringwatch_core::louvain::Partition;

fn ringwatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ringwatch"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = ringwatch(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Manifest JSON without the wall-clock fields.
fn stable_manifest(dir: &Path, name: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&read(dir, name)).unwrap();
    let obj = v.as_object_mut().unwrap();
    for key in ["started_at", "duration_seconds"] {
        assert!(obj.remove(key).is_some(), "manifest lacks {key}");
    }
    v
}

/// Synthetic forum through ingest, graph and communities.
fn pipeline() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "forum", "--seed", "3", "--honest-users", "400", "--questions", "6000", "--honest-removal-rate", "0.02", "--out-posts", "posts.jsonl", "--out-truth", "truth.json"]);
    ok(d, &["ingest", "--posts", "posts.jsonl", "--format", "jsonl", "--out-posts", "canon.jsonl", "--out-table", "table.jsonl"]);
    ok(d, &["graph", "--table", "table.jsonl", "--out", "edges.jsonl"]);
    ok(d, &["communities", "--edges", "edges.jsonl", "--out", "part.csv"]);
    tmp
}

#[test]
fn presets_match_explicit_flags() {
    let tmp = pipeline();
    let d = tmp.path();
    let base = ["detect", "community", "--edges", "edges.jsonl", "--partition", "part.csv", "--table", "table.jsonl"];
    let cases: [(&str, &[&str]); 4] = [
        ("C9", &["--detector", "GC_V1", "--tau-l", "8", "--tau-t-hours", "24"]),
        ("C2", &["--detector", "GC_V2", "--tau-l", "6"]),
        ("C13", &["--detector", "GC_V3", "--tau-qb", "0.89"]),
        ("C20", &["--detector", "GC_V3", "--similarity", "code", "--tau-qc", "0.9", "--tau-ac", "0.9", "--require-answer-similarity"]),
    ];
    for (preset, flags) in cases {
        let mut a: Vec<&str> = base.to_vec();
        a.extend(["--preset", preset, "--out", "preset.jsonl"]);
        ok(d, &a);
        let mut b: Vec<&str> = base.to_vec();
        b.extend(flags);
        b.extend(["--out", "explicit.jsonl"]);
        ok(d, &b);
        let reports = read(d, "preset.jsonl");
        assert_eq!(reports, read(d, "explicit.jsonl"), "{preset}");
        assert!(!reports.is_empty(), "{preset} flagged nothing on a forum with planted rings");
        let m = stable_manifest(d, "explicit.jsonl.manifest.json");
        assert_eq!(m["preset"], preset);
    }

    let snap = ["synth", "snapshots", "--seed", "1", "--honest-users", "500", "--plant", "9001:200", "--out", "snap.csv", "--out-truth", "snap_truth.json"];
    ok(d, &snap);
    ok(d, &["detect", "user", "--snapshots", "snap.csv", "--preset", "C2", "--out", "a.jsonl"]);
    ok(d, &["detect", "user", "--snapshots", "snap.csv", "--tau-r", "65", "--dump-m", "D2", "--dump-n", "D1", "--out", "b.jsonl"]);
    assert_eq!(read(d, "a.jsonl"), read(d, "b.jsonl"));
}

#[test]
fn synth_is_deterministic_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = ["synth", "forum", "--seed", "7", "--honest-users", "200", "--questions", "2000", "--out-posts", "p.jsonl", "--out-truth", "t.json"];
    ok(d, &args);
    let first = (read(d, "p.jsonl"), read(d, "t.json"), stable_manifest(d, "p.jsonl.manifest.json"));
    ok(d, &args);
    let second = (read(d, "p.jsonl"), read(d, "t.json"), stable_manifest(d, "p.jsonl.manifest.json"));
    assert_eq!(first, second);
    assert_eq!(first.2["seed"], 7);

    fs::copy(d.join("p.jsonl.manifest.json"), d.join("saved.json")).unwrap();
    fs::remove_file(d.join("p.jsonl")).unwrap();
    ok(d, &["replay", "--manifest", "saved.json"]);
    assert_eq!(read(d, "p.jsonl"), first.0);
    assert_eq!(stable_manifest(d, "p.jsonl.manifest.json"), first.2);
}

#[test]
fn replay_reproduces_a_detector_run() {
    let tmp = pipeline();
    let d = tmp.path();
    ok(d, &["detect", "community", "--edges", "edges.jsonl", "--partition", "part.csv", "--preset", "C1", "--out", "r.jsonl", "--manifest-out", "run.json"]);
    let before = read(d, "r.jsonl");
    fs::write(d.join("r.jsonl"), b"").unwrap();
    ok(d, &["replay", "--manifest", "run.json"]);
    assert_eq!(read(d, "r.jsonl"), before);
    assert!(!d.join("r.jsonl.manifest.json").exists(), "an explicit manifest path was ignored");
}

#[test]
fn outputs_follow_their_schemas() {
    let tmp = pipeline();
    let d = tmp.path();
    let graph = InteractionGraph::read_jsonl(fs::read(d.join("edges.jsonl")).unwrap().as_slice()).unwrap();
    for line in fs::read_to_string(d.join("edges.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, BTreeSet::from(["asker", "answerer", "e_key", "e_accepted", "e_time_seconds"]));
        let key = v["e_key"].as_str().unwrap();
        let (q, a) = key.split_once('/').unwrap();
        assert!(q.parse::<u64>().is_ok() && a.parse::<u64>().is_ok());
    }
    let part_text = fs::read_to_string(d.join("part.csv")).unwrap();
    assert!(part_text.starts_with("# modularity_q="));
    let partition = Partition::read_csv(part_text.as_bytes()).unwrap();
    assert_eq!(partition.assignment().len(), graph.node_count());

    ok(d, &["detect", "community", "--edges", "edges.jsonl", "--partition", "part.csv", "--preset", "C5", "--out", "r.jsonl"]);
    let reports = read_reports_jsonl(fs::read(d.join("r.jsonl")).unwrap().as_slice()).unwrap();
    assert!(!reports.is_empty());
    for r in &reports {
        assert_eq!(r.kind, ReportKind::Community);
        assert!(r.recheck().unwrap());
    }

    ok(d, &["evaluate", "--reports", "r.jsonl", "--truth", "truth.json", "--edges", "edges.jsonl", "--table", "table.jsonl", "--sample-size", "auto", "--out-csv", "m.csv", "--out-json", "m.json"]);
    let csv = fs::read_to_string(d.join("m.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), METRICS_HEADER.len());
    assert_eq!(&row[..2], &["GC_V1", "C5"]);
    let counts: Vec<u64> = row[6..].iter().map(|c| c.parse().unwrap()).collect();
    assert_eq!(counts.iter().sum::<u64>() as usize, graph.node_count());
    let json: serde_json::Value = serde_json::from_slice(&read(d, "m.json")).unwrap();
    let first = &json[0];
    for key in ["confusion", "metrics", "coverage", "proximity", "relative_recall", "community_match"] {
        assert!(first.get(key).is_some(), "report JSON lacks {key}");
    }
    let prox: Vec<u64> = first["proximity"]["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect();
    assert!(prox.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn user_side_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "snapshots", "--seed", "4", "--honest-users", "3000", "--plant", "90001:200", "--plant", "90002:300", "--out", "s.csv", "--out-truth", "t.json"]);
    let set = load_snapshots(fs::read(d.join("s.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(set.dumps().len(), 2);
    ok(d, &["detect", "user", "--snapshots", "s.csv", "--preset", "C3", "--out", "jump.jsonl"]);
    ok(d, &["baseline", "up", "--snapshots", "s.csv", "--out", "up.jsonl"]);
    ok(d, &["baseline", "down", "--snapshots", "s.csv", "--out", "down.jsonl"]);
    ok(d, &["evaluate", "--reports", "jump.jsonl", "--reports", "up.jsonl", "--reports", "down.jsonl", "--truth", "t.json", "--snapshots", "s.csv", "--out-csv", "m.csv", "--out-json", "m.json"]);
    let csv = fs::read_to_string(d.join("m.csv")).unwrap();
    let jump = csv.lines().find(|l| l.starts_with("JUMP,C3,")).expect("jump row");
    assert!(jump.starts_with("JUMP,C3,1,1,1,1,2,0,0,"), "{jump}");
    assert!(csv.lines().any(|l| l.starts_with("B_U,")) && csv.lines().any(|l| l.starts_with("B_D,")));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let code = |args: &[&str]| ringwatch(d, args).status.code();
    assert_eq!(code(&["metrics"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["graph", "--table", "x", "--out", "y", "--bogus"]), Some(2));
    assert_eq!(code(&["detect", "community", "--edges", "e", "--partition", "p", "--out", "o"]), Some(2));
    assert_eq!(code(&["detect", "community", "--edges", "e", "--partition", "p", "--preset", "C9", "--tau-l", "3", "--out", "o"]), Some(2));
    assert_eq!(code(&["graph", "--table", "missing.jsonl", "--out", "y"]), Some(1));
    fs::write(d.join("bad.jsonl"), "{not json}\n").unwrap();
    assert_eq!(code(&["graph", "--table", "bad.jsonl", "--out", "y"]), Some(1));
    assert_eq!(code(&["metrics", "--tp", "3", "--fp", "1", "--fn", "1", "--tn", "5"]), Some(0));
    assert_eq!(code(&["--help"]), Some(0));

    let out = ringwatch(d, &["metrics"]);
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = ringwatch(d, &["metrics", "--tp", "3", "--fp", "1", "--fn", "1", "--tn", "5"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["f1"]["value"], 0.75);
    assert_eq!(v["accuracy"]["value"], 0.8);
}

#[test]
fn thread_cap_is_honoured_and_checked() {
    let tmp = pipeline();
    let d = tmp.path();
    let run = |threads: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_ringwatch"))
            .args(["detect", "community", "--edges", "edges.jsonl", "--partition", "part.csv", "--table", "table.jsonl", "--preset", "C17", "--out", out])
            .current_dir(d)
            .env("RINGWATCH_THREADS", threads)
            .output()
            .unwrap()
    };
    assert!(run("1", "one.jsonl").status.success());
    assert!(run("4", "four.jsonl").status.success());
    assert_eq!(read(d, "one.jsonl"), read(d, "four.jsonl"));
    assert_eq!(run("0", "zero.jsonl").status.code(), Some(2));
    assert_eq!(run("many", "zero.jsonl").status.code(), Some(2));
}
