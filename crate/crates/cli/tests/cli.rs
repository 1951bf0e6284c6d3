mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ambisql(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ambisql")).args(args).output().expect("spawn ambisql")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn eval_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "run.json", &common::scripted_config(dir.path()));
    let out = dir.path().join("eval");
    let o = ambisql(&["eval", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["pipeline_results.jsonl", "match_reports.jsonl", "metrics.json", "metrics.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(read_jsonl(&out.join("pipeline_results.jsonl")).len(), 6);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["full_cov"], json!(50.0));
    assert!(stdout(&o).contains("method=ours examples=6 failed=0"));
}

#[test]
fn eval_json_flag_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "run.json", &common::scripted_config(dir.path()));
    let o = ambisql(&["eval", "--config", cfg.to_str().unwrap(), "--json", "--comparison", "ordered"]);
    assert!(o.status.success());
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["n_examples"], json!(6));
}

#[test]
fn gold_interps_skip_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "run.json", &common::scripted_config(dir.path()));
    let o = ambisql(&["eval", "--config", cfg.to_str().unwrap(), "--method", "gold_interps"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = read_jsonl(&dir.path().join("out/pipeline_results.jsonl"));
    for r in &results {
        for i in r["interpretations"].as_array().unwrap() {
            assert_eq!(i["provenance"], json!("gold_reference"));
        }
        assert!(r["trace"].as_array().unwrap().iter().all(|t| t["stage"] == json!("text2sql")));
    }
}

#[test]
fn interp_prompt_is_ours_without_infill() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "run.json", &common::scripted_config(dir.path()));
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(ambisql(&["eval", "--config", cfg, "--method", "interp_prompt", "--out", a.to_str().unwrap()]).status.success());
    assert!(ambisql(&["eval", "--config", cfg, "--no-infill", "--out", b.to_str().unwrap()]).status.success());
    for f in ["pipeline_results.jsonl", "match_reports.jsonl", "metrics.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let results = fs::read_to_string(a.join("pipeline_results.jsonl")).unwrap();
    assert!(!results.contains("\"stage\":\"infill\""));
}

#[test]
fn missing_dataset_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::scripted_config(dir.path());
    cfg["dataset"]["path"] = json!(dir.path().join("nope.jsonl"));
    let cfg = common::write_config(dir.path(), "run.json", &cfg);
    let o = ambisql(&["eval", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_stage_backend_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::scripted_config(dir.path());
    cfg["stages"].as_object_mut().unwrap().remove("infill");
    let cfg = common::write_config(dir.path(), "run.json", &cfg);
    let o = ambisql(&["eval", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("infill"));
    // The baseline that needs no infiller still runs.
    assert!(ambisql(&["eval", "--config", cfg.to_str().unwrap(), "--no-infill"]).status.success());
}

#[test]
fn run_prints_three_readings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "run.json", &common::scripted_config(dir.path()));
    let db = common::dump_path();
    let args = ["run", "--config", cfg.to_str().unwrap(), "--db", db.to_str().unwrap(), "Return the rating of each hotel."];
    let o = ambisql(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("[1] How many stars were assigned to each hotel?"));
    assert!(text.contains("[3] What are the stars and guest score of each hotel?"));
    assert!(!text.contains("[4]"));

    let mut json_args = args.to_vec();
    json_args.push("--json");
    let o = ambisql(&json_args);
    let text = stdout(&o);
    assert_eq!(text.trim().lines().count(), 1);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["final_queries"].as_array().unwrap().len(), 3);
}

#[test]
fn run_rejects_malformed_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "run.json", &common::scripted_config(dir.path()));
    let bad = dir.path().join("bad.sql");
    fs::write(&bad, "CREATE TABLE t(a INT;\n").unwrap();
    let o = ambisql(&["run", "--config", cfg.to_str().unwrap(), "--db", bad.to_str().unwrap(), "anything"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.sql"));
}

#[test]
fn annotate_counts_match_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "run.json", &common::scripted_config(dir.path()));
    let o = ambisql(&["annotate-infill", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // Covered: `bern` and `names`. Every other example misses a reading.
    assert_eq!(stdout(&o).trim(), "total=6 sentinel=2 skipped=0");
    let records = read_jsonl(&dir.path().join("out/infill_train.jsonl"));
    assert_eq!(records[0]["target"], json!("What are the stars and guest score of each hotel?"));
    assert_eq!(records[5]["target"], json!("Count the hotels."));
    assert!(dir.path().join("out/infill_instruct.jsonl").exists());
}

#[test]
fn annotate_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let mut cfg = common::scripted_config(dir.path());
    cfg["dataset"]["path"] = json!(empty);
    let cfg = common::write_config(dir.path(), "run.json", &cfg);
    let o = ambisql(&["annotate-infill", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "total=0 sentinel=0 skipped=0");
}

#[test]
fn synthesize_with_failing_validator_accepts_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let dump = common::dump_path();
    let records = [
        json!({"example_id": "p1", "db_id": "hotels", "db_dump_path": dump, "question": "Show the rating of hotels.",
               "gold_sql": ["SELECT name, stars FROM hotels", "SELECT name, guest_score FROM hotels"],
               "tags": [], "synonyms": ["stars", "guest score"]}),
        json!({"example_id": "p2", "db_id": "hotels", "db_dump_path": dump, "question": "Show the town of hotels.",
               "gold_sql": ["SELECT name, city FROM hotels", "SELECT DISTINCT city FROM hotels"],
               "tags": [], "synonyms": ["city", "location"]}),
    ];
    let data = dir.path().join("pairs.jsonl");
    fs::write(&data, records.iter().map(|r| r.to_string() + "\n").collect::<String>()).unwrap();
    let cfg = json!({
        "dataset": {"path": data},
        "backends": {
            "rewriter": {"kind": "scripted_mock", "script": {"rules": [], "on_miss": {"default": "A rewritten question."}}},
            "validator": {"kind": "scripted_mock", "script": {"rules": [], "on_miss": {"default": "SELECT 1"}}}
        },
        "stages": {
            "rewrite": {"backend": "rewriter", "model": "r"},
            "validator": {"backend": "validator", "model": "v"}
        },
        "output_dir": dir.path().join("out")
    });
    let cfg = common::write_config(dir.path(), "synth.json", &cfg);
    let o = ambisql(&["synthesize", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "total=2 accepted=0 rejected=2 skipped=0");
    let outcomes = read_jsonl(&dir.path().join("out/synthesis.jsonl"));
    assert!(outcomes.iter().all(|o| o["records"].as_array().unwrap().iter().all(|r| r["attempts_used"] == json!(5))));
    assert_eq!(fs::read_to_string(dir.path().join("out/synthesized_examples.jsonl")).unwrap(), "");
}

#[test]
fn report_rerenders_stored_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "run.json", &common::scripted_config(dir.path()));
    assert!(ambisql(&["eval", "--config", cfg.to_str().unwrap()]).status.success());
    let out = dir.path().join("out");
    let o = ambisql(&["report", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), fs::read_to_string(out.join("metrics.txt")).unwrap());

    let via_config = ambisql(&["report", "--config", cfg.to_str().unwrap(), "--json"]);
    let summary: Value = serde_json::from_str(&stdout(&via_config)).unwrap();
    assert_eq!(summary["full_cov"], json!(50.0));

    let ordered = ambisql(&["report", out.to_str().unwrap(), "--comparison", "ordered", "--json"]);
    assert!(ordered.status.success());
}

#[test]
fn unknown_method_rejected() {
    let o = ambisql(&["eval", "--config", "x.json", "--method", "magic"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("e2e_3shot"));
}
