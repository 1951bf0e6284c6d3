//! Shared fixtures: the scripted hotel corpus and configs pointing at it.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hotels")
}

pub fn dataset_path() -> PathBuf {
    fixture_dir().join("dataset.jsonl")
}

pub fn dump_path() -> PathBuf {
    fixture_dir().join("hotels.sql")
}

pub fn script_path() -> PathBuf {
    fixture_dir().join("mock_script.json")
}

/// A config over the hotel corpus using the scripted backend, with cache and
/// outputs under `dir`.
pub fn scripted_config(dir: &Path) -> Value {
    json!({
        "dataset": {"path": dataset_path(), "format": "canonical"},
        "backends": {"llm": {"kind": "scripted_mock", "script_path": script_path()}},
        "stages": {
            "interp": {"backend": "llm", "model": "scripted"},
            "infill": {"backend": "llm", "model": "scripted"},
            "text2sql": {"backend": "llm", "model": "scripted"}
        },
        "cache_path": dir.join("cache.jsonl"),
        "output_dir": dir.join("out"),
        "concurrency": 4,
        "seed": 13
    })
}

/// The same config with the backend switched to replay-only.
pub fn replay_config(dir: &Path) -> Value {
    let mut cfg = scripted_config(dir);
    cfg["backends"]["llm"] = json!({"kind": "replay_only"});
    cfg
}

pub fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}
