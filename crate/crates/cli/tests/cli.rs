use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn arena(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arena"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = arena(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    arena(dir, args).status.code().expect("exit code")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

const SMALL: &str = "[simulation]\nprompts = 40\n[scheduler]\nn0_pairs = 40\n";

fn small_study(dir: &Path, seed: &str, tag: &str) {
    std::fs::write(dir.join("small.toml"), SMALL).unwrap();
    ok(
        dir,
        &[
            "simulate", "run", "--seed", seed, "--annotators", "2", "--config", "small.toml",
            "--records-out", &format!("{tag}.jsonl"),
            "--study-out", &format!("{tag}-study.json"),
            "--out", &format!("{tag}-summary.json"),
        ],
    );
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    for tag in ["a", "b"] {
        small_study(d, "11", tag);
        ok(d, &["estimate", "--records", &format!("{tag}.jsonl"), "--out", &format!("{tag}-est.json")]);
        for mode in ["estimate-only", "full-dynamic"] {
            ok(
                d,
                &[
                    "bootstrap", "--records", &format!("{tag}.jsonl"), "--resamples", "20", "--seed", "3",
                    "--mode", mode, "--config", "small.toml", "--study", &format!("{tag}-study.json"),
                    "--out", &format!("{tag}-{mode}.json"),
                ],
            );
        }
    }
    for suffix in [".jsonl", "-study.json", "-summary.json", "-est.json", "-estimate-only.json", "-full-dynamic.json"] {
        assert_eq!(read(d, &format!("a{suffix}")), read(d, &format!("b{suffix}")), "{suffix} differs");
    }

    small_study(d, "12", "c");
    assert_ne!(read(d, "a.jsonl"), read(d, "c.jsonl"));
}

#[test]
fn simulate_summary_and_estimate_agree_on_models() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_study(d, "5", "s");
    let summary: Value = serde_json::from_slice(&read(d, "s-summary.json")).unwrap();
    assert_eq!(summary["sessions"].as_object().unwrap().len(), 2);
    let lines = read(d, "s.jsonl").iter().filter(|b| **b == b'\n').count();
    assert_eq!(summary["records"].as_u64().unwrap() as usize, lines);

    ok(d, &["estimate", "--records", "s.jsonl", "--tally-out", "tally.csv", "--out", "est.json"]);
    let est: Value = serde_json::from_slice(&read(d, "est.json")).unwrap();
    let ranking = &est["metrics"]["human_preference"]["ranking"];
    assert_eq!(ranking.as_array().unwrap().len(), 5);
    assert_eq!(ranking[0], "model-5");
    assert!(String::from_utf8(read(d, "tally.csv")).unwrap().lines().count() > 1);
}

#[test]
fn report_renders_table_and_json() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    small_study(d, "2", "r");
    let table = String::from_utf8(ok(d, &["report", "--input", "r.jsonl"])).unwrap();
    assert!(table.contains("human_preference"));
    let json: Value =
        serde_json::from_slice(&ok(d, &["report", "--input", "r.jsonl", "--json", "--resamples", "10"])).unwrap();
    assert!(json["confidence"].is_object());
}

#[test]
fn plan_accepts_study_specs_and_raw_features() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let mut videos = Vec::new();
    let mut csv = String::from("video_id,video_quality,text_alignment\n");
    for p in 0..3 {
        for (m, model) in ["x", "y", "z"].iter().enumerate() {
            let id = format!("{model}-{p}");
            videos.push(serde_json::json!({"id": id, "model_id": model, "prompt_id": format!("p{p}"), "uri": format!("{id}.mp4")}));
            csv.push_str(&format!("{id},{},{}\n", p + m, 10 * m));
        }
    }
    std::fs::write(d.join("videos.json"), serde_json::to_vec(&videos).unwrap()).unwrap();
    std::fs::write(d.join("features.csv"), &csv).unwrap();

    let scores: Value = serde_json::from_slice(&ok(d, &["ingest", "--features", "features.csv"])).unwrap();
    assert_eq!(scores.as_object().unwrap().len(), 9);

    assert_eq!(code(d, &["plan", "--videos", "videos.json"]), 2, "videos lack feature scores");
    let plan: Value =
        serde_json::from_slice(&ok(d, &["plan", "--videos", "videos.json", "--features", "features.csv"])).unwrap();
    assert_eq!(plan["total_pairs"], 9);
    assert_eq!(plan["pairs"].as_array().unwrap().len(), 9);
}

#[test]
fn exit_codes_follow_failure_kind() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["estimate", "--records", "missing.jsonl"]), 4);

    std::fs::write(d.join("junk.jsonl"), "{\"nope\": 1}\n").unwrap();
    assert_eq!(code(d, &["estimate", "--records", "junk.jsonl"]), 2);

    std::fs::write(d.join("typo.toml"), "[scheduler]\nalhpa = 1.0\n").unwrap();
    assert_eq!(code(d, &["simulate", "run", "--seed", "1", "--config", "typo.toml"]), 2);

    std::fs::write(d.join("bad.toml"), "[bootstrap]\nn_resamples = 0\n").unwrap();
    assert_eq!(code(d, &["simulate", "cost", "--seed", "1", "--config", "bad.toml"]), 2);

    small_study(d, "1", "x");
    assert_eq!(
        code(d, &["bootstrap", "--records", "x.jsonl", "--mode", "full-dynamic", "--resamples", "5"]),
        2,
        "full-dynamic without a plan"
    );
}
