mod common;

use std::process::{Command, Stdio};
use std::io::{BufRead, BufReader};

use common::*;
use serde_json::Value;
use tempfile::TempDir;

fn json(o: &std::process::Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn checkpoint_count(root: &std::path::Path) -> usize {
    std::fs::read_dir(root.join("checkpoints")).unwrap().count()
}

#[test]
fn init_then_sequence_builds_a_validated_lineage() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("w");
    let o = cli_init(&root, None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("validation=pass"));
    assert_eq!(checkpoint_count(&root), 1);

    let traj = peak(&root, &["--json", "trajectory", "seed"]);
    assert_eq!(error_code(&traj).as_deref(), Some("MISSING_PERF_DATA"));

    let seq = tmp.path().join("seq.txt");
    std::fs::write(&seq, "# matmul chain\nrefactor\n\ntb-tiling\nthread-tiling\n").unwrap();
    let o = peak(&root, &["--json", "run-sequence", seq.to_str().unwrap(), "--sample", "4", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&o);
    assert_eq!(r["completed"], true);
    let steps = r["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    assert!(steps.iter().all(|s| s["status"] == "success"));
    assert_eq!(checkpoint_count(&root), 4);

    let log = json(&peak(&root, &["--json", "log"]));
    for e in log.as_array().unwrap() {
        assert_eq!(e["checkpoint"]["validation"]["verdict"], "pass");
    }

    let t = &r["trajectory"]["steps"];
    let steps = t.as_array().unwrap();
    assert_eq!(steps.len(), 4);
    let mut product = 1.0;
    for s in steps {
        product *= s["step_speedup"].as_f64().unwrap();
        assert!((s["cumulative_speedup"].as_f64().unwrap() - product).abs() <= 1e-12);
    }

    let single = peak(&root, &["--json", "trajectory", "seed"]);
    assert!(single.status.success(), "{}", stderr(&single));
    let single = json(&single);
    assert_eq!(single["steps"].as_array().unwrap().len(), 1);
    assert_eq!(single["steps"][0]["cumulative_speedup"], 1.0);

    let same = json(&peak(&root, &["--json", "diff", "seed", "seed"]));
    assert!(same["regions"].as_array().unwrap().iter().all(|r| r["unified"] == ""));
}

#[test]
fn failed_transform_commits_nothing() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("w");
    let o = cli_init(&root, Some(&mock_config(&["refactor:compile-error"])));
    assert!(o.status.success(), "{}", stderr(&o));

    let o = peak(&root, &["transform", "seed", "refactor"]);
    assert!(!o.status.success());
    assert_eq!(error_code(&o).as_deref(), Some("TRANSFORM_FAILED"));
    assert!(stderr(&o).contains("exhausted_retries"), "{}", stderr(&o));
    assert_eq!(checkpoint_count(&root), 1);

    let attempts = std::fs::read_to_string(root.join("attempts.jsonl")).unwrap();
    assert_eq!(attempts.lines().count(), 1);

    let seq = tmp.path().join("seq.txt");
    std::fs::write(&seq, "refactor\ntb-tiling\n").unwrap();
    let o = peak(&root, &["--json", "run-sequence", seq.to_str().unwrap(), "--sample", "2"]);
    assert!(!o.status.success());
    let r = json(&o);
    assert_eq!(r["completed"], false);
    assert_eq!(r["steps"].as_array().unwrap().len(), 1);
    assert_eq!(checkpoint_count(&root), 1);
}

#[test]
fn errors_are_machine_readable() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("w");
    assert_eq!(error_code(&peak(&root, &["log"])).as_deref(), Some("NOT_A_STORE"));
    assert!(cli_init(&root, None).status.success());
    assert_eq!(error_code(&cli_init(&root, None)).as_deref(), Some("ALREADY_INITIALIZED"));
    assert_eq!(error_code(&peak(&root, &["transform", "ffff", "refactor"])).as_deref(), Some("UNKNOWN_CHECKPOINT"));
    assert_eq!(error_code(&peak(&root, &["transform", "seed", "nope"])).as_deref(), Some("UNKNOWN_TRANSFORMATION"));
    assert_eq!(error_code(&peak(&root, &["transform", "seed", "offset"])).as_deref(), Some("UNSUPPORTED_BACKEND"));
    assert_eq!(error_code(&peak(&root, &["tag", "bad name", "seed"])).as_deref(), Some("INVALID_ARGUMENT"));
    assert_eq!(error_code(&peak(&root, &["evaluate", "seed", "--input", "n=7"])).as_deref(), Some("INVALID_ARGUMENT"));
}

#[test]
fn tag_restore_and_reliability() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("w");
    assert!(cli_init(&root, None).status.success());
    let o = peak(&root, &["--json", "transform", "seed", "refactor"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let id = json(&o)["checkpoint"]["id"].as_str().unwrap().to_owned();

    assert!(peak(&root, &["tag", "refactored", &id[..8]]).status.success());
    let out = tmp.path().join("restored");
    assert!(peak(&root, &["restore", "refactored", "--to", out.to_str().unwrap()]).status.success());
    let device = std::fs::read_to_string(out.join("device.src")).unwrap();
    assert!(device.contains("GLOBAL_ROW"));

    let o = peak(&root, &["--json", "reliability", "seed", "refactor", "--trials", "5", "--schedule", "compile-error@2,4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&o);
    assert_eq!(r["success_rate"], 0.6);
    assert_eq!(r["compile_failure_rate"], 0.4);
    assert_eq!(std::fs::read_dir(root.join("reliability")).unwrap().count(), 1);
    // Reliability trials never commit.
    assert_eq!(checkpoint_count(&root), 2);
}

#[test]
fn second_writer_is_refused_while_serving() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("w");
    assert!(cli_init(&root, None).status.success());
    let mut server = Command::new(env!("CARGO_BIN_EXE_peak"))
        .arg("--root")
        .arg(&root)
        .args(["serve", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.starts_with("listening on http://127.0.0.1:"), "{line}");

    let refused = error_code(&peak(&root, &["tag", "x", "seed"]));
    let reads = peak(&root, &["log"]);
    server.kill().unwrap();
    server.wait().unwrap();
    assert_eq!(refused.as_deref(), Some("LOCKED"));
    assert!(reads.status.success());
    assert!(peak(&root, &["tag", "y", "seed"]).status.success());
}
