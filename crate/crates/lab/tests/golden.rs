//! Reference fg run: default config, every seed 1, 30 epochs.

use std::process::Command;

const EPOCHS: &str = include_str!("golden/fg_seed1_epochs.jsonl");
const SUMMARY: &str = include_str!("golden/fg_seed1_summary.json");

#[test]
fn recorded_loss_halves_within_thirty_epochs() {
    let s: serde_json::Value = serde_json::from_str(SUMMARY).unwrap();
    let initial = s["initial_step_total"].as_f64().unwrap();
    let last: serde_json::Value = serde_json::from_str(EPOCHS.lines().last().unwrap()).unwrap();
    assert_eq!(EPOCHS.lines().count(), 30);
    assert_eq!(last["total"].as_f64(), s["final_epoch_mean_total"].as_f64());
    assert!(last["total"].as_f64().unwrap() < 0.5 * initial, "{} vs {}", last["total"], initial);
}

#[test]
fn current_build_reproduces_the_opening_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_zslab"))
        .args(["train", "--max-epochs", "2", "--out-dir", dir.path().to_str().unwrap()])
        .env("ZSLAB_SEED", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = serde_json::from_str(SUMMARY).unwrap();
    let steps = std::fs::read_to_string(dir.path().join("steps.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
    assert_eq!(first["total"].as_f64(), s["initial_step_total"].as_f64());
    let epochs = std::fs::read_to_string(dir.path().join("epochs.jsonl")).unwrap();
    let fresh: Vec<&str> = epochs.lines().collect();
    assert_eq!(fresh.len(), 2);
    assert_eq!(fresh, EPOCHS.lines().take(2).collect::<Vec<_>>());
}
