//! Driver-level checks: mode dispatch, seed resolution, the prior-cache
//! input path, and cleanup of partial outputs on failure.

use std::path::Path;
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_fomo3d")
}

fn desk_config() -> &'static str {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml")
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(binary())
        .args(args)
        .env_remove("FOMO_SEED")
        .output()
        .expect("spawning the CLI")
}

#[test]
fn selftest_mode_passes_on_clean_build() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "--config",
        desk_config(),
        "--mode",
        "selftest",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "selftest exited nonzero");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS] round_trip"));
    assert!(stdout.contains("[PASS] giou_oracle"));
    assert!(stdout.contains("[PASS] hungarian_oracle"));
    assert!(stdout.contains("[PASS] attention_oracle"));
    assert!(stdout.contains("[PASS] focal_gradient"));
    assert!(stdout.contains("[PASS] frustum_grid"));
    assert!(stdout.contains("6 passed, 0 failed"));
}

#[test]
fn unknown_mode_fails_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "--config",
        desk_config(),
        "--mode",
        "nonsense",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown mode"));
}

#[test]
fn seed_falls_back_to_environment() {
    // Config without a seed: the run must fail bare but succeed with
    // FOMO_SEED exported.
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("noseed.toml");
    let text = std::fs::read_to_string(desk_config()).unwrap();
    let stripped: String = text
        .lines()
        .filter(|l| !l.starts_with("seed"))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&cfg_path, stripped).unwrap();

    let out_dir = tmp.path().join("out");
    let out = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--scenes",
        "1",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no seed"));

    let out = Command::new(binary())
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--scenes",
            "1",
        ])
        .env("FOMO_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 42"));
}

#[test]
fn proposals_only_writes_proposals_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "--config",
        desk_config(),
        "--mode",
        "proposals-only",
        "--out",
        out_dir.to_str().unwrap(),
        "--scenes",
        "2",
    ]);
    assert!(out.status.success());
    assert!(out_dir.join("proposals.jsonl").exists());
    assert!(out_dir.join("ground_truth.jsonl").exists());
    assert!(out_dir.join("manifest.json").exists());
    assert!(!out_dir.join("metrics.txt").exists());
}

#[test]
fn priors_cache_round_trip_through_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let dump_dir = tmp.path().join("dump");
    // First run: write the prior cache alongside the reports.
    let out = run(&[
        "--config",
        desk_config(),
        "--out",
        dump_dir.to_str().unwrap(),
        "--scenes",
        "1",
        "--set",
        "dump_priors=true",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cache = dump_dir.join("priors.fomp");
    assert!(cache.exists());

    // Second run: consume the cache; identical scene, identical reports.
    let reuse_dir = tmp.path().join("reuse");
    let out = run(&[
        "--config",
        desk_config(),
        "--out",
        reuse_dir.to_str().unwrap(),
        "--scenes",
        "1",
        "--set",
        &format!("priors_cache={}", cache.display()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(dump_dir.join("detections.jsonl")).unwrap(),
        std::fs::read(reuse_dir.join("detections.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(dump_dir.join("metrics.txt")).unwrap(),
        std::fs::read(reuse_dir.join("metrics.txt")).unwrap()
    );

    // The cache only applies to single-scene runs.
    let out = run(&[
        "--config",
        desk_config(),
        "--out",
        tmp.path().join("multi").to_str().unwrap(),
        "--scenes",
        "2",
        "--set",
        &format!("priors_cache={}", cache.display()),
    ]);
    assert!(!out.status.success());
}

#[test]
fn failed_run_removes_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    // eval-only pointed at a missing dump directory fails after the output
    // dir exists; nothing may be left behind.
    let out = run(&[
        "--config",
        desk_config(),
        "--mode",
        "eval-only",
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        &format!("input={}", tmp.path().join("missing").display()),
    ]);
    assert!(!out.status.success());
    assert!(!out_dir.join("metrics.txt").exists());
    assert!(!out_dir.join("manifest.json").exists());

    // A config error (bad class) must also leave nothing.
    let out = run(&[
        "--config",
        desk_config(),
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "scene.noise.fp_rate=-1.0",
    ]);
    assert!(!out.status.success());
    assert!(!out_dir.join("detections.jsonl").exists());
}

#[test]
fn manifest_has_no_absolute_paths_or_timestamps() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "--config",
        desk_config(),
        "--out",
        out_dir.to_str().unwrap(),
        "--scenes",
        "1",
    ]);
    assert!(out.status.success());
    for name in ["metrics.txt", "detections.jsonl", "losses.txt"] {
        let text = std::fs::read_to_string(out_dir.join(name)).unwrap();
        assert!(
            !text.contains(out_dir.to_str().unwrap()) && !text.contains("/tmp"),
            "{name} leaks paths"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    for key in ["version", "mode", "seed", "scenes", "jobs", "config_sha256"] {
        assert!(manifest.get(key).is_some(), "manifest missing {key}");
    }
}
