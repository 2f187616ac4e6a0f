//! End-to-end exercise of the command-line pipeline: generate scenarios,
//! train, evaluate, merge reports. Runs the real binary.

use std::path::Path;
use std::process::Command;

use bridgead_core::config::{ModelDims, RunConfig};

const BIN: &str = env!("CARGO_BIN_EXE_bridgead");

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn assert_ok(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(path: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dims = ModelDims {
        channels: 8,
        decoder_layers: 1,
        map_points: 6,
        m_mot: 2,
        t_mot: 6,
        m_plan: 6,
        t_plan: 6,
        k_history: 2,
        t_m2m: 3,
        t_p2p: 3,
        ..ModelDims::default()
    };
    cfg.train.epochs = 1;
    cfg.train.max_frames_per_scenario = 4;
    cfg.validate().unwrap();
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    cfg
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = root.join("config.json");
    let cfg = write_config(&cfg_path);
    let cfgs = cfg_path.to_str().unwrap();
    let scen = root.join("scenarios");
    let scen_s = scen.to_str().unwrap();

    // gen: deterministic file names, one per seed
    assert_ok(&run(&["gen", "--config", cfgs, "--out", scen_s, "--count", "4"]));
    let mut names: Vec<String> = std::fs::read_dir(&scen)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 4);
    assert_eq!(names[0], "scenario_0000_000.json");
    assert!(names.iter().all(|n| n.starts_with("scenario_") && n.ends_with("_000.json")));

    // train
    let ckpt = root.join("model.ckpt");
    let train_rep = root.join("train.json");
    assert_ok(&run(&[
        "train",
        "--config", cfgs,
        "--scenarios", scen_s,
        "--out", ckpt.to_str().unwrap(),
        "--report", train_rep.to_str().unwrap(),
        "--loss-curve", root.join("loss.svg").to_str().unwrap(),
    ]));
    assert!(ckpt.exists());
    assert!(std::fs::read_to_string(root.join("loss.svg")).unwrap().starts_with("<svg"));

    // open-loop eval, twice: identical artifacts (determinism through the CLI)
    let open_json = root.join("open.json");
    let open_csv = root.join("open.csv");
    assert_ok(&run(&[
        "eval-open",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--scenarios", scen_s,
        "--out", open_json.to_str().unwrap(),
        "--csv", open_csv.to_str().unwrap(),
    ]));
    let first = std::fs::read_to_string(&open_csv).unwrap();
    assert_ok(&run(&[
        "eval-open",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--scenarios", scen_s,
        "--out", open_json.to_str().unwrap(),
        "--csv", open_csv.to_str().unwrap(),
        "--sequential",
    ]));
    assert_eq!(first, std::fs::read_to_string(&open_csv).unwrap());
    let hash_line = format!("# config_hash={}", cfg.hash());
    assert!(first.starts_with(&hash_line), "csv must embed the config hash");
    assert!(first.contains("all,l2,"));
    assert!(first.contains("all,l2_avg,"));

    // closed-loop eval
    let closed_json = root.join("closed.json");
    assert_ok(&run(&[
        "eval-closed",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--scenarios", scen_s,
        "--out", closed_json.to_str().unwrap(),
    ]));
    let closed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&closed_json).unwrap()).unwrap();
    let rows = closed["rows"].as_array().unwrap();
    assert!(rows.iter().any(|r| r["metric"] == "safety_score_mean"));

    // report: merge the two eval reports into one CSV plus a plot
    let merged = root.join("merged.csv");
    assert_ok(&run(&[
        "report",
        "--inputs", open_json.to_str().unwrap(), closed_json.to_str().unwrap(),
        "--out", merged.to_str().unwrap(),
        "--plot", root.join("metrics.svg").to_str().unwrap(),
    ]));
    let merged_text = std::fs::read_to_string(&merged).unwrap();
    assert!(merged_text.starts_with(&hash_line));
    assert!(merged_text.contains("safety_score_mean"));
    assert!(std::fs::read_to_string(root.join("metrics.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn bad_usage_fails_nonzero() {
    let out = run(&["frobnicate"]);
    assert!(!out.status.success());
    let out = run(&["train", "--scenarios", "/nonexistent", "--out", "/tmp/x.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
