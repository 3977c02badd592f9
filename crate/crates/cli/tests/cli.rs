use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "scenarios": { "count": 5, "agent_count": 2, "lanes_per_approach": [1, 2] },
  "dataset": {
    "extract": { "raster": { "height_px": 16, "width_px": 16, "resolution": 6.0 } },
    "windows_per_agent": 2
  },
  "model": {
    "raster_height": 16, "raster_width": 16,
    "scene": { "fc_width": 16 },
    "sequence": { "lstm_hidden": 16, "conv_channels": 8 },
    "refiner_width": 8,
    "decoder": { "gru_hidden": 16, "fc_widths": [16, 16] },
    "baseline": { "lstm_hidden": 16, "fc_width": 16 }
  },
  "train": { "max_epochs": 2, "batch_size": 16 }
}"#;

fn sapi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sapi"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "failed: {}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    o
}

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        std::fs::write(&config, TINY).unwrap();
        Workspace { dir, config }
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args = vec![cmd, "--config", self.config.to_str().unwrap()];
        args.extend_from_slice(extra);
        sapi(self.dir.path(), &args)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

#[test]
fn generate_zero_scenarios_writes_empty_file() {
    let ws = Workspace::new();
    ok(ws.run("generate", &["--set", "scenarios.count=0"]));
    assert_eq!(std::fs::read(ws.path("scenarios.jsonl")).unwrap().len(), 0);
}

#[test]
fn generate_is_deterministic() {
    let (a, b) = (Workspace::new(), Workspace::new());
    ok(a.run("generate", &["--seed", "9", "--set", "scenarios.count=10"]));
    ok(b.run("generate", &["--seed", "9", "--set", "scenarios.count=10"]));
    let (x, y) = (std::fs::read(a.path("scenarios.jsonl")).unwrap(), std::fs::read(b.path("scenarios.jsonl")).unwrap());
    assert!(!x.is_empty());
    assert_eq!(x, y);
}

#[test]
fn validation_errors_exit_with_two() {
    let ws = Workspace::new();
    let o = ws.run("generate", &["--set", r#"scenarios.intersection_kinds=["roundabout"]"#]);
    assert_eq!(o.status.code(), Some(2));
    let o = ws.run("generate", &["--set", "train.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = sapi(ws.dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn build_dataset_reports_split_and_is_reproducible() {
    let ws = Workspace::new();
    let o = ws.run("build-dataset", &[]);
    assert_eq!(o.status.code(), Some(2), "missing scenario file must be a usage error");
    ok(ws.run("generate", &["--seed", "1"]));
    let o = ok(ws.run("build-dataset", &["--seed", "1"]));
    assert!(stdout(&o).contains("scenarios: 5 (train/val/test: 3/1/1)"), "{}", stdout(&o));
    let first = std::fs::read(ws.path("dataset/split.json")).unwrap();
    let manifest = std::fs::read(ws.path("dataset/manifest.json")).unwrap();
    ok(ws.run("build-dataset", &["--seed", "1"]));
    assert_eq!(first, std::fs::read(ws.path("dataset/split.json")).unwrap());
    assert_eq!(manifest, std::fs::read(ws.path("dataset/manifest.json")).unwrap());
}

#[test]
fn evaluate_needs_checkpoints_and_oracle_scores_zero() {
    let ws = Workspace::new();
    ok(ws.run("generate", &[]));
    ok(ws.run("build-dataset", &[]));
    let o = ws.run("evaluate", &["--models", "sapi"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no checkpoint"));
    let o = ok(ws.run("evaluate", &["--oracle"]));
    let table = stdout(&o);
    for kind in ["lstm", "sapi_no_lra", "sapi_no_traffic", "sapi"] {
        let row = table.lines().find(|l| l.split_whitespace().next() == Some(kind)).expect("row per model");
        assert!(row.split_whitespace().skip(1).all(|v| v == "0.000"), "{row}");
    }
}

#[test]
fn plot_without_inputs_is_a_warning() {
    let ws = Workspace::new();
    let o = ok(ws.run("plot", &[]));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(!ws.path("plots").exists());
}

#[test]
fn divergent_training_writes_no_checkpoint() {
    let ws = Workspace::new();
    ok(ws.run("generate", &[]));
    ok(ws.run("build-dataset", &[]));
    let o = ws.run("train", &["--set", "train.learning_rate=1e30", "--set", "train.max_epochs=20"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(!ws.path("runs/sapi/checkpoint").exists());
}

#[test]
fn full_pipeline_trains_evaluates_predicts_and_plots() {
    let ws = Workspace::new();
    ok(ws.run("generate", &[]));
    ok(ws.run("build-dataset", &[]));
    for kind in ["sapi", "lstm"] {
        ok(ws.run("train", &["--model", kind]));
        assert!(ws.path(&format!("runs/{kind}/checkpoint/manifest.json")).is_file());
        let log = std::fs::read_to_string(ws.path(&format!("runs/{kind}/log.csv"))).unwrap();
        assert!(log.starts_with("epoch,train_loss,val_loss,val_ade"));
    }
    ok(ws.run("evaluate", &["--models", "lstm,sapi"]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path("runs/sapi/eval.json")).unwrap()).unwrap();
    assert_eq!(report["per_step_errors"].as_array().unwrap().len(), 15);

    let split: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path("dataset/split.json")).unwrap()).unwrap();
    let id = split["test"][0].as_str().unwrap().to_string();
    let o = ws.run("predict", &["--sample", "nope/0/0"]);
    assert_eq!(o.status.code(), Some(2));
    ok(ws.run("predict", &["--sample", &id]));
    let dump = ws.path(&format!("predictions/sapi/{}.json", id.replace('/', "_")));
    let d: serde_json::Value = serde_json::from_slice(&std::fs::read(&dump).unwrap()).unwrap();
    assert_eq!(d["constant_velocity"].as_array().unwrap().len(), 15);
    assert!(!d["lanes"].as_array().unwrap().is_empty());

    let reports = [ws.path("runs/sapi/eval.json"), ws.path("runs/lstm/eval.json")];
    ok(ws.run("plot", &["--reports", reports[0].to_str().unwrap(), reports[1].to_str().unwrap(), "--predictions", dump.to_str().unwrap()]));
    let png = std::fs::read(ws.path("plots/per_step_errors.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    let overlays: Vec<_> = std::fs::read_dir(ws.path("plots")).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().starts_with("overlay_")).collect();
    assert_eq!(overlays.len(), 1);
}

#[test]
fn overfit_straight_sample_is_predicted_closely() {
    let ws = Workspace::new();
    let straight = r#"scenarios.behavior_mix={"straight":1.0,"turn_left":0.0,"turn_right":0.0,"lane_change":0.0,"stop_for_traffic":0.0}"#;
    let common = ["--seed", "4", "--set", straight, "--set", "scenarios.count=5", "--set", "scenarios.agent_count=1", "--set", "dataset.windows_per_agent=1"];
    ok(ws.run("generate", &common));
    ok(ws.run("build-dataset", &common));
    let mut args = common.to_vec();
    args.extend(["--set", "train.max_epochs=600", "--set", "train.patience=600", "--set", "train.target_val_ade=0.05"]);
    ok(ws.run("train", &args));
    let split: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.path("dataset/split.json")).unwrap()).unwrap();
    let id = split["train"][0].as_str().unwrap().to_string();
    let o = ok(ws.run("predict", &[&common[..], &["--sample", &id]].concat()));
    let dump: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ws.path(&format!("predictions/sapi/{}.json", id.replace('/', "_")))).unwrap()).unwrap();
    let fde = dump["fde_6s"].as_f64().unwrap();
    assert!(fde < 0.5, "6 s FDE {fde} after overfitting; {}", stdout(&o));
}
