use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedunlearn"));
    c.env_remove("FEDUNLEARN_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

const SMALL: &str = r#"
scenario = "small"
seed = 5
unlearn_set = [1]

[data]
num_clients = 4
num_classes = 4
dim = 3
samples_per_client = 20
class_sep = 2.0
noise_sd = 0.5
partition = { kind = "class_slice", classes_per_client = 2 }

[model]
kind = "quadratic"
ridge = 0.05

[train]
rounds = 40
lr_local = "inverse_smoothness"

[unlearn]
rounds = 20
lr_local = "inverse_smoothness"

[mechanism]
kind = "stability"
lambda = 1.0
lr_global = { inverse_smoothness = 0.2 }
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn preset_list_names_every_bundled_scenario() {
    let out = run(&["preset", "--list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["two-group", "fairness-demo", "fig1-sweep", "homogeneous", "table3-dirichlet"] {
        assert!(text.lines().any(|l| l == name), "missing {name}");
    }
}

#[test]
fn unknown_preset_exits_with_config_code() {
    let out = run(&["preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("ridge = 0.05", "ridge = 0.05\nbogus = 1"));
    let out = run(&["--config", &cfg, "unlearn"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exploding_step_exits_with_divergence_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replacen("lr_local = \"inverse_smoothness\"", "lr_local = 50.0", 1);
    let cfg = write_config(dir.path(), &text);
    let out = run(&["--config", &cfg, "train"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn empty_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run(&["--config", &cfg, "sweep", "--param", "lambda", "--values", ""]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unlearn_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (d, threads) in [(&a, "1"), (&b, "3")] {
        let out = run(&["--config", &cfg, "--out", d.to_str().unwrap(), "--threads", threads, "unlearn"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["trajectory.csv", "train_trajectory.csv", "correction.csv", "bounds.json", "summary.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mechanism"], "stability");
    assert!(!a.join("bounds.json.partial").exists());
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = run(&["--config", &cfg, "--seed", "1", "bounds"]);
    let b = run(&["--config", &cfg, "--seed", "2", "bounds"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn bounds_prints_every_report_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run(&["--config", &cfg, "bounds"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let json = &text[text.find('{').unwrap()..];
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    for f in fedunlearn::metrics::BoundReport::FIELDS {
        assert!(v.get(*f).is_some(), "missing {f}");
    }
}

#[test]
fn train_writes_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("t");
    let out = run(&["--config", &cfg, "--out", out_dir.to_str().unwrap(), "train"]);
    assert!(out.status.success());
    let model: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["w_o"].as_array().unwrap().len(), 3);
}
