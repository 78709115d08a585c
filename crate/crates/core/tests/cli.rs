use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn spft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spft")).args(args).output().expect("spawn spft")
}

fn ok(args: &[&str]) {
    let out = spft(args);
    assert!(
        out.status.success(),
        "spft {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.in.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn synthetic_config(out: &Path) -> Value {
    json!({
        "schema_version": 1,
        "task": {
            "kind": "synthetic",
            "dims": [1, 8, 8],
            "source_k": 3,
            "target_k": 2,
            "shift": 0.3,
            "options": { "source_per_class": 40, "target_per_class": 40, "per_class_train": 10 }
        },
        "arch": [
            { "type": "conv2d", "out_channels": 4, "kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": 1 },
            { "type": "relu" },
            { "type": "max_pool", "k": 2, "stride": 2 },
            { "type": "conv2d", "out_channels": 4, "kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": 1 },
            { "type": "relu" },
            { "type": "global_avg_pool" },
            { "type": "softmax_head", "num_classes": 1 }
        ],
        "pretrain": { "train": { "base_lr": 0.05, "total_iters": 40, "decay_at": 30, "batch_size": 16 } },
        "train": { "base_lr": 0.02, "total_iters": 20, "decay_at": 15, "batch_size": 8 },
        "penalties": [
            { "kind": "L2", "alpha": 0.01, "beta": 0.01 },
            { "kind": "L2SP", "alpha": 0.1, "beta": 0.01 },
            { "kind": "L2SP_FISHER", "alpha": 1.0, "beta": 0.01 }
        ],
        "sweep": { "kind": "L2SP", "alphas": [0.01, 0.1, 1.0], "betas": [0.001, 0.01, 0.1], "folds": 5 },
        "freeze_k": [0, 1, 2],
        "seeds": [0, 1],
        "output_dir": out
    })
}

#[test]
fn theory_defaults_give_a_hundred_accurate_trials_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["theory", "--out", a.to_str().unwrap()]);
    ok(&["theory", "--out", b.to_str().unwrap(), "--jobs", "2"]);
    let rows = csv_rows(&a.join("theory.csv"));
    assert_eq!(rows.len(), 100);
    for r in &rows {
        let residual: f64 = r[3].parse().unwrap();
        assert!(residual < 1e-8, "{r:?}");
    }
    assert_eq!(std::fs::read(a.join("theory.csv")).unwrap(), std::fs::read(b.join("theory.csv")).unwrap());

    let manifest: Value = serde_json::from_slice(&std::fs::read(a.join("manifest-theory.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "theory");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(a.join("config.json").is_file());
}

#[test]
fn synthetic_pipeline_runs_every_subcommand_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = write_config(dir.path(), &synthetic_config(&out));
    let cfg = cfg_path.to_str().unwrap();

    ok(&["pretrain", "--config", cfg, "--fisher"]);
    assert!(out.join("pretrained.spft").is_file());
    assert!(out.join("pretrained.spft.fisher").is_file());

    ok(&["finetune", "--config", cfg]);
    let rows = csv_rows(&out.join("finetune.csv"));
    assert_eq!(rows.len(), 6);
    assert!(out.join("history_L2SP_seed1.csv").is_file());

    ok(&["sweep", "--config", cfg]);
    let surface = std::fs::read(out.join("sweep_L2SP.csv")).unwrap();
    assert_eq!(csv_rows(&out.join("sweep_L2SP.csv")).len(), 45);
    assert_eq!(csv_rows(&out.join("sweep_best.csv")).len(), 1);

    ok(&["ablate-freeze", "--config", cfg, "--jobs", "2"]);
    let ablation = csv_rows(&out.join("ablation.csv"));
    assert_eq!(ablation.len(), 3 * 3 * 2);

    ok(&["forgetting", "--config", cfg]);
    assert_eq!(csv_rows(&out.join("forgetting.csv")).len(), 6);

    ok(&["r2", "--config", cfg, "--seed", "1"]);
    for r in csv_rows(&out.join("r2_L2SP_seed1.csv")) {
        if &r[3] == "true" {
            let v: f64 = r[2].parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{r:?}");
        }
    }

    // Same config, different worker count: identical payloads.
    ok(&["sweep", "--config", cfg, "--jobs", "3"]);
    assert_eq!(std::fs::read(out.join("sweep_L2SP.csv")).unwrap(), surface);
    let first = std::fs::read(out.join("ablation.csv")).unwrap();
    ok(&["ablate-freeze", "--config", cfg]);
    assert_eq!(std::fs::read(out.join("ablation.csv")).unwrap(), first);
}

#[test]
fn missing_dataset_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "schema_version": 1,
        "task": {
            "kind": "digits",
            "data_dir": dir.path().join("nowhere"),
            "source_classes": [0, 1],
            "target_classes": [2, 3],
            "per_class_train": 5
        },
        "output_dir": dir.path().join("out")
    });
    let path = write_config(dir.path(), &cfg);
    let out = spft(&["pretrain", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("task.data_dir"), "{err}");
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_config(&dir.path().join("out"));
    cfg["surprise"] = json!(1);
    let path = write_config(dir.path(), &cfg);
    let out = spft(&["finetune", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));

    let mut cfg = synthetic_config(&dir.path().join("out"));
    cfg["schema_version"] = json!(99);
    let path = write_config(dir.path(), &cfg);
    let out = spft(&["finetune", "--config", path.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));

    let cfg = synthetic_config(&dir.path().join("empty"));
    let path = write_config(dir.path(), &cfg);
    let out = spft(&["finetune", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    assert!(!dir.path().join("empty").join("finetune.csv").exists());

    assert!(!spft(&["finetune"]).status.success());
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["digits.json", "synthetic.json"] {
        sp_transfer::cli::ExperimentConfig::load(&dir.join(name)).unwrap();
    }
}
