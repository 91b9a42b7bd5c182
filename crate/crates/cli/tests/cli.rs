//! Drives the installed binary end to end: report layout, overrides,
//! exit codes, and the agreement between `eval` and the accuracy matrix.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tfm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfm"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_base_config(dir: &Path) -> PathBuf {
    let out = dir.join("unused-out");
    let text = format!(
        r#"{{
            "dataset": {{"format": "synth", "classes": 10, "samples_per_class": 12, "dim": 8}},
            "arch": {{
                "input": {{"kind": "vector", "dim": 8}},
                "layers": [{{"kind": "dense", "width": 10, "cap": 20}}]
            }},
            "method": "finetune",
            "sequence": {{"num_tasks": 2}},
            "growth": {{"mode": "fixed_schedule", "schedule": [0.2, 0.2, 0.2, 0.2, 0.2]}},
            "trainer": {{"max_epochs": 2, "batch_size": 16}},
            "seed": 3,
            "out_dir": {}
        }}"#,
        serde_json::to_string(&out.display().to_string()).unwrap()
    );
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_with_overrides_writes_the_report_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_base_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = tfm()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--method", "tfm", "--tasks", "5", "--seed", "7", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("method tfm, 5 tasks, seed 7"), "stdout: {}", text);

    let matrix = fs::read_to_string(out_dir.join("matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 6);
    assert!(matrix.starts_with("after_task,task_1,task_2,task_3,task_4,task_5"));
    for k in 1..=5 {
        assert!(out_dir.join(format!("snapshots/task_{:03}.tfm", k)).is_file());
        assert!(out_dir.join(format!("train_records/task_{}.json", k)).is_file());
    }
    for report in ["config.json", "forgetting.csv", "growth.json", "overhead.csv"] {
        assert!(out_dir.join(report).is_file(), "missing {}", report);
    }
    let persisted = fs::read_to_string(out_dir.join("config.json")).unwrap();
    assert!(persisted.contains("\"method\": \"tfm\""));
    assert!(persisted.contains("\"seed\": 7"));
}

#[test]
fn eval_reproduces_matrix_entries() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_base_config(dir.path());
    let out_dir = dir.path().join("run");
    let run = tfm()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(run.status.success(), "stderr: {}", stderr(&run));

    let matrix = fs::read_to_string(out_dir.join("matrix.csv")).unwrap();
    let row2: Vec<f64> = matrix
        .lines()
        .nth(2)
        .unwrap()
        .split(',')
        .skip(1)
        .map(|c| c.parse().unwrap())
        .collect();

    for (task, want) in [(1u32, row2[0]), (2, row2[1])] {
        let out = tfm()
            .args(["eval", "--config"])
            .arg(out_dir.join("config.json"))
            .arg("--snapshot")
            .arg(out_dir.join("snapshots/task_002.tfm"))
            .args(["--task", &task.to_string()])
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        let text = stdout(&out);
        let accuracy: f64 = text
            .split("accuracy ")
            .nth(1)
            .and_then(|rest| rest.split_whitespace().next())
            .unwrap()
            .parse()
            .unwrap();
        assert!(
            (accuracy - want).abs() < 5e-7,
            "eval gave {} for task {}, matrix says {}",
            accuracy,
            task,
            want
        );
    }
}

#[test]
fn overhead_emits_one_row_per_method_and_task() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("arch.json");
    fs::write(
        &arch,
        r#"{
            "input": {"kind": "vector", "dim": 16},
            "layers": [{"kind": "dense", "width": 32}, {"kind": "dense", "width": 8}]
        }"#,
    )
    .unwrap();
    let out = tfm()
        .args(["overhead", "--arch"])
        .arg(&arch)
        .args(["--tasks", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,tasks,bytes"));
    let rows: Vec<&str> = lines.collect();
    let methods: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(rows.len(), methods.len() * 5, "one row per method and task count 0..=4");
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 3);
        cols[1].parse::<u32>().unwrap();
        cols[2].parse::<u64>().unwrap();
    }

    let csv_path = dir.path().join("table.csv");
    let with_file = tfm()
        .args(["overhead", "--arch"])
        .arg(&arch)
        .args(["--tasks", "4", "--out"])
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(with_file.status.success());
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), text);
}

#[test]
fn augment_check_is_deterministic_and_reports_the_carve() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_base_config(dir.path());
    let run = || {
        tfm()
            .args(["augment-check", "--config"])
            .arg(&config)
            .args(["--tasks", "5"])
            .output()
            .unwrap()
    };
    let first = run();
    assert!(first.status.success(), "stderr: {}", stderr(&first));
    let text = stdout(&first);
    assert!(text.contains("10 classes"), "stdout: {}", text);
    for task in 1..=5 {
        assert!(text.contains(&format!("task {}:", task)), "stdout: {}", text);
    }
    assert!(text.contains("augmentation: none"));
    assert_eq!(stdout(&run()), text);
}

#[test]
fn augment_check_verifies_hflip_on_images() {
    let dir = tempfile::tempdir().unwrap();
    let idx_dir = dir.path().join("digits");
    write_idx_pair(&idx_dir, 0x0000_0803);
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        format!(
            r#"{{
                "dataset": {{"format": "idx", "path": {}}},
                "arch": {{
                    "input": {{"kind": "image", "channels": 1, "height": 4, "width": 4}},
                    "layers": [{{"kind": "flatten"}}, {{"kind": "dense", "width": 6}}]
                }},
                "method": "finetune",
                "sequence": {{"num_tasks": 2}},
                "trainer": {{"max_epochs": 2, "batch_size": 8}},
                "augment_hflip": true,
                "out_dir": "unused"
            }}"#,
            serde_json::to_string(&idx_dir.display().to_string()).unwrap()
        ),
    )
    .unwrap();
    let out = tfm()
        .args(["augment-check", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("deterministic true, double flip restores true"),
        "stdout: {}",
        text
    );
}

#[test]
fn hflip_on_vector_data_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let base = fs::read_to_string(write_base_config(dir.path())).unwrap();
    fs::write(&config, base.replace("\"seed\": 3", "\"augment_hflip\": true, \"seed\": 3")).unwrap();
    let out = tfm()
        .args(["augment-check", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("image-shaped"));
}

#[test]
fn malformed_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("broken.json");
    fs::write(&config, "{\"method\": \"tfm\"").unwrap();
    let out = tfm().args(["run", "--config"]).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error: configuration error"));
}

#[test]
fn unknown_method_override_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_base_config(dir.path());
    let out = tfm()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--method", "banana"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown method"));
}

#[test]
fn bad_idx_magic_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let idx_dir = dir.path().join("digits");
    write_idx_pair(&idx_dir, 0x0000_0807);
    let config = write_base_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = tfm()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--dataset")
        .arg(&idx_dir)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("error: format error"));
}

#[test]
fn invalid_log_level_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_base_config(dir.path());
    let out = tfm()
        .env("TFM_LOG_LEVEL", "chatty")
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("TFM_LOG_LEVEL"));
}

fn write_idx_pair(dir: &Path, images_magic: u32) {
    fs::create_dir_all(dir).unwrap();
    let (n, h, w) = (24u32, 4u32, 4u32);
    let mut images = Vec::new();
    images.extend_from_slice(&images_magic.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&h.to_be_bytes());
    images.extend_from_slice(&w.to_be_bytes());
    for i in 0..n * h * w {
        images.push((i % 251) as u8);
    }
    fs::write(dir.join("train-images-idx3-ubyte"), images).unwrap();

    let mut labels = Vec::new();
    labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for i in 0..n {
        labels.push((i % 2) as u8);
    }
    fs::write(dir.join("train-labels-idx1-ubyte"), labels).unwrap();
}
