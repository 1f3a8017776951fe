use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data.synthetic]
molecules = 60
[model]
d_model = 16
heads = 2
d_k = 8
d_v = 8
ffn = 32
[teacher]
d_model = 16
heads = 2
d_k = 8
ffn = 32
[teacher_train]
epochs = 2
[train]
epochs = 2
batch_size = 8
[distill]
initial_epochs = 1
[bench]
runs = 1
batch_size = 16
[ablation]
seeds = [0]
"#;

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    fs::write(&path, format!("output_dir = {:?}\n{TINY}{extra}", out.display().to_string())).unwrap();
    path
}

fn stkd(args: &[&str], config: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stkd"));
    cmd.args(args).arg("--config").arg(config);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn events(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).expect("json event")).collect()
}

#[test]
fn parse_writes_one_sequence_per_molecule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = stkd(&["parse"], &cfg, &[]);
    let done = events(&out).into_iter().find(|e| e["event"] == "parse_done").unwrap();
    assert_eq!(done["molecules"], 60);
    let text = fs::read_to_string(dir.path().join("out/sequences.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 60);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["bonds"].as_array().unwrap().len(), first["endpoints"].as_array().unwrap().len());
    assert!(dir.path().join("out/synthetic.csv").exists());
}

#[test]
fn distill_eval_bench_ablate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_dir = dir.path().join("out");

    let out = stkd(&["distill"], &cfg, &[]);
    let ev = events(&out);
    assert!(ev.iter().any(|e| e["event"] == "teacher_saved"));
    let stages: Vec<String> =
        ev.iter().filter(|e| e["event"] == "epoch").map(|e| e["stage"].as_str().unwrap().to_string()).collect();
    assert_eq!(stages, ["initial", "main"]);
    for f in ["teacher.ckpt", "teacher.trace", "student.ckpt", "distill_log.jsonl", "teacher_log.jsonl"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }

    stkd(&["eval"], &cfg, &[]);
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("split,"));
    assert_eq!(metrics.lines().count(), 3);

    stkd(&["bench"], &cfg, &[]);
    let bench = fs::read_to_string(out_dir.join("bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 3);
    assert!(bench.lines().last().unwrap().starts_with("mean,"));

    stkd(&["ablate"], &cfg, &[]);
    let table = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(table.lines().any(|l| l.starts_with("full,true,true,true,")));
}

#[test]
fn training_is_reproducible_across_worker_counts() {
    let val_metrics = |workers: &str| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "");
        stkd(&["train", "--seed", "3"], &cfg, &[("STKD_WORKERS", workers)]);
        let log = fs::read_to_string(dir.path().join("out/train_log.jsonl")).unwrap();
        let vals: Vec<f64> = log
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["val_metric"].as_f64().unwrap())
            .collect();
        (vals, fs::read(dir.path().join("out/student.ckpt")).unwrap())
    };
    let (a, ckpt_a) = val_metrics("1");
    let (b, ckpt_b) = val_metrics("3");
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn invalid_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("batch_size = 8", "batch_size = 0");
    fs::write(&cfg, text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stkd")).args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
}

#[test]
fn paper_preset_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    stkd(&["parse", "--paper-config"], &cfg, &[]);
}
