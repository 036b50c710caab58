use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use krkc::experiment::{self, ExperimentConfig};

fn krkc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_krkc"))
        .args(args)
        .env_remove(experiment::OUT_ENV)
        .output()
        .expect("binary runs")
}

fn quick(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["run", "--config", "default", "--tasks", "2", "--epochs", "1", "--out", out];
    args.extend_from_slice(extra);
    krkc(&args)
}

#[test]
fn default_run_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = krkc(&["run", "--config", "default", "--seed", "7", "--out", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for s in krkc::baselines::Strategy::NAMES {
        let rel = Path::new(s).join("7").join("metrics.json");
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
    }
}

#[test]
fn strategy_list_creates_one_directory_each() {
    let d = tempfile::tempdir().unwrap();
    let o = quick(d.path(), &["--strategy", "naive,krkc"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(d.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["krkc", "naive"]);
    for n in &names {
        let run = d.path().join(n).join("0");
        for f in ["metrics.json", "accuracy_matrix.csv", "log.jsonl", "config.toml"] {
            assert!(run.join(f).is_file(), "{n}/{f}");
        }
        assert!(run.join("checkpoints").join("task_02.ckpt").is_file());
    }
    let csv = fs::read_to_string(d.path().join("krkc/0/accuracy_matrix.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,task,map,rank1");
    assert_eq!(lines.len(), 4);
    let log = fs::read_to_string(d.path().join("krkc/0/log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["task", "epoch", "model", "loss_anti_or_cali", "loss_ce", "loss_trip", "loss_total", "lr"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let o = krkc(&["run", "--config", d.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "[train]\nepocs = 3\n").unwrap();
    let o = krkc(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epocs"));
    let o = quick(d.path(), &["--strategy", "lwf"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_env_output_root() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.strategies = vec!["naive".into()];
    cfg.seeds = vec![3];
    cfg.stream.n_tasks = 2;
    cfg.train.epochs = 1;
    let path = d.path().join("exp.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let root = d.path().join("env_root");
    let o = Command::new(env!("CARGO_BIN_EXE_krkc"))
        .args(["run", "--config", path.to_str().unwrap()])
        .env(experiment::OUT_ENV, &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("naive/3/metrics.json").is_file());
    let saved = fs::read_to_string(root.join("naive/3/config.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&saved).unwrap().seeds, vec![3]);
}

fn report_csv(dir: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(dir.join("report.csv")).unwrap();
    let header = r.headers().unwrap().clone();
    let mut rows = vec![header];
    rows.extend(r.records().map(Result::unwrap));
    rows
}

#[test]
fn report_single_run_matches_metrics() {
    let d = tempfile::tempdir().unwrap();
    assert!(quick(d.path(), &["--strategy", "krkc", "--seed", "1"]).status.success());
    let o = krkc(&["report", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("krkc/1/metrics.json")).unwrap()).unwrap();
    let rows = report_csv(d.path());
    let col = |name: &str| rows[0].iter().position(|h| h == name).unwrap();
    let median = &rows[1];
    assert_eq!(&median[col("kind")], "median");
    for key in ["avg_incremental_map", "avg_incremental_rank1", "bwt_paper", "bwt_final_row", "fwt"] {
        let v: f64 = median[col(key)].parse().unwrap();
        assert_eq!(v, metrics[key].as_f64().unwrap(), "{key}");
    }
}

#[test]
fn report_takes_median_and_keeps_raw_rows() {
    let d = tempfile::tempdir().unwrap();
    for seed in ["1", "2"] {
        assert!(quick(d.path(), &["--strategy", "naive", "--seed", seed]).status.success());
    }
    let o = krkc(&["report", d.path().to_str().unwrap()]);
    assert!(o.status.success());
    let rows = report_csv(d.path());
    assert_eq!(rows.len(), 4);
    let col = rows[0].iter().position(|h| h == "avg_incremental_rank1").unwrap();
    let raw: Vec<f64> = rows[2..].iter().map(|r| r[col].parse().unwrap()).collect();
    let med: f64 = rows[1][col].parse().unwrap();
    assert!((med - 0.5 * (raw[0] + raw[1])).abs() < 1e-12);
    assert_eq!(&rows[2][2], "1");
    assert_eq!(&rows[3][2], "2");
}

#[test]
fn report_skips_incomplete_and_fails_when_empty() {
    let d = tempfile::tempdir().unwrap();
    assert!(quick(d.path(), &["--strategy", "naive"]).status.success());
    let broken = d.path().join("krkc/0");
    fs::create_dir_all(&broken).unwrap();
    fs::write(broken.join("config.toml"), "").unwrap();
    let o = krkc(&["report", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipping"));
    assert_eq!(report_csv(d.path()).len(), 3);

    let empty = tempfile::tempdir().unwrap();
    let o = krkc(&["report", empty.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_data_writes_split_files() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("data");
    let o = krkc(&["export-data", "--tasks", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let back = krkc::data::import_stream_csv(&out).unwrap();
    let cfg = krkc::data::StreamConfig {
        n_tasks: 2,
        ..Default::default()
    };
    let original = krkc::data::generate_stream(&cfg).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in back.iter().zip(&original) {
        assert_eq!((&a.train, &a.query, &a.gallery), (&b.train, &b.query, &b.gallery));
    }
}
