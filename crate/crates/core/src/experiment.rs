//! Experiment configs, result directories and cross-seed reports.
//!
//! A run writes, per strategy and seed, `out_dir/<strategy>/<seed>/` with
//! `accuracy_matrix.csv`, `metrics.json`, `log.jsonl`, `config.toml` and one
//! checkpoint per task under `checkpoints/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::baselines::{run_strategy_full, Strategy, StrategyError};
use crate::data::{export_stream_csv, generate_held_out, generate_stream, DataError, StreamConfig};
use crate::evaluation::{EvalError, MetricsReport};
use crate::trainer::{compute_references, RunOutcome, TrainConfig, TrainError};

pub const OUT_ENV: &str = "KRKC_OUT";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read config {path}: {source}")]
    ConfigRead { path: String, source: std::io::Error },
    #[error("bad config {path}: {reason}")]
    ConfigParse { path: String, reason: String },
    #[error("no completed runs found under {0}")]
    NoResults(String),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    /// Process exit status for this error: 2 for configuration problems and
    /// missing results, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::ConfigRead { .. }
            | ExperimentError::ConfigParse { .. }
            | ExperimentError::NoResults(_)
            | ExperimentError::Strategy(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub stream: StreamConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::NAMES.iter().map(|s| s.to_string()).collect(),
            seeds: vec![0],
            out_dir: PathBuf::from("results"),
            stream: StreamConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document; unknown keys are rejected.
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// `"default"` selects the built-in config; anything else is a path.
    pub fn load(spec: &str) -> Result<Self> {
        if spec == "default" {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(spec).map_err(|source| ExperimentError::ConfigRead {
            path: spec.into(),
            source,
        })?;
        Self::from_toml(&text).map_err(|reason| ExperimentError::ConfigParse {
            path: spec.into(),
            reason,
        })
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.strategies.is_empty() {
            return Err("strategies must not be empty".into());
        }
        if self.seeds.is_empty() {
            return Err("seeds must not be empty".into());
        }
        for s in &self.strategies {
            Strategy::by_name(s).map_err(|e| e.to_string())?;
        }
        self.stream.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.stream.input_dim != self.train.arch.input_dim {
            return Err(format!(
                "stream.input_dim ({}) differs from train.arch.input_dim ({})",
                self.stream.input_dim, self.train.arch.input_dim
            ));
        }
        if self.train.p > self.stream.ids_per_task {
            return Err(format!(
                "train.p ({}) exceeds stream.ids_per_task ({})",
                self.train.p, self.stream.ids_per_task
            ));
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategies: Option<Vec<String>>,
    pub out_dir: Option<PathBuf>,
    pub tasks: Option<usize>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(s) = &self.strategies {
            cfg.strategies = s.clone();
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = self.tasks {
            cfg.stream.n_tasks = t;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg.validate().map_err(|reason| ExperimentError::ConfigParse {
            path: "<overrides>".into(),
            reason,
        })
    }
}

fn num(v: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{v:.12e}")).expect("scientific notation is valid JSON")
}

fn opt_num(v: Option<f64>) -> Option<Box<RawValue>> {
    v.map(num)
}

#[derive(Serialize)]
struct TaskMetricsOut {
    map: Box<RawValue>,
    rank1: Box<RawValue>,
    diag_map: Box<RawValue>,
    diag_rank1: Box<RawValue>,
    reference_map: Option<Box<RawValue>>,
    reference_rank1: Option<Box<RawValue>>,
}

#[derive(Serialize)]
struct MetricsOut<'a> {
    strategy: &'a str,
    seed: u64,
    n_tasks: usize,
    avg_incremental_map: Box<RawValue>,
    avg_incremental_rank1: Box<RawValue>,
    bwt_paper: Option<Box<RawValue>>,
    bwt_final_row: Option<Box<RawValue>>,
    fwt: Option<Box<RawValue>>,
    bwt_paper_map: Option<Box<RawValue>>,
    bwt_final_row_map: Option<Box<RawValue>>,
    fwt_map: Option<Box<RawValue>>,
    held_out_map: Option<Box<RawValue>>,
    held_out_rank1: Option<Box<RawValue>>,
    per_task: BTreeMap<String, TaskMetricsOut>,
}

/// Serializes a report as the `metrics.json` document. Transfer values are in
/// Rank-1 unless suffixed `_map`; `per_task` holds the final-row scores.
pub fn metrics_json(report: &MetricsReport, strategy: &str, seed: u64) -> Result<String> {
    let s = report.summary()?;
    let t = report.rank1.num_steps();
    let mut per_task = BTreeMap::new();
    for j in 1..=t {
        let reference = |v: &[Option<f64>]| v.get(j - 1).copied().flatten();
        per_task.insert(
            format!("{j:02}"),
            TaskMetricsOut {
                map: num(report.map.rows[t - 1][j - 1]),
                rank1: num(report.rank1.rows[t - 1][j - 1]),
                diag_map: num(report.map.rows[j - 1][j - 1]),
                diag_rank1: num(report.rank1.rows[j - 1][j - 1]),
                reference_map: opt_num(reference(&report.reference_map)),
                reference_rank1: opt_num(reference(&report.reference_rank1)),
            },
        );
    }
    let out = MetricsOut {
        strategy,
        seed,
        n_tasks: t,
        avg_incremental_map: num(s.avg_incremental_map),
        avg_incremental_rank1: num(s.avg_incremental_rank1),
        bwt_paper: opt_num(s.bwt_paper),
        bwt_final_row: opt_num(s.bwt_final_row),
        fwt: opt_num(s.fwt),
        bwt_paper_map: opt_num(s.bwt_paper_map),
        bwt_final_row_map: opt_num(s.bwt_final_row_map),
        fwt_map: opt_num(s.fwt_map),
        held_out_map: opt_num(report.held_out.map(|h| h.0)),
        held_out_rank1: opt_num(report.held_out.map(|h| h.1)),
        per_task,
    };
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    Ok(text)
}

/// `step,task,map,rank1` rows of the lower-triangular matrices.
pub fn accuracy_matrix_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "task", "map", "rank1"])?;
    for (i, (m_row, r_row)) in report.map.rows.iter().zip(&report.rank1.rows).enumerate() {
        for (j, (m, r)) in m_row.iter().zip(r_row).enumerate() {
            w.write_record([(i + 1).to_string(), (j + 1).to_string(), format!("{m:.12e}"), format!("{r:.12e}")])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes every artifact of one run into `dir`.
pub fn write_run_dir(
    dir: &Path,
    outcome: &RunOutcome,
    strategy: &str,
    seed: u64,
    config: &ExperimentConfig,
) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    let mut log = String::new();
    for entry in &outcome.log {
        log.push_str(&serde_json::to_string(entry)?);
        log.push('\n');
    }
    fs::write(dir.join("log.jsonl"), log)?;
    for (task, text) in &outcome.checkpoints {
        fs::write(dir.join("checkpoints").join(format!("task_{task:02}.ckpt")), text)?;
    }
    fs::write(dir.join("accuracy_matrix.csv"), accuracy_matrix_csv(&outcome.report)?)?;
    // Written last: its presence marks the run as complete.
    fs::write(dir.join("metrics.json"), metrics_json(&outcome.report, strategy, seed)?)?;
    Ok(())
}

/// Runs every (seed, strategy) pair of `config` and returns the result
/// directories in the order written.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate().map_err(|reason| ExperimentError::ConfigParse {
        path: "<config>".into(),
        reason,
    })?;
    let strategies: Vec<Strategy> = config
        .strategies
        .iter()
        .map(|s| Strategy::by_name(s))
        .collect::<std::result::Result<_, _>>()?;
    let mut dirs = Vec::new();
    for &seed in &config.seeds {
        let stream_cfg = StreamConfig {
            seed,
            ..config.stream.clone()
        };
        let train_cfg = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let stream = generate_stream(&stream_cfg)?;
        let held_out = if stream_cfg.held_out_domain {
            Some(generate_held_out(&stream_cfg)?)
        } else {
            None
        };
        let references = if stream.len() >= 2 {
            Some(compute_references(&stream, &train_cfg)?)
        } else {
            None
        };
        for strategy in &strategies {
            log::info!("running {} seed {seed}", strategy.name);
            let outcome = run_strategy_full(strategy, &stream, held_out.as_ref(), &train_cfg, references.as_ref())?;
            let dir = config.out_dir.join(&strategy.name).join(seed.to_string());
            let resolved = ExperimentConfig {
                strategies: vec![strategy.name.clone()],
                seeds: vec![seed],
                ..config.clone()
            };
            write_run_dir(&dir, &outcome, &strategy.name, seed, &resolved)?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

/// Headline values of one completed run, as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub strategy: String,
    pub seed: u64,
    pub values: BTreeMap<String, Option<f64>>,
}

const HEADLINE: [&str; 7] = [
    "avg_incremental_map",
    "avg_incremental_rank1",
    "bwt_paper",
    "bwt_final_row",
    "fwt",
    "held_out_map",
    "held_out_rank1",
];

fn read_run(dir: &Path) -> std::result::Result<RunSummary, String> {
    let text = fs::read_to_string(dir.join("metrics.json")).map_err(|e| format!("metrics.json: {e}"))?;
    if !dir.join("accuracy_matrix.csv").is_file() {
        return Err("accuracy_matrix.csv missing".into());
    }
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("metrics.json: {e}"))?;
    let strategy = v["strategy"].as_str().ok_or("metrics.json: no strategy")?.to_owned();
    let seed = v["seed"].as_u64().ok_or("metrics.json: no seed")?;
    let mut values = BTreeMap::new();
    for key in HEADLINE {
        values.insert(key.to_owned(), v[key].as_f64());
    }
    if values["avg_incremental_rank1"].is_none() {
        return Err("metrics.json: no avg_incremental_rank1".into());
    }
    if let Some(tasks) = v["per_task"].as_object() {
        for (j, t) in tasks {
            values.insert(format!("task{j}_rank1"), t["rank1"].as_f64());
            values.insert(format!("task{j}_map"), t["map"].as_f64());
        }
    }
    Ok(RunSummary {
        dir: dir.to_owned(),
        strategy,
        seed,
        values,
    })
}

/// Directories under `root` (inclusive) that look like run directories.
fn candidate_dirs(root: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if !root.is_dir() {
        return Ok(());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    let looks_like_run = root.join("config.toml").is_file() || root.join("metrics.json").is_file();
    if looks_like_run {
        out.push(root.to_owned());
    } else {
        for c in children {
            candidate_dirs(&c, out)?;
        }
    }
    Ok(())
}

/// Collects completed runs under `roots`; incomplete ones are skipped with a
/// warning returned alongside.
pub fn collect_runs(roots: &[PathBuf]) -> Result<(Vec<RunSummary>, Vec<String>)> {
    let mut dirs = Vec::new();
    for r in roots {
        candidate_dirs(r, &mut dirs)?;
    }
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for d in dirs {
        match read_run(&d) {
            Ok(r) => runs.push(r),
            Err(e) => warnings.push(format!("skipping {}: {e}", d.display())),
        }
    }
    Ok((runs, warnings))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Cross-seed comparison: per-strategy medians plus the raw per-seed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub runs: Vec<RunSummary>,
    /// Strategy name to median of each column over its seeds.
    pub medians: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub warnings: Vec<String>,
}

pub fn build_report(roots: &[PathBuf]) -> Result<Report> {
    let (runs, warnings) = collect_runs(roots)?;
    if runs.is_empty() {
        let names: Vec<String> = roots.iter().map(|r| r.display().to_string()).collect();
        return Err(ExperimentError::NoResults(names.join(", ")));
    }
    let mut columns: Vec<String> = HEADLINE.iter().map(|s| s.to_string()).collect();
    let mut task_cols: Vec<String> = runs
        .iter()
        .flat_map(|r| r.values.keys())
        .filter(|k| k.starts_with("task"))
        .cloned()
        .collect();
    task_cols.sort();
    task_cols.dedup();
    columns.extend(task_cols);
    let mut by_strategy: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in &runs {
        by_strategy.entry(r.strategy.clone()).or_default().push(r);
    }
    let mut medians = BTreeMap::new();
    for (name, group) in by_strategy {
        let mut m = BTreeMap::new();
        for c in &columns {
            let vals: Vec<f64> = group.iter().filter_map(|r| r.values.get(c).copied().flatten()).collect();
            m.insert(c.clone(), median(&vals));
        }
        medians.insert(name, m);
    }
    Ok(Report {
        columns,
        runs,
        medians,
        warnings,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.12e}"))
}

impl Report {
    /// `kind` is `median` or `seed`; raw per-seed rows follow the medians.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["strategy".to_owned(), "kind".to_owned(), "seed".to_owned(), "n_seeds".to_owned()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (name, m) in &self.medians {
            let n = self.runs.iter().filter(|r| &r.strategy == name).count();
            let mut rec = vec![name.clone(), "median".into(), String::new(), n.to_string()];
            rec.extend(self.columns.iter().map(|c| cell(m[c])));
            w.write_record(&rec)?;
        }
        for r in &self.runs {
            let mut rec = vec![r.strategy.clone(), "seed".into(), r.seed.to_string(), "1".into()];
            rec.extend(self.columns.iter().map(|c| cell(r.values.get(c).copied().flatten())));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Fixed-width table of medians, one row per strategy.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<14}{:>6}", "strategy", "seeds");
        for c in &self.columns {
            let _ = write!(out, " {:>22}", c);
        }
        out.push('\n');
        for (name, m) in &self.medians {
            let n = self.runs.iter().filter(|r| &r.strategy == name).count();
            let _ = write!(out, "{name:<14}{n:>6}");
            for c in &self.columns {
                let v = m[c].map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"));
                let _ = write!(out, " {v:>22}");
            }
            out.push('\n');
        }
        out
    }
}

/// Generates the stream for `config`'s first seed and writes it as CSV.
pub fn export_data(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let cfg = StreamConfig {
        seed: config.seeds[0],
        ..config.stream.clone()
    };
    let mut stream = generate_stream(&cfg)?;
    if cfg.held_out_domain {
        stream.push(generate_held_out(&cfg)?);
    }
    export_stream_csv(&stream, dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[train]\nepochz = 3\n").unwrap_err();
        assert!(err.contains("epochz"), "{err}");
        assert!(ExperimentConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seeds = [1, 2]\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.stream, StreamConfig::default());
    }

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn floats_keep_many_significant_digits() {
        let s = num(1.0 / 3.0).get().to_owned();
        assert_eq!(s, "3.333333333333e-1");
        let v: f64 = serde_json::from_str(&s).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}
