//! Write a config, run a small experiment from it and build the report, the
//! same steps as `krkc run` followed by `krkc report`.

use krkc::experiment::{build_report, run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = tempfile_dir();
    let text = format!(
        r#"
strategies = ["naive", "krkc"]
seeds = [0, 1]
out_dir = "{}"

[stream]
n_tasks = 3

[train]
epochs = 10
"#,
        out.display()
    );
    let cfg = ExperimentConfig::from_toml(&text)?;
    println!("resolved config:\n{}", cfg.to_toml());

    for dir in run_experiment(&cfg)? {
        println!("wrote {}", dir.display());
    }
    let report = build_report(&[out.clone()])?;
    println!("{}", report.to_text());
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("krkc_example_{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create output directory");
    dir
}
