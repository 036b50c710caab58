//! Run every strategy on one stream and print the headline metrics.
//!
//! ```text
//! cargo run --release --example compare_strategies -- 2
//! ```

use krkc::baselines::{run_strategy, Strategy};
use krkc::data::{generate_stream, StreamConfig};
use krkc::trainer::{compute_references, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let stream = generate_stream(&StreamConfig {
        seed,
        ..StreamConfig::default()
    })?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let refs = compute_references(&stream, &cfg)?;

    println!("{:<12} {:>8} {:>8} {:>9} {:>8}", "strategy", "mAP", "Rank-1", "BWT", "FWT");
    for name in Strategy::NAMES {
        let report = run_strategy(&Strategy::by_name(name)?, &stream, &cfg, Some(&refs))?;
        let s = report.summary()?;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:+.3}"));
        println!(
            "{name:<12} {:>8.3} {:>8.3} {:>9} {:>8}",
            s.avg_incremental_map,
            s.avg_incremental_rank1,
            fmt(s.bwt_final_row),
            fmt(s.fwt)
        );
    }
    Ok(())
}
