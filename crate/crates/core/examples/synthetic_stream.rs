//! Generate a multi-domain identity stream, inspect it and export it as CSV.
//!
//! ```text
//! cargo run --example synthetic_stream -- /tmp/stream
//! ```

use krkc::data::{export_stream_csv, generate_held_out, generate_stream, import_stream_csv, StreamConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = StreamConfig {
        seed: 3,
        ..StreamConfig::default()
    };
    let stream = generate_stream(&cfg)?;
    for task in &stream {
        println!(
            "task {}: {} train rows over {} ids, {} queries, {} gallery rows, domain seed {:#x}",
            task.task,
            task.train.len(),
            task.num_train_identities(),
            task.query.len(),
            task.gallery.len(),
            task.domain.seed
        );
    }
    let held_out = generate_held_out(&cfg)?;
    println!("held-out domain: {} queries", held_out.query.len());

    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("krkc_stream"));
    std::fs::create_dir_all(&dir)?;
    export_stream_csv(&stream, &dir)?;
    let back = import_stream_csv(&dir)?;
    let same = back.iter().zip(&stream).all(|(a, b)| a.train == b.train && a.query == b.query && a.gallery == b.gallery);
    println!("exported to {} (round trip identical: {same})", dir.display());
    Ok(())
}
