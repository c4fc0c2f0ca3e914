//! Full adaptation with every component on, logging the metrics stream.
//!
//! `cargo run --release --example adapt_stvm -- [key=value ...]`; rows go to `adapt_out/metrics.csv`.

use stvm::config::ExperimentConfig;
use stvm::experiment::{build_benchmark, run_adaptation, source_model, RunOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ExperimentConfig::resolve(None, &overrides)?;
    let bench = build_benchmark(&cfg.data)?;
    let (net, source) = source_model(&cfg, &bench, None)?;
    let mut opts = RunOptions::from_config(&cfg);
    opts.output_dir = Some("adapt_out".into());
    std::fs::create_dir_all("adapt_out")?;
    let outcome = run_adaptation(&net, &source, &bench, &cfg.train, &opts)?;
    println!("iteration   mIoU  reliability  buffered");
    for r in &outcome.rows {
        println!("{:9} {:6.2} {:12.3} {:9}", r.iteration, 100.0 * r.miou, r.mean_reliability, r.buffer_occupancy);
    }
    if let Some(s) = outcome.silhouette {
        println!("final metric silhouette {s:.2}");
    }
    Ok(())
}
