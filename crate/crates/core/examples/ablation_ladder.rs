//! The six-row ablation ladder from one source model.
//!
//! `cargo run --release --example ablation_ladder -- [key=value ...]`

use stvm::config::ExperimentConfig;
use stvm::experiment::{ablation, ablation_table, build_benchmark, pretty_table, source_model, RunOptions};
use stvm::trainer::Variant;

fn main() -> stvm::error::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ExperimentConfig::resolve(None, &overrides)?;
    let bench = build_benchmark(&cfg.data)?;
    let (net, source) = source_model(&cfg, &bench, None)?;
    let rows = ablation(&net, &source, &bench, &cfg.train, &RunOptions::from_config(&cfg), &Variant::LADDER)?;
    print!("{}", pretty_table(&ablation_table(&rows)));
    Ok(())
}
