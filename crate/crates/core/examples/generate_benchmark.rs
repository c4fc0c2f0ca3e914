//! Generates the source, target and evaluation splits and writes them as PNG directories.
//!
//! `cargo run --release --example generate_benchmark -- [out_dir] [key=value ...]`

use std::path::PathBuf;

use stvm::config::ExperimentConfig;
use stvm::data::save_dataset;
use stvm::experiment::build_benchmark;

fn main() -> stvm::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "benchmark".into()));
    let overrides: Vec<String> = args.collect();
    let cfg = ExperimentConfig::resolve(None, &overrides)?;
    let bench = build_benchmark(&cfg.data)?;
    for (name, ds) in [("source", &bench.source), ("target", &bench.target), ("eval", &bench.eval)] {
        save_dataset(&out.join(name), ds)?;
        let hist = if ds.is_labeled() { format!("{:?}", ds.class_histogram()) } else { "unlabelled".into() };
        println!("{name:6} {:4} images  class pixels {hist}", ds.len());
    }
    println!("written to {}", out.display());
    Ok(())
}
