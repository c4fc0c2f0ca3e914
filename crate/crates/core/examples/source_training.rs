//! Trains the source model, reports mIoU on both domains and saves a checkpoint.
//!
//! `cargo run --release --example source_training -- [key=value ...]`

use stvm::config::ExperimentConfig;
use stvm::eval::evaluate;
use stvm::experiment::{build_benchmark, source_model};
use stvm::segnet::checkpoint::NetworkCheckpoint;

fn main() -> stvm::error::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ExperimentConfig::resolve(None, &overrides)?;
    let bench = build_benchmark(&cfg.data)?;
    let (net, params) = source_model(&cfg, &bench, None)?;
    let on_source = evaluate(&net, &params, &bench.source, None)?;
    let on_target = evaluate(&net, &params, &bench.eval, None)?;
    println!("source training split mIoU {:.2}", 100.0 * on_source.miou);
    println!("target evaluation mIoU     {:.2}", 100.0 * on_target.miou);
    let path = std::env::temp_dir().join("stvm_source.ckpt");
    NetworkCheckpoint::new(cfg.arch.clone(), cfg.train.seed, cfg.train.source.iterations, params).save(&path)?;
    println!("checkpoint {}", path.display());
    Ok(())
}
