//! Single-scale against multi-scale evaluation of the source model.
//!
//! `cargo run --release --example multi_scale_eval -- [key=value ...]`

use stvm::config::ExperimentConfig;
use stvm::eval::evaluate;
use stvm::experiment::{build_benchmark, source_model};

fn main() -> stvm::error::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ExperimentConfig::resolve(None, &overrides)?;
    let bench = build_benchmark(&cfg.data)?;
    let (net, params) = source_model(&cfg, &bench, None)?;
    for scales in [vec![1.0], vec![0.5, 1.0], vec![1.0, 1.5], cfg.eval.mst_scales.clone()] {
        let report = evaluate(&net, &params, &bench.eval, Some(&scales))?;
        println!("scales {scales:?}: mIoU {:.2}", 100.0 * report.miou);
    }
    Ok(())
}
