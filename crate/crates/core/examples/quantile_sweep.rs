//! Plain self-training with class-wise confidence filtering at several quantiles.
//!
//! `cargo run --release --example quantile_sweep -- [key=value ...]`

use stvm::config::ExperimentConfig;
use stvm::experiment::{build_benchmark, pretty_table, quantile_table, source_model, st_quantile_baseline, RunOptions};

fn main() -> stvm::error::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ExperimentConfig::resolve(None, &overrides)?;
    let bench = build_benchmark(&cfg.data)?;
    let (net, source) = source_model(&cfg, &bench, None)?;
    let opts = RunOptions {
        silhouette_pixels: 0,
        ..RunOptions::from_config(&cfg)
    };
    let rows = st_quantile_baseline(&net, &source, &bench, &cfg.train, &opts, &stvm::cli::DEFAULT_QUANTILES)?;
    print!("{}", pretty_table(&quantile_table(&rows)));
    Ok(())
}
