//! Command-line front-end: `gen-data`, `train-source`, `adapt`, `eval`, `sweep`, `ablate`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::{ExperimentConfig, OutputLock, Profile};
use crate::data::save_dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::experiment::{
    ablation, ablation_table, build_benchmark, pretty_table, quantile_table, run_adaptation, source_model,
    st_quantile_baseline, sweep, sweep_table, RunOptions,
};
use crate::segnet::checkpoint::NetworkCheckpoint;
use crate::segnet::TinySeg;
use crate::trainer::{Flags, Variant};

/// Quantiles of the pseudo-label sweep when `sweep` gets no `--key`.
pub const DEFAULT_QUANTILES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Parser)]
#[command(name = "stvm", version, about = "Source-free segmentation adaptation with metric-learned pseudo-label reliability")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file, applied over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `paper` or `desk`.
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
    /// Seed for source training and adaptation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated ablation flags, e.g. `ST,Aug,MT,MGS,MOCM`.
    #[arg(long, global = true)]
    pub flags: Option<Flags>,
    /// Evaluate with multi-scale testing.
    #[arg(long, global = true)]
    pub mst: bool,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key.path=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the source, target and evaluation splits as PNG directories.
    GenData,
    /// Train the source model and save it as a checkpoint.
    TrainSource,
    /// Adapt a source checkpoint to the target split.
    Adapt {
        /// Source checkpoint; trained on the fly when absent.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Continue from `<out>/state.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One-parameter grid, or the pseudo-label quantile sweep when no key is given.
    Sweep {
        #[arg(long)]
        source: Option<PathBuf>,
        /// Dotted `train.*` key, e.g. `alpha` or `tau_mocm`.
        #[arg(long, requires = "values")]
        key: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Quantiles for the sweep without a key.
        #[arg(long, value_delimiter = ',', conflicts_with = "key")]
        quantiles: Vec<f64>,
    },
    /// Run the six ablation rows and print the combined table.
    Ablate {
        #[arg(long)]
        source: Option<PathBuf>,
    },
}

impl Common {
    /// Flags are folded into the override list so that the usual precedence applies.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = self.profile {
            overrides.push(format!("profile=\"{p}\""));
        }
        overrides.extend(self.overrides.iter().cloned());
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        if let Some(f) = self.flags {
            overrides.push(format!("train.flags=\"{f}\""));
        }
        if self.mst {
            overrides.push("eval.mst=true".into());
        }
        if let Some(o) = &self.out {
            overrides.push(format!("output_dir={}", toml::Value::String(o.display().to_string())));
        }
        ExperimentConfig::resolve(self.config.as_deref(), &overrides)
    }
}

/// Parses the process arguments, runs the command and returns the exit status.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.common.resolve()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let _lock = OutputLock::acquire(&out)?;
    cfg.write_snapshot(&out)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::TrainSource => {
            let bench = build_benchmark(&cfg.data)?;
            let (_, params) = source_model(&cfg, &bench, None)?;
            let path = out.join("source.ckpt");
            NetworkCheckpoint::new(cfg.arch.clone(), cfg.train.seed, cfg.train.source.iterations, params).save(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Adapt { source, resume } => {
            let bench = build_benchmark(&cfg.data)?;
            let (net, params) = source_model(&cfg, &bench, source.as_deref())?;
            let mut opts = RunOptions::from_config(&cfg);
            opts.output_dir = Some(out.clone());
            opts.resume = *resume;
            let outcome = run_adaptation(&net, &params, &bench, &cfg.train, &opts)?;
            if let Some(state) = &outcome.state {
                let path = out.join("adapted.ckpt");
                NetworkCheckpoint::new(cfg.arch.clone(), cfg.train.seed, state.iteration, state.teacher_params().clone())
                    .save(&path)?;
            }
            println!("flags {}: mIoU {:.2}", cfg.train.flags, 100.0 * outcome.report.miou);
            Ok(())
        }
        Command::Eval { checkpoint } => {
            let ck = NetworkCheckpoint::load(checkpoint)?;
            let net = TinySeg::new(ck.meta.arch.clone())?;
            let bench = build_benchmark(&cfg.data)?;
            let report = evaluate(&net, &ck.params, &bench.eval, cfg.mst_scales())?;
            let mut csv = String::from("class,iou\n");
            for (c, v) in report.per_class.iter().enumerate() {
                csv.push_str(&format!("{c},{}\n", v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))));
            }
            csv.push_str(&format!("mIoU,{:.2}\n", 100.0 * report.miou));
            print!("{}", pretty_table(&csv));
            Ok(())
        }
        Command::Sweep {
            source,
            key,
            values,
            quantiles,
        } => {
            let bench = build_benchmark(&cfg.data)?;
            let (net, params) = source_model(&cfg, &bench, source.as_deref())?;
            let mut opts = RunOptions::from_config(&cfg);
            opts.output_dir = Some(out.clone());
            let (name, csv) = match key {
                Some(k) => {
                    let rows = sweep(&net, &params, &bench, &cfg.train, &opts, k, values)?;
                    ("sweep.csv", sweep_table(k, &rows))
                }
                None => {
                    let qs = if quantiles.is_empty() { DEFAULT_QUANTILES.to_vec() } else { quantiles.clone() };
                    let rows = st_quantile_baseline(&net, &params, &bench, &cfg.train, &opts, &qs)?;
                    ("quantile_sweep.csv", quantile_table(&rows))
                }
            };
            write_table(&out.join(name), &csv)
        }
        Command::Ablate { source } => {
            let bench = build_benchmark(&cfg.data)?;
            let (net, params) = source_model(&cfg, &bench, source.as_deref())?;
            let mut opts = RunOptions::from_config(&cfg);
            opts.output_dir = Some(out.clone());
            let rows = ablation(&net, &params, &bench, &cfg.train, &opts, &Variant::LADDER)?;
            write_table(&out.join("ablation.csv"), &ablation_table(&rows))
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let bench = build_benchmark(&cfg.data)?;
    for (name, ds) in [("source", &bench.source), ("target", &bench.target), ("eval", &bench.eval)] {
        let dir = out.join(name);
        save_dataset(&dir, ds)?;
        info!("wrote {} images to {}", ds.len(), dir.display());
    }
    println!("{}", out.display());
    Ok(())
}

fn write_table(path: &Path, csv: &str) -> Result<()> {
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    print!("{}", pretty_table(csv));
    Ok(())
}
