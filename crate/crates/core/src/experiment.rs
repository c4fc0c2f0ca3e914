//! End-to-end runs: benchmark construction, adaptation with metric rows and
//! checkpoints, the ablation ladder and one-parameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::{with_override, DataConfig, ExperimentConfig};
use crate::data::{gen_shiftshapes_with, load_dataset, ClassMapping, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, metric_silhouette, IoUReport};
use crate::segnet::checkpoint::NetworkCheckpoint;
use crate::segnet::{NetworkParams, SegNet, TinySeg};
use crate::trainer::{adapt_step, next_batch, rng_stream, streams, train_source, RunState, TrainConfig, Variant};

/// Labelled source training set, unlabelled target training set and labelled target evaluation set.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub source: Dataset,
    pub target: Dataset,
    pub eval: Dataset,
}

/// Generated splits use distinct geometry seeds derived from `data.seed`.
pub fn build_benchmark(data: &DataConfig) -> Result<Benchmark> {
    let mapping = match &data.mapping {
        Some(p) => ClassMapping::load(p)?,
        None => ClassMapping::identity(data.num_classes),
    };
    let pick = |dir: &Option<PathBuf>, spec, n, salt: u64| -> Result<Dataset> {
        match dir {
            Some(d) => load_dataset(d, &mapping),
            None => Ok(gen_shiftshapes_with(
                spec,
                &data.geometry,
                n,
                data.size,
                data.num_classes,
                data.seed.wrapping_mul(1_000_003).wrapping_add(salt),
            )?
            .dataset),
        }
    };
    let source = pick(&data.source_dir, &data.source_domain, data.n_source, 1)?;
    let target = pick(&data.target_dir, &data.target_domain, data.n_target, 2)?.unlabeled();
    let eval = pick(&data.eval_dir, &data.target_domain, data.n_eval, 3)?;
    if !eval.is_labeled() {
        return Err(Error::Data("evaluation split needs labels".into()));
    }
    Ok(Benchmark { source, target, eval })
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub mean_reliability: f64,
    pub buffer_occupancy: usize,
    pub silhouette: Option<f64>,
}

/// Column order: `iter, iou_0 … iou_{C−1}, miou, mean_reliability, buffer_occupancy, silhouette`.
/// IoU values are percentages; absent classes and missing silhouettes are empty cells.
pub fn metrics_csv(rows: &[MetricsRow], num_classes: usize) -> String {
    let mut out = String::from("iter");
    for c in 0..num_classes {
        let _ = write!(out, ",iou_{c}");
    }
    out.push_str(",miou,mean_reliability,buffer_occupancy,silhouette\n");
    for r in rows {
        let _ = write!(out, "{}", r.iteration);
        for v in &r.per_class {
            match v {
                Some(v) => {
                    let _ = write!(out, ",{:.6}", 100.0 * v);
                }
                None => out.push(','),
            }
        }
        let _ = write!(out, ",{:.6},{:.6},{}", 100.0 * r.miou, r.mean_reliability, r.buffer_occupancy);
        match r.silhouette {
            Some(s) => {
                let _ = writeln!(out, ",{s:.6}");
            }
            None => out.push_str(",\n"),
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Iterations between metric rows; 0 records only the final row.
    pub eval_interval: u64,
    pub silhouette_pixels: usize,
    pub mst: Option<Vec<f64>>,
    /// Where `metrics.csv` and `state.ckpt` go.
    pub output_dir: Option<PathBuf>,
    pub checkpoint_interval: u64,
    /// Continue from `output_dir/state.ckpt` if present.
    pub resume: bool,
    /// Stop after this many iterations even if the schedule is longer; simulates an interruption.
    pub stop_after: Option<u64>,
}

impl RunOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            eval_interval: cfg.eval.interval,
            silhouette_pixels: cfg.eval.silhouette_pixels,
            mst: cfg.mst_scales().map(<[f64]>::to_vec),
            output_dir: None,
            checkpoint_interval: cfg.checkpoint_interval,
            resume: false,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: IoUReport,
    pub silhouette: Option<f64>,
    pub rows: Vec<MetricsRow>,
    /// `None` for the non-adapted source row.
    pub state: Option<RunState>,
}

fn eval_row<N: SegNet>(
    net: &N,
    state: &RunState,
    bench: &Benchmark,
    cfg: &TrainConfig,
    opts: &RunOptions,
    mean_reliability: f64,
) -> Result<(MetricsRow, IoUReport)> {
    let params = state.teacher_params();
    let report = evaluate(net, params, &bench.eval, opts.mst.as_deref())?;
    let silhouette = if opts.silhouette_pixels > 0 {
        let mut rng = rng_stream(cfg.seed, streams::EVAL);
        Some(metric_silhouette(net, params, &state.metric, &bench.eval, opts.silhouette_pixels, &mut rng)?.overall)
    } else {
        None
    };
    Ok((
        MetricsRow {
            iteration: state.iteration,
            per_class: report.per_class.clone(),
            miou: report.miou,
            mean_reliability,
            buffer_occupancy: state.buffers.occupancy(),
            silhouette,
        },
        report,
    ))
}

fn read_rows(path: &Path) -> Result<Vec<String>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().skip(1).map(str::to_string).collect())
}

/// Adapts `source` to the target split, or only evaluates it when the flags disable self-training.
pub fn run_adaptation<N: SegNet>(
    net: &N,
    source: &NetworkParams<f32>,
    bench: &Benchmark,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if !cfg.flags.adapts() {
        let report = evaluate(net, source, &bench.eval, opts.mst.as_deref())?;
        let row = MetricsRow {
            iteration: 0,
            per_class: report.per_class.clone(),
            miou: report.miou,
            mean_reliability: 1.0,
            buffer_occupancy: 0,
            silhouette: None,
        };
        if let Some(dir) = &opts.output_dir {
            write_csv(dir, &metrics_csv(&[row.clone()], net.num_classes()), &[])?;
        }
        return Ok(RunOutcome {
            report,
            silhouette: None,
            rows: vec![row],
            state: None,
        });
    }
    if bench.target.is_empty() {
        return Err(Error::Data("empty target split".into()));
    }

    let ckpt_path = opts.output_dir.as_ref().map(|d| d.join("state.ckpt"));
    let mut previous_rows = Vec::new();
    let mut state = match &ckpt_path {
        Some(p) if opts.resume && p.is_file() => {
            let s = RunState::load(p)?;
            let kept = read_rows(&opts.output_dir.as_ref().expect("set").join("metrics.csv"))?;
            previous_rows = kept
                .into_iter()
                .filter(|l| l.split(',').next().and_then(|v| v.parse::<u64>().ok()).is_some_and(|it| it <= s.iteration))
                .collect();
            info!("resuming at iteration {}", s.iteration);
            s
        }
        _ => RunState::new(net, source, bench.target.len(), cfg)?,
    };

    let mut rows = Vec::new();
    let mut last_reliability = 1.0;
    let mut final_report = None;
    let stop = opts.stop_after.map_or(cfg.iterations, |s| s.min(cfg.iterations));
    while state.iteration < stop {
        let batch = next_batch(net, &mut state, &bench.target, cfg);
        let stats = adapt_step(net, &mut state, &batch, cfg)?;
        last_reliability = stats.mean_reliability;
        let it = state.iteration;
        if it % 50 == 0 {
            info!(
                "iter {it}: ce {:.4} nca {} reliability {:.3} buffers {}",
                stats.ce_loss,
                stats.nca_loss.map_or("-".into(), |v| format!("{v:.4}")),
                stats.mean_reliability,
                stats.buffer_occupancy
            );
        }
        let due_eval = (opts.eval_interval > 0 && it % opts.eval_interval == 0) || it == cfg.iterations;
        if due_eval {
            let (row, report) = eval_row(net, &state, bench, cfg, opts, last_reliability)?;
            rows.push(row);
            final_report = Some(report);
        }
        if let Some(p) = &ckpt_path {
            if (opts.checkpoint_interval > 0 && it % opts.checkpoint_interval == 0) || it == stop {
                state.save(p)?;
            }
        }
    }
    let (report, silhouette) = match final_report {
        Some(r) if rows.last().map(|r| r.iteration) == Some(state.iteration) => (r, rows.last().and_then(|r| r.silhouette)),
        _ => {
            // interrupted runs only record rows that an uninterrupted run would also write
            let (row, report) = eval_row(net, &state, bench, cfg, opts, last_reliability)?;
            let s = row.silhouette;
            if state.iteration == cfg.iterations {
                rows.push(row);
            }
            (report, s)
        }
    };
    if let Some(dir) = &opts.output_dir {
        write_csv(dir, &metrics_csv(&rows, net.num_classes()), &previous_rows)?;
    }
    Ok(RunOutcome {
        report,
        silhouette,
        rows,
        state: Some(state),
    })
}

fn write_csv(dir: &Path, csv: &str, previous: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = csv.lines();
    let mut out = String::new();
    if let Some(header) = lines.next() {
        out.push_str(header);
        out.push('\n');
    }
    for l in previous {
        out.push_str(l);
        out.push('\n');
    }
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

/// Trains or loads the source model for an experiment.
pub fn source_model(cfg: &ExperimentConfig, bench: &Benchmark, checkpoint: Option<&Path>) -> Result<(TinySeg, NetworkParams<f32>)> {
    let net = TinySeg::new(cfg.arch.clone())?;
    let params = match checkpoint {
        Some(p) => {
            let ck = NetworkCheckpoint::load(p)?;
            if ck.meta.arch != cfg.arch {
                return Err(Error::Checkpoint(format!("{} was trained with a different architecture", p.display())));
            }
            ck.params
        }
        None => train_source(&net, &bench.source, &cfg.train.source, cfg.train.seed)?,
    };
    Ok((net, params))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub miou: f64,
    pub silhouette: Option<f64>,
}

/// Runs each ladder row from the same source model and seed.
pub fn ablation<N: SegNet>(
    net: &N,
    source: &NetworkParams<f32>,
    bench: &Benchmark,
    cfg: &TrainConfig,
    opts: &RunOptions,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let run_cfg = TrainConfig {
            flags: v.flags(),
            ..cfg.clone()
        };
        let mut run_opts = opts.clone();
        run_opts.output_dir = opts.output_dir.as_ref().map(|d| d.join(v.name()));
        let out = run_adaptation(net, source, bench, &run_cfg, &run_opts)?;
        info!("{}: mIoU {:.2}", v.name(), 100.0 * out.report.miou);
        rows.push(AblationRow {
            variant: v.name(),
            miou: 100.0 * out.report.miou,
            silhouette: out.silhouette,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,miou,silhouette\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{}",
            r.variant,
            r.miou,
            r.silhouette.map_or(String::new(), |v| format!("{v:.4}"))
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub miou: f64,
    pub silhouette: Option<f64>,
}

/// One run per value of a single `TrainConfig` field, given as a dotted key.
pub fn sweep<N: SegNet>(
    net: &N,
    source: &NetworkParams<f32>,
    bench: &Benchmark,
    cfg: &TrainConfig,
    opts: &RunOptions,
    key: &str,
    values: &[String],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let run_cfg: TrainConfig = with_override(cfg, key, v)?;
        run_cfg.validate()?;
        let mut run_opts = opts.clone();
        run_opts.output_dir = opts.output_dir.as_ref().map(|d| d.join(format!("{key}={v}")));
        let out = run_adaptation(net, source, bench, &run_cfg, &run_opts)?;
        info!("{key}={v}: mIoU {:.2}", 100.0 * out.report.miou);
        rows.push(SweepRow {
            value: v.clone(),
            miou: 100.0 * out.report.miou,
            silhouette: out.silhouette,
        });
    }
    Ok(rows)
}

pub fn sweep_table(key: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{key},miou,silhouette\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{}",
            r.value,
            r.miou,
            r.silhouette.map_or(String::new(), |v| format!("{v:.4}"))
        );
    }
    s
}

/// Plain self-training where only the class-balanced top fraction of pseudo-labels supervises.
pub fn st_quantile_baseline<N: SegNet>(
    net: &N,
    source: &NetworkParams<f32>,
    bench: &Benchmark,
    cfg: &TrainConfig,
    opts: &RunOptions,
    quantiles: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(quantiles.len());
    for &q in quantiles {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!("quantile {q} outside (0, 1]")));
        }
        let run_cfg = TrainConfig {
            flags: Variant::St.flags(),
            supervision_quantile: Some(q),
            ..cfg.clone()
        };
        let mut run_opts = opts.clone();
        run_opts.output_dir = opts.output_dir.as_ref().map(|d| d.join(format!("quantile={q}")));
        let r = run_adaptation(net, source, bench, &run_cfg, &run_opts)?;
        info!("quantile {q}: mIoU {:.2}", 100.0 * r.report.miou);
        out.push((q, 100.0 * r.report.miou));
    }
    Ok(out)
}

pub fn quantile_table(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("quantile,miou\n");
    for (q, m) in rows {
        let _ = writeln!(s, "{q},{m:.4}");
    }
    s
}

/// Aligned text rendering of a CSV table.
pub fn pretty_table(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r.iter().enumerate().map(|(c, s)| format!("{s:>w$}", w = widths[c])).collect();
        out.push_str(&cells.join("  "));
        out.push('\n');
    }
    out
}
