//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use ndarray::{array, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stvm::config::ExperimentConfig;
use stvm::eval::{iou_report, multi_scale_predict, silhouette};
use stvm::experiment::{ablation, build_benchmark, source_model, st_quantile_baseline, RunOptions};
use stvm::map::SpatialMap;
use stvm::metric::{nca_loss, proxy_distance, reliability_weight, ProxyBank, Sample, SampleSet};
use stvm::mocm::PatchBuffers;
use stvm::segnet::{NetworkParams, SegNet, TinySeg};
use stvm::teacher::{EmaConfig, TeacherState};
use stvm::trainer::{RunState, TrainConfig, Variant};

const SEEDS: [u64; 3] = [0, 1, 2];
const QUANTILES: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

struct LadderRun {
    miou: BTreeMap<&'static str, f64>,
    silhouette: BTreeMap<&'static str, f64>,
    elapsed: Duration,
}

fn desk(seed: u64) -> ExperimentConfig {
    ExperimentConfig::resolve(None, &[format!("train.seed={seed}")]).unwrap()
}

/// Six ladder rows per seed, shared by the first three criteria.
fn ladder() -> &'static Vec<LadderRun> {
    static RUNS: OnceLock<Vec<LadderRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let cfg = desk(seed);
                let start = Instant::now();
                let bench = build_benchmark(&cfg.data).unwrap();
                let (net, source) = source_model(&cfg, &bench, None).unwrap();
                let rows = ablation(&net, &source, &bench, &cfg.train, &RunOptions::from_config(&cfg), &Variant::LADDER).unwrap();
                let elapsed = start.elapsed();
                let miou = rows.iter().map(|r| (r.variant, r.miou)).collect();
                let silhouette = rows.iter().filter_map(|r| r.silhouette.map(|s| (r.variant, s))).collect();
                let line: Vec<String> = rows.iter().map(|r| format!("{}={:.2}", r.variant, r.miou)).collect();
                println!("  seed {seed}: {} ({:.0?})", line.join(" "), elapsed);
                LadderRun { miou, silhouette, elapsed }
            })
            .collect()
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn median_of(pick: impl Fn(&LadderRun) -> Option<f64>) -> f64 {
    median(ladder().iter().filter_map(pick).collect())
}

fn criterion_1() -> (bool, String) {
    let m = |name: &str| median_of(|r| r.miou.get(name).copied());
    let [src, st, aug, mt, raw, stvm] = ["Source", "ST", "ST_Aug", "ST_MT", "STvM_Raw", "STvM"].map(m);
    let order = src < st && st < aug && aug <= mt && mt <= raw && raw < stvm;
    let gain = stvm - src >= 10.0;
    let margin = stvm - raw >= 2.0;
    let worst = ladder().iter().map(|r| r.elapsed).max().unwrap();
    let fast = worst <= Duration::from_secs(30 * 60);
    (
        order && gain && margin && fast,
        format!(
            "median mIoU Source {src:.2} ST {st:.2} ST_Aug {aug:.2} ST_MT {mt:.2} STvM_Raw {raw:.2} STvM {stvm:.2}; \
             STvM-Source {:.2} (>=10), STvM-Raw {:.2} (>=2), slowest ladder {worst:.0?}",
            stvm - src,
            stvm - raw
        ),
    )
}

fn criterion_2() -> (bool, String) {
    let m = |name: &str| median_of(|r| r.silhouette.get(name).copied());
    let [mt, raw, stvm] = ["ST_MT", "STvM_Raw", "STvM"].map(m);
    (stvm > raw && raw > mt, format!("median silhouette STvM {stvm:.2} > STvM_Raw {raw:.2} > ST_MT {mt:.2}"))
}

fn criterion_3() -> (bool, String) {
    let cfg = desk(SEEDS[0]);
    let bench = build_benchmark(&cfg.data).unwrap();
    let (net, source) = source_model(&cfg, &bench, None).unwrap();
    let opts = RunOptions {
        silhouette_pixels: 0,
        ..RunOptions::from_config(&cfg)
    };
    let rows = st_quantile_baseline(&net, &source, &bench, &cfg.train, &opts, &QUANTILES).unwrap();
    let table: Vec<String> = rows.iter().map(|(q, m)| format!("{q}:{m:.2}")).collect();
    let full = rows.iter().find(|(q, _)| *q == 1.0).map(|r| r.1).unwrap();
    let st = ladder()[0].miou["ST"];
    (
        rows.len() == 5 && (full - st).abs() <= 0.5,
        format!("table [{}]; q=1.0 {full:.2} vs ST {st:.2}", table.join(" ")),
    )
}

fn criterion_4() -> (bool, String) {
    let sets = [
        ("nca/metric", nca_metric_gradient_errors(INSTANCES)),
        ("nca/proxies", nca_proxy_gradient_errors(INSTANCES)),
        ("weighted-ce/student", ce_gradient_errors(INSTANCES)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, errs) in &sets {
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        ok &= errs.len() >= 20 && worst < TOLERANCE;
        parts.push(format!("{name} {} instances worst {worst:.1e}", errs.len()));
    }
    (ok, parts.join(", "))
}

fn single_pixel(v: [f64; 2]) -> SpatialMap<f64> {
    SpatialMap::from_matrix(1, 1, Array2::from_shape_vec((1, 2), v.to_vec()).unwrap()).unwrap()
}

fn criterion_5() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut distance_ok = true;
    for _ in 0..1000 {
        let dim = rng.gen_range(1..12);
        let x = ndarray::Array1::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0f64));
        let y = ndarray::Array1::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0f64));
        let d = proxy_distance(x.view(), y.view()).unwrap();
        let cos = x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt());
        let scaled = proxy_distance(x.mapv(|v| v * 7.5).view(), y.view()).unwrap();
        distance_ok &= (0.0..=4.0).contains(&d) && (d - (2.0 - 2.0 * cos)).abs() < 1e-9 && (scaled - d).abs() < 1e-9;
    }
    let (w_beta, w0, w4) = (
        reliability_weight(0.6, 2.0, 0.6),
        reliability_weight(0.0, 2.0, 0.6),
        reliability_weight(4.0, 2.0, 0.6),
    );
    let weights_ok = w_beta == 0.5 && (w0 - 0.768525).abs() < 1e-6;
    let w4_ok = (w4 - 1.1094e-3).abs() < 1e-7;

    let f = single_pixel([1.0, 0.0]);
    let one = SampleSet {
        samples: vec![Sample { y: 0, x: 0, class: 0 }],
    };
    let nca = |p: Array2<f64>| nca_loss(&f, &one, &ProxyBank { proxies: p }, 0.25).unwrap().loss;
    let n0 = nca(array![[0.3, 0.7]]);
    let n1 = nca(array![[1.0, 1.0], [1.0, -1.0]]);
    let n2 = nca(array![[1.0, 0.0], [0.0, 1.0]]);
    let nca_ok = n0.abs() < 1e-9 && (n1 - std::f64::consts::LN_2).abs() < 1e-9 && (n2 - (-8f64).exp().ln_1p()).abs() < 1e-9;
    (
        distance_ok && weights_ok && w4_ok && nca_ok,
        format!(
            "distance properties {distance_ok}; w(beta)={w_beta} w(0)={w0:.6} w(4)={w4:.7e} (pinned 1.1094e-3 +-1e-7: {w4_ok}); \
             NCA {n0:.1e}/{n1:.9}/{n2:.9e}"
        ),
    )
}

fn criterion_6() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = TrainConfig::default().metric_quantile;
    let (mut exact, mut worst) = (0, f64::NEG_INFINITY);
    for _ in 0..100 {
        let (e, excess) = threshold_check(&mut rng, q);
        exact += e as usize;
        worst = worst.max(excess);
    }
    (
        exact == 100 && worst <= 1e-12,
        format!("{exact}/100 frames exact; max selected fraction - (q + 1/n_c) = {worst:.3}"),
    )
}

fn criterion_7() -> (bool, String) {
    let trace = fifo_trace_matches(7, 10_000);
    let mut b = PatchBuffers::new(2, 4).unwrap();
    let strict = !b.admit(tagged_patch(1, 0.8), 0.8) && b.admit(tagged_patch(1, 0.79), 0.8);
    (trace && strict, format!("10000-event trace matches FIFO oracle: {trace}; rejected at d = tau: {strict}"))
}

fn criterion_8() -> (bool, String) {
    let ok = (0..200).filter(|&s| mixing_integrity(s)).count();
    (ok == 200, format!("{ok}/200 mixes change image, labels and reliability on the pasted set only"))
}

fn criterion_9() -> (bool, String) {
    let (net, source, bench, cfg) = small_setup();
    let mut s = RunState::new(&net, &source, bench.target.len(), &cfg).unwrap();
    let mut teacher_ok = true;
    for _ in 0..6 {
        let before = s.teacher.as_ref().unwrap().params.clone();
        steps(&net, &mut s, &bench, &cfg, 1);
        let moved = before != s.teacher.as_ref().unwrap().params;
        teacher_ok &= moved == (s.iteration % cfg.ema.update_period == 0);
    }
    let metric_after = |c: &TrainConfig| {
        let mut s = RunState::new(&net, &source, bench.target.len(), c).unwrap();
        steps(&net, &mut s, &bench, c, 1);
        (s.metric, s.proxies)
    };
    let metric_ok = metric_after(&cfg)
        == metric_after(&TrainConfig {
            lr_feature: 5e-2,
            lr_classifier: 1e-1,
            ..cfg.clone()
        });
    let plain = TrainConfig {
        flags: "ST,Aug,MT".parse().unwrap(),
        ..cfg.clone()
    };
    let student_after = |c: &TrainConfig, proxies: Option<u64>| {
        let mut s = RunState::new(&net, &source, bench.target.len(), c).unwrap();
        if let Some(seed) = proxies {
            s.proxies = ProxyBank::init(net.num_classes(), net.arch().metric_dim, seed);
        }
        steps(&net, &mut s, &bench, c, 3);
        s.student
    };
    let base = student_after(&plain, None);
    let student_ok = base == student_after(&TrainConfig { lr_metric: 0.5, ..plain.clone() }, None) && base == student_after(&plain, Some(9));
    (
        teacher_ok && metric_ok && student_ok,
        format!("teacher only at EMA boundaries {teacher_ok}; metric untouched by CE {metric_ok}; student untouched by NCA {student_ok}"),
    )
}

fn criterion_10() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let output = Command::new(env!("CARGO_BIN_EXE_stvm"))
            .args(["--seed", "3", "--out"])
            .arg(&out)
            .args(["--set", "data.n_source=16", "--set", "data.n_target=8", "--set", "data.n_eval=4"])
            .args(["--set", "train.iterations=6", "--set", "train.source.iterations=20", "--set", "eval.interval=2"])
            .arg("adapt")
            .output()
            .unwrap();
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let csv_ok = a == b && !a.is_empty();

    let net = TinySeg::new(tiny_arch(3)).unwrap();
    let zeros: NetworkParams<f64> = net.init_network::<f64>(0).zeros_like();
    let mut ones = zeros.clone();
    for e in ones.entries_mut() {
        e.value.fill(1.0);
    }
    let lambda = 0.05;
    let mut t = TeacherState::new(zeros, EmaConfig { smoothing: lambda, update_period: 1 }).unwrap();
    let mut worst: f64 = 0.0;
    for k in 1..=100u64 {
        t.ema_update(&ones, k).unwrap();
        let expect = 1.0 - (1.0 - lambda).powi(k as i32);
        for e in t.params.entries() {
            worst = e.value.iter().fold(worst, |m, &v| m.max((v - expect).abs()));
        }
    }
    (
        csv_ok && worst < 1e-12,
        format!("two CLI adapt runs byte-identical: {csv_ok}; EMA closed-form max error {worst:.1e}"),
    )
}

fn criterion_11() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut iou_ok = true;
    for _ in 0..200 {
        let nc = rng.gen_range(2..7);
        let n = rng.gen_range(1..4);
        let mut gen = |ignore: bool| -> Vec<Array2<u8>> {
            (0..n)
                .map(|_| Array2::from_shape_fn((9, 11), |_| if ignore && rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..nc as u8) }))
                .collect()
        };
        let (p, g) = (gen(false), gen(true));
        iou_ok &= iou_report(&p, &g, nc).unwrap().per_class == iou_brute_force(&p, &g, nc);
    }

    let labels: Vec<usize> = (0..500).map(|i| i % 4).collect();
    let points = Array2::from_shape_fn((500, 6), |(i, c)| if c == labels[i] { 1.5 } else { 0.0 } + rng.gen_range(-1.0..1.0));
    let sil_err = (silhouette(points.view(), &labels).unwrap().overall - silhouette_brute_force(&points, &labels)).abs();

    let net = TinySeg::new(tiny_arch(4)).unwrap();
    let params = net.init_network::<f32>(3);
    let image = Array3::from_shape_fn((24, 24, 3), |_| rng.gen::<f32>());
    let single = multi_scale_predict(&net, &params, &image, &[1.0]).unwrap();
    let logits = net.forward(&params, image.view()).unwrap().logits;
    let mut mst_err: f64 = 0.0;
    for (row, out) in logits.matrix().rows().into_iter().zip(single.matrix().rows()) {
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = mx + row.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>().ln();
        for (&l, &o) in row.iter().zip(out.iter()) {
            mst_err = mst_err.max((l as f64 - lse - o as f64).abs());
        }
    }
    let a = multi_scale_predict(&net, &params, &image, &[0.5]).unwrap();
    let b = multi_scale_predict(&net, &params, &image, &[1.5]).unwrap();
    let ab = multi_scale_predict(&net, &params, &image, &[0.5, 1.5]).unwrap();
    for ((&x, &y), &z) in a.matrix().iter().zip(b.matrix().iter()).zip(ab.matrix().iter()) {
        let composed = ((x as f64).exp() + (y as f64).exp()) / 2.0;
        mst_err = mst_err.max((composed - (z as f64).exp()).abs());
    }
    (
        iou_ok && sil_err < 1e-6 && mst_err < 1e-6,
        format!("IoU exact on 200 map sets {iou_ok}; silhouette |err| {sil_err:.1e} on 500 points; MST composition |err| {mst_err:.1e}"),
    )
}

fn main() {
    // the test harness passes its own flags; `--list` must not run anything
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> (bool, String)); 11] = [
        ("ablation ladder ordering", criterion_1),
        ("silhouette ordering", criterion_2),
        ("quantile sweep", criterion_3),
        ("gradient suite", criterion_4),
        ("closed-form checks", criterion_5),
        ("thresholding oracle", criterion_6),
        ("buffer semantics", criterion_7),
        ("mixing integrity", criterion_8),
        ("gradient-flow separation", criterion_9),
        ("determinism", criterion_10),
        ("evaluation oracles", criterion_11),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = check();
        failed += !ok as usize;
        println!("criterion {:>2} {:<26} {}  {detail}", i + 1, name, if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
