mod common;

use common::{small_setup, steps, tiny_arch};
use rand::Rng;
use stvm::config::ExperimentConfig;
use stvm::data::{gen_shiftshapes, gen_shiftshapes_with, DomainSpec, GeometrySpec, ShapeInstance, ShapeKind};
use stvm::eval::{argmax_map, iou_report};
use stvm::experiment::{run_adaptation, RunOptions};
use stvm::metric::ProxyBank;
use stvm::segnet::{SegNet, TinySeg};
use stvm::trainer::{rng_stream, train_source, Flags, RunState, SourceConfig, TrainConfig};

#[test]
fn two_iterations_give_byte_identical_state() {
    let (net, source, bench, cfg) = small_setup();
    let run = || {
        let mut s = RunState::new(&net, &source, bench.target.len(), &cfg).unwrap();
        steps(&net, &mut s, &bench, &cfg, 2);
        s.to_bytes()
    };
    let a = run();
    assert_eq!(a, run());
    let restored = RunState::from_archive(&stvm::segnet::checkpoint::Archive::from_bytes(&a).unwrap()).unwrap();
    assert_eq!(restored.to_bytes(), a);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let (net, source, bench, cfg) = small_setup();
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let opts = RunOptions {
            eval_interval: 2,
            silhouette_pixels: 32,
            output_dir: Some(dir.path().join(name)),
            ..RunOptions::default()
        };
        run_adaptation(&net, &source, &bench, &cfg, &opts).unwrap();
        std::fs::read(dir.path().join(name).join("metrics.csv")).unwrap()
    };
    let a = read("a");
    assert_eq!(a, read("b"));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
}

#[test]
fn teacher_moves_only_at_ema_boundaries() {
    let (net, source, bench, cfg) = small_setup();
    let mut s = RunState::new(&net, &source, bench.target.len(), &cfg).unwrap();
    for _ in 0..6 {
        let before = s.teacher.as_ref().unwrap().params.clone();
        let student_before = s.student.clone();
        steps(&net, &mut s, &bench, &cfg, 1);
        let after = &s.teacher.as_ref().unwrap().params;
        assert_ne!(s.student, student_before);
        if s.iteration % 2 == 0 {
            assert_ne!(&before, after, "iteration {}", s.iteration);
        } else {
            assert_eq!(&before, after, "iteration {}", s.iteration);
        }
    }
}

#[test]
fn student_objective_leaves_metric_head_alone() {
    let (net, source, bench, cfg) = small_setup();
    let after_one = |c: &TrainConfig| {
        let mut s = RunState::new(&net, &source, bench.target.len(), c).unwrap();
        let m0 = s.metric.clone();
        steps(&net, &mut s, &bench, c, 1);
        assert_ne!(s.metric, m0);
        (s.metric, s.proxies)
    };
    let base = after_one(&cfg);
    let other_rates = TrainConfig {
        lr_feature: 5e-2,
        lr_classifier: 1e-1,
        ..cfg.clone()
    };
    let no_mixing = TrainConfig {
        flags: "ST,Aug,MT".parse().unwrap(),
        ..cfg.clone()
    };
    assert_eq!(base, after_one(&other_rates));
    assert_eq!(base, after_one(&no_mixing));
}

#[test]
fn metric_objective_leaves_student_alone_without_mgs() {
    let (net, source, bench, cfg) = small_setup();
    let cfg = TrainConfig {
        flags: "ST,Aug,MT".parse().unwrap(),
        ..cfg
    };
    let run = |c: &TrainConfig, proxy_seed: Option<u64>| {
        let mut s = RunState::new(&net, &source, bench.target.len(), c).unwrap();
        if let Some(seed) = proxy_seed {
            s.proxies = ProxyBank::init(net.num_classes(), net.arch().metric_dim, seed);
        }
        steps(&net, &mut s, &bench, c, 3);
        (s.student, s.teacher.unwrap().params)
    };
    let base = run(&cfg, None);
    let fast_metric = TrainConfig { lr_metric: 0.5, ..cfg.clone() };
    assert_eq!(base, run(&fast_metric, None));
    assert_eq!(base, run(&cfg, Some(99)));
}

#[test]
fn reliability_path_is_live_with_mgs() {
    let (net, source, bench, cfg) = small_setup();
    let cfg = TrainConfig {
        flags: "ST,Aug,MT,MGS".parse().unwrap(),
        ..cfg
    };
    let run = |seed: Option<u64>| {
        let mut s = RunState::new(&net, &source, bench.target.len(), &cfg).unwrap();
        if let Some(seed) = seed {
            s.proxies = ProxyBank::init(net.num_classes(), net.arch().metric_dim, seed);
        }
        steps(&net, &mut s, &bench, &cfg, 1);
        s.student
    };
    assert_ne!(run(None), run(Some(99)));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (net, source, bench, cfg) = small_setup();
    let dir = tempfile::tempdir().unwrap();
    let opts = |name: &str| RunOptions {
        eval_interval: 2,
        silhouette_pixels: 16,
        output_dir: Some(dir.path().join(name)),
        ..RunOptions::default()
    };
    let full = run_adaptation(&net, &source, &bench, &cfg, &opts("full")).unwrap();
    let first = RunOptions {
        stop_after: Some(3),
        ..opts("resumed")
    };
    let partial = run_adaptation(&net, &source, &bench, &cfg, &first).unwrap();
    assert_eq!(partial.state.as_ref().unwrap().iteration, 3);
    let second = RunOptions {
        resume: true,
        ..opts("resumed")
    };
    let resumed = run_adaptation(&net, &source, &bench, &cfg, &second).unwrap();
    assert_eq!(resumed.state.unwrap().to_bytes(), full.state.unwrap().to_bytes());
    let csv = |n: &str| std::fs::read_to_string(dir.path().join(n).join("metrics.csv")).unwrap();
    assert_eq!(csv("resumed"), csv("full"));
}

#[test]
fn flags_reject_invalid_ladders() {
    for bad in ["Aug", "ST,MGS", "ST,Aug,MT,MOCM", "ST,Bogus"] {
        assert!(bad.parse::<Flags>().is_err(), "{bad}");
    }
}

#[test]
fn zero_source_iterations_return_the_initialisation() {
    let net = TinySeg::new(tiny_arch(6)).unwrap();
    let ds = gen_shiftshapes(&DomainSpec::source(), 3, 32, 6, 4).unwrap();
    let cfg = SourceConfig {
        iterations: 0,
        ..SourceConfig::default()
    };
    let params = train_source(&net, &ds, &cfg, 11).unwrap();
    let init_seed: u64 = rng_stream(11, 0).gen();
    assert_eq!(params, net.init_network::<f32>(init_seed));
    let again = train_source(&net, &ds, &SourceConfig { iterations: 5, ..cfg }, 11).unwrap();
    assert_eq!(again, train_source(&net, &ds, &SourceConfig { iterations: 5, ..cfg }, 11).unwrap());
}

fn training_accuracy(spec: &DomainSpec) -> f64 {
    let net = TinySeg::new(ExperimentConfig::default().arch).unwrap();
    let ds = gen_shiftshapes(spec, 10, 64, 6, 21).unwrap();
    let cfg = SourceConfig {
        iterations: 500,
        lr_feature: 1e-2,
        lr_classifier: 1e-1,
        ..SourceConfig::default()
    };
    let params = train_source(&net, &ds, &cfg, 0).unwrap();
    let preds: Vec<_> = ds
        .items
        .iter()
        .map(|it| argmax_map(&net.forward(&params, it.image.view()).unwrap().logits))
        .collect();
    let gts: Vec<_> = ds.items.iter().map(|it| it.label.clone().unwrap()).collect();
    iou_report(&preds, &gts, 6).unwrap().pixel_accuracy()
}

#[test]
fn source_training_fits_ten_images() {
    let acc = training_accuracy(&DomainSpec::source());
    assert!(acc >= 0.95, "pixel accuracy {acc}");
}

#[test]
fn flat_domain_is_learned_almost_perfectly() {
    let acc = training_accuracy(&DomainSpec::flat());
    assert!(acc >= 0.99, "pixel accuracy {acc}");
}

/// Point-in-shape from vertex and half-plane geometry instead of the generator's formulas.
fn inside(sh: &ShapeInstance, y: f64, x: f64) -> bool {
    let (cy, cx, a) = (sh.center_y, sh.center_x, sh.half);
    let (dy, dx) = (y - cy, x - cx);
    let in_rect = |hy: f64, hx: f64| dy.abs().max(0.0) <= hy && dx.abs() <= hx;
    match sh.kind {
        ShapeKind::Circle => dy.hypot(dx) <= a,
        ShapeKind::Square => in_rect(0.8 * a, 0.8 * a),
        ShapeKind::Bar => in_rect(0.35 * a, a),
        ShapeKind::Triangle => {
            // apex (cy − a, cx), base corners (cy + a, cx ± a)
            let left = 2.0 * a * (x - cx) + a * (y - (cy - a)) >= 0.0;
            let right = -2.0 * a * (x - cx) + a * (y - (cy - a)) >= 0.0;
            left && right && y <= cy + a
        }
        ShapeKind::Diamond => dy.abs() + dx.abs() <= a,
        ShapeKind::Cross => in_rect(0.33 * a, a) || in_rect(a, 0.33 * a),
        ShapeKind::Ring => {
            let r = dy.hypot(dx);
            r <= a && r >= 0.55 * a
        }
    }
}

#[test]
fn labels_match_independent_rasterisation() {
    let g = gen_shiftshapes_with(&DomainSpec::target(), &GeometrySpec::default(), 100, 48, 6, 5).unwrap();
    for (item, layout) in g.dataset.items.iter().zip(&g.layouts) {
        let label = item.label.as_ref().unwrap();
        for ((y, x), &l) in label.indexed_iter() {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let want = layout.iter().filter(|s| inside(s, py, px)).map(|s| s.class).last().unwrap_or(0);
            assert_eq!(l, want, "pixel ({y}, {x})");
        }
    }
}
