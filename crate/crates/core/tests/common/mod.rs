//! Shared oracles for integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{HashSet, VecDeque};
use stvm::config::ExperimentConfig;
use stvm::experiment::{build_benchmark, Benchmark};
use stvm::metric::{nca_loss, select_metric_pseudo_labels, ProxyBank, Sample, SampleSet, ThresholdState};
use stvm::mocm::{sample_mix, PatchBuffers, PatchRecord};
use stvm::segnet::{ArchConfig, ConvBlock, NetworkParams, SegNet, TinySeg};
use stvm::teacher::{EmaConfig, PseudoLabelMap};
use stvm::trainer::{adapt_step, next_batch, train_source, weighted_ce_loss, RunState, SourceConfig, TrainConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;

pub fn tiny_arch(num_classes: usize) -> ArchConfig {
    ArchConfig {
        num_classes,
        metric_dim: 5,
        head_hidden: 6,
        blocks: vec![
            ConvBlock { channels: 4, stride: 2 },
            ConvBlock { channels: 6, stride: 1 },
            ConvBlock { channels: 8, stride: 2 },
        ],
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Array3<f64> {
    Array3::from_shape_fn((size, size, 3), |_| rng.gen::<f64>())
}

/// Relative error with the usual small floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst relative error over `coords` randomly chosen scalars of `params`.
pub fn check_params(
    params: &NetworkParams<f64>,
    grads: &NetworkParams<f64>,
    coords: usize,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&NetworkParams<f64>) -> f64,
) -> f64 {
    let flat = grads.flat();
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.gen_range(0..flat.len());
        let mut plus = params.clone();
        *plus.scalar_mut(i) += STEP;
        let mut minus = params.clone();
        *minus.scalar_mut(i) -= STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        worst = worst.max(rel_err(flat[i], numeric));
    }
    worst
}

/// Worst relative errors for the segmentation forward pass, one entry per instance.
pub fn forward_gradient_errors(instances: usize) -> Vec<f64> {
    (0..instances)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let net = TinySeg::new(tiny_arch(3)).unwrap();
            let params = net.init_network::<f64>(k as u64);
            let img = random_image(&mut rng, 8);
            let out = net.forward(&params, img.view()).unwrap();
            let probe = Array2::from_shape_fn(out.logits.matrix().raw_dim(), |_| rng.gen_range(-1.0..1.0));
            let d = stvm::map::SpatialMap::from_matrix(8, 8, probe.clone()).unwrap();
            let grads = net.backward(&params, &out.tape, &d).unwrap();
            check_params(&params, &grads, 12, &mut rng, |p| {
                let o = net.forward(p, img.view()).unwrap();
                (o.logits.matrix() * &probe).sum()
            })
        })
        .collect()
}

/// Weighted cross-entropy through the full network, w.r.t. student parameters.
pub fn ce_gradient_errors(instances: usize) -> Vec<f64> {
    (0..instances)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + k as u64);
            let net = TinySeg::new(tiny_arch(4)).unwrap();
            let params = net.init_network::<f64>(50 + k as u64);
            let img = random_image(&mut rng, 8);
            let labels = Array2::from_shape_fn((8, 8), |_| {
                if rng.gen_bool(0.1) {
                    255u8
                } else {
                    rng.gen_range(0..4u8)
                }
            });
            let weights = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.01f32..1.0));
            let loss = |p: &NetworkParams<f64>| {
                let o = net.forward(p, img.view()).unwrap();
                weighted_ce_loss(&o.logits, &labels, &weights).unwrap().0
            };
            let out = net.forward(&params, img.view()).unwrap();
            let (_, d) = weighted_ce_loss(&out.logits, &labels, &weights).unwrap();
            let grads = net.backward(&params, &out.tape, &d).unwrap();
            check_params(&params, &grads, 12, &mut rng, loss)
        })
        .collect()
}

fn nca_fixture(k: usize) -> (TinySeg, NetworkParams<f64>, stvm::segnet::FeatureMap<f64>, ProxyBank<f64>, SampleSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + k as u64);
    let net = TinySeg::new(tiny_arch(3)).unwrap();
    let params = net.init_network::<f64>(k as u64);
    let metric = net.init_metric_head::<f64>(100 + k as u64);
    let img = random_image(&mut rng, 8);
    let features = net.forward(&params, img.view()).unwrap().features;
    let proxies = ProxyBank::<f64>::init(3, 5, 200 + k as u64);
    let mut samples = Vec::new();
    for _ in 0..6 {
        samples.push(Sample {
            y: rng.gen_range(0..8),
            x: rng.gen_range(0..8),
            class: rng.gen_range(0..3u8),
        });
    }
    (net, metric, features, proxies, SampleSet { samples })
}

/// NCA loss through the metric head, w.r.t. metric-head parameters.
pub fn nca_metric_gradient_errors(instances: usize) -> Vec<f64> {
    (0..instances)
        .map(|k| {
            let (net, metric, features, proxies, samples) = nca_fixture(k);
            let t = 0.25;
            let (emb, tape) = net.forward_metric(&metric, &features, (8, 8)).unwrap();
            let out = nca_loss(&emb, &samples, &proxies, t).unwrap();
            let grads = net.backward_metric(&metric, &tape, &out.d_features).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + k as u64);
            check_params(&metric, &grads, 12, &mut rng, |m| {
                let (e, _) = net.forward_metric(m, &features, (8, 8)).unwrap();
                nca_loss(&e, &samples, &proxies, t).unwrap().loss
            })
        })
        .collect()
}

/// NCA loss w.r.t. the proxy vectors.
pub fn nca_proxy_gradient_errors(instances: usize) -> Vec<f64> {
    (0..instances)
        .map(|k| {
            let (net, metric, features, proxies, samples) = nca_fixture(k);
            let t = 0.25;
            let (emb, _) = net.forward_metric(&metric, &features, (8, 8)).unwrap();
            let out = nca_loss(&emb, &samples, &proxies, t).unwrap();
            let mut worst = 0.0f64;
            for c in 0..proxies.num_classes() {
                for j in 0..proxies.dim() {
                    let mut plus = proxies.clone();
                    plus.proxies[[c, j]] += STEP;
                    let mut minus = proxies.clone();
                    minus.proxies[[c, j]] -= STEP;
                    let numeric = (nca_loss(&emb, &samples, &plus, t).unwrap().loss
                        - nca_loss(&emb, &samples, &minus, t).unwrap().loss)
                        / (2.0 * STEP);
                    worst = worst.max(rel_err(out.d_proxies[[c, j]], numeric));
                }
            }
            worst
        })
        .collect()
}

// ---- brute-force oracles ----

/// Pixel `p` of class `c` is kept iff at least `floor((1−q)(n_c−1)) + 1` pixels of
/// class `c` have strictly lower confidence.
pub fn threshold_oracle(conf: &Array2<f64>, labels: &Array2<u8>, num_classes: usize, q: f64) -> Array2<u8> {
    let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    for (&c, &p) in labels.iter().zip(conf.iter()) {
        by_class[c as usize].push(p);
    }
    Array2::from_shape_fn(labels.dim(), |(y, x)| {
        let c = labels[[y, x]] as usize;
        let p = conf[[y, x]];
        let n = by_class[c].len();
        let rank = ((1.0 - q) * (n - 1) as f64 + 1e-9).floor() as usize;
        let below = by_class[c].iter().filter(|&&v| v < p).count();
        if below > rank {
            c as u8
        } else {
            255
        }
    })
}

/// Random frame with confidences on a coarse grid so that ties occur.
pub fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, num_classes: usize) -> (Array2<f64>, Array2<u8>) {
    let conf = Array2::from_shape_fn((h, w), |_| {
        let v: f64 = rng.gen_range(0..20) as f64 / 20.0;
        1.0 / num_classes as f64 + (1.0 - 1.0 / num_classes as f64) * v
    });
    let labels = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..num_classes as u8));
    (conf, labels)
}

/// Selection from a fresh state after one frame, compared with the oracle.
/// Returns (exact match, max over classes of selected fraction − (q + 1/n_c)).
pub fn threshold_check(rng: &mut ChaCha8Rng, q: f64) -> (bool, f64) {
    let nc = 4;
    let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
    let (conf, labels) = random_frame(rng, h, w, nc);
    let mut state = ThresholdState::new(nc, 0.99, q).unwrap();
    let plm = PseudoLabelMap::new(labels.clone(), nc);
    state.update(&conf, &plm).unwrap();
    let got = select_metric_pseudo_labels(&conf, &plm, &state).selected;
    let want = threshold_oracle(&conf, &labels, nc, q);
    let mut excess = f64::NEG_INFINITY;
    for c in 0..nc as u8 {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n == 0 {
            continue;
        }
        let k = got.iter().filter(|&&l| l == c).count();
        excess = excess.max(k as f64 / n as f64 - (q + 1.0 / n as f64));
    }
    (got == want, excess)
}

pub fn tagged_patch(class: u8, tag: f64) -> PatchRecord {
    PatchRecord {
        image: Array3::zeros((1, 1, 3)),
        labels: Array2::from_elem((1, 1), class),
        reliability: Array2::ones((1, 1)),
        mask: Array2::from_elem((1, 1), true),
        class,
        origin: (0, 0),
        mean_distance: tag,
    }
}

/// Replays a random admit trace against a plain FIFO model. Distances sit on a grid that
/// contains `tau` itself so that the strict boundary is exercised.
pub fn fifo_trace_matches(seed: u64, events: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nc, cap, tau) = (5usize, 7usize, 0.8);
    let mut buffers = PatchBuffers::new(nc, cap).unwrap();
    let mut model: Vec<VecDeque<u64>> = vec![VecDeque::new(); nc];
    for event in 0..events as u64 {
        let class = rng.gen_range(0..nc);
        let d = rng.gen_range(0..=20) as f64 * 0.08;
        // the event id rides in the low digits so that identity survives the round trip
        let tag = d + event as f64 * 1e-12;
        let d_admit = if rng.gen_bool(0.05) { tau } else { tag };
        let admitted = buffers.admit(tagged_patch(class as u8, d_admit), tau);
        let expect = d_admit < tau;
        if admitted != expect {
            return false;
        }
        if expect {
            model[class].push_back(d_admit.to_bits());
            if model[class].len() > cap {
                model[class].pop_front();
            }
        }
        for c in 0..nc {
            let got: Vec<u64> = buffers.queue(c).iter().map(|p| p.mean_distance.to_bits()).collect();
            if got != model[c].iter().copied().collect::<Vec<_>>() {
                return false;
            }
        }
    }
    true
}

/// Buffers holding one square patch per class with values that differ from any base pixel.
pub fn distinct_patch_buffers(rng: &mut ChaCha8Rng, nc: usize, size: usize) -> PatchBuffers {
    let mut buffers = PatchBuffers::new(nc, 3).unwrap();
    for c in 1..nc as u8 {
        let (ph, pw) = (rng.gen_range(1..size / 2), rng.gen_range(1..size / 2));
        let origin = (rng.gen_range(0..size), rng.gen_range(0..size));
        let mask = Array2::from_shape_fn((ph, pw), |_| rng.gen_bool(0.7));
        buffers.admit(
            PatchRecord {
                image: Array3::from_shape_fn((ph, pw, 3), |_| rng.gen_range(0.6f32..1.0)),
                labels: Array2::from_elem((ph, pw), c),
                reliability: Array2::from_shape_fn((ph, pw), |_| rng.gen_range(0.6f32..0.99)),
                mask,
                class: c,
                origin,
                mean_distance: 0.1,
            },
            0.8,
        );
    }
    buffers
}

/// The image, label and reliability maps change on exactly the union of the pasted masks.
pub fn mixing_integrity(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nc, size) = (5, 24);
    let buffers = distinct_patch_buffers(&mut rng, nc, size);
    let image = Array3::from_shape_fn((size, size, 3), |_| rng.gen_range(0.0f32..0.5));
    let labels = Array2::<u8>::zeros((size, size));
    let rel = Array2::from_elem((size, size), 0.25f32);
    let n = rng.gen_range(0..6);
    let mut mix_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mixed = sample_mix(&image, &labels, &rel, &buffers, n, &mut mix_rng).unwrap();
    let mut expected = HashSet::new();
    for &c in &mixed.pasted {
        let p = &buffers.queue(c as usize)[0];
        for ((py, px), &m) in p.mask.indexed_iter() {
            let (y, x) = (p.origin.0 + py, p.origin.1 + px);
            if m && y < size && x < size {
                expected.insert((y, x));
            }
        }
    }
    let changed = |f: &dyn Fn(usize, usize) -> bool| -> HashSet<(usize, usize)> {
        (0..size).flat_map(|y| (0..size).map(move |x| (y, x))).filter(|&(y, x)| f(y, x)).collect()
    };
    let img_changed = changed(&|y, x| (0..3).any(|c| mixed.image[[y, x, c]] != image[[y, x, c]]));
    let lab_changed = changed(&|y, x| mixed.labels[[y, x]] != labels[[y, x]]);
    let rel_changed = changed(&|y, x| mixed.reliability[[y, x]] != rel[[y, x]]);
    let mut again_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let again = sample_mix(&image, &labels, &rel, &buffers, n, &mut again_rng).unwrap();
    let empty = PatchBuffers::new(nc, 3).unwrap();
    let identity = sample_mix(&image, &labels, &rel, &empty, n, &mut rng).unwrap();
    img_changed == expected
        && lab_changed == expected
        && rel_changed == expected
        && again == mixed
        && identity.image == image
        && identity.labels == labels
        && identity.reliability == rel
}

/// Per-class IoU straight from the definition, one class at a time.
pub fn iou_brute_force(preds: &[Array2<u8>], gts: &[Array2<u8>], num_classes: usize) -> Vec<Option<f64>> {
    (0..num_classes as u8)
        .map(|c| {
            let (mut inter, mut union) = (0u64, 0u64);
            for (p, g) in preds.iter().zip(gts) {
                for (&pv, &gv) in p.iter().zip(g.iter()) {
                    if gv == 255 {
                        continue;
                    }
                    if pv == c && gv == c {
                        inter += 1;
                    }
                    if pv == c || gv == c {
                        union += 1;
                    }
                }
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

/// Mean silhouette (×100) straight from the definition with the normalised squared distance.
pub fn silhouette_brute_force(points: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = points.nrows();
    let d = |i: usize, j: usize| {
        let (a, b) = (points.row(i), points.row(j));
        let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
        a.iter().zip(b.iter()).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>()
    };
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| d(i, j)).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for &c in &classes {
            if c == labels[i] {
                continue;
            }
            let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            b = b.min(other.iter().map(|&j| d(i, j)).sum::<f64>() / other.len() as f64);
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    100.0 * total / n as f64
}

// ---- small adaptation setup ----

/// 32×32 benchmark, a briefly trained tiny source model and a six-iteration schedule.
pub fn small_setup() -> (TinySeg, NetworkParams<f32>, Benchmark, TrainConfig) {
    let cfg = ExperimentConfig::resolve(
        None,
        &[
            "data.size=32".into(),
            "data.n_source=12".into(),
            "data.n_target=8".into(),
            "data.n_eval=4".into(),
        ],
    )
    .unwrap();
    let bench = build_benchmark(&cfg.data).unwrap();
    let net = TinySeg::new(tiny_arch(cfg.data.num_classes)).unwrap();
    let source = train_source(
        &net,
        &bench.source,
        &SourceConfig {
            iterations: 30,
            lr_feature: 1e-2,
            lr_classifier: 1e-1,
            ..SourceConfig::default()
        },
        1,
    )
    .unwrap();
    let train = TrainConfig {
        iterations: 6,
        batch_size: 2,
        samples_per_class: 16,
        min_patch_area: 4,
        lr_feature: 1e-3,
        lr_classifier: 1e-2,
        ema: EmaConfig {
            smoothing: 0.1,
            update_period: 2,
        },
        metric_quantile: 0.5,
        tau_mocm: 2.0,
        ..cfg.train
    };
    (net, source, bench, train)
}

pub fn steps(net: &TinySeg, state: &mut RunState, bench: &Benchmark, cfg: &TrainConfig, n: usize) {
    for _ in 0..n {
        let batch = next_batch(net, state, &bench.target, cfg);
        adapt_step(net, state, &batch, cfg).unwrap();
    }
}

