//! Pseudo-labels, metric distances and reliability weights on one target image.
//!
//! Shows the reliability curve, then the per-class distance and weight of a
//! freshly initialised metric head over the source model's pseudo-labels.

use stvm::config::ExperimentConfig;
use stvm::experiment::{build_benchmark, source_model};
use stvm::metric::{distance_map, reliability_from_distances, reliability_weight, ProxyBank};
use stvm::segnet::SegNet;
use stvm::teacher::pseudo_labels;

fn main() -> stvm::error::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ExperimentConfig::resolve(None, &overrides)?;
    let (alpha, beta) = (cfg.train.alpha, cfg.train.beta);
    println!("reliability w(d) with alpha {alpha}, beta {beta}");
    for d in [0.0, 0.25, 0.5, beta, 1.0, 2.0, 4.0] {
        println!("  d = {d:4.2}  w = {:.6}", reliability_weight(d, alpha, beta));
    }

    let bench = build_benchmark(&cfg.data)?;
    let (net, params) = source_model(&cfg, &bench, None)?;
    let metric = net.init_metric_head::<f32>(cfg.train.seed);
    let proxies = ProxyBank::<f32>::init(net.num_classes(), net.arch().metric_dim, cfg.train.seed);
    let image = &bench.target.items[0].image;
    let out = net.forward(&params, image.view())?;
    let (labels, confidence) = pseudo_labels(&out.logits)?;
    let (embeddings, _) = net.forward_metric(&metric, &out.features, labels.classes.dim())?;
    let distances = distance_map(&embeddings, &labels, &proxies)?;
    let weights = reliability_from_distances(&distances, alpha, beta);

    println!("class  pixels  mean confidence  mean distance  mean weight");
    for c in 0..net.num_classes() {
        let idx: Vec<usize> = labels.classes.iter().enumerate().filter(|&(_, &l)| l as usize == c).map(|(i, _)| i).collect();
        if idx.is_empty() {
            continue;
        }
        let mean = |v: &dyn Fn(usize) -> f64| idx.iter().map(|&i| v(i)).sum::<f64>() / idx.len() as f64;
        let w = labels.classes.dim().1;
        println!(
            "{c:5}  {:6}  {:15.3}  {:13.3}  {:11.3}",
            idx.len(),
            mean(&|i| confidence[[i / w, i % w]] as f64),
            mean(&|i| distances[[i / w, i % w]]),
            mean(&|i| weights[[i / w, i % w]] as f64),
        );
    }
    Ok(())
}
