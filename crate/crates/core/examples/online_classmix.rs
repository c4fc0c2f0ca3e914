//! Runs a short adaptation, then renders one mix from the patch buffers it filled.
//!
//! Writes `classmix.png`: input, mixed image and mixed labels side by side.
//! `cargo run --release --example online_classmix -- [key=value ...]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stvm::config::ExperimentConfig;
use stvm::experiment::{build_benchmark, run_adaptation, source_model, RunOptions};
use stvm::mocm::{sample_mix, write_triptych};
use stvm::segnet::SegNet;
use stvm::teacher::pseudo_labels;

fn main() -> stvm::error::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ExperimentConfig::resolve(None, &overrides)?;
    let bench = build_benchmark(&cfg.data)?;
    let (net, source) = source_model(&cfg, &bench, None)?;
    let opts = RunOptions {
        silhouette_pixels: 0,
        ..RunOptions::from_config(&cfg)
    };
    let outcome = run_adaptation(&net, &source, &bench, &cfg.train, &opts)?;
    let state = outcome.state.expect("adaptation flags are on");
    let buffers = &state.buffers;
    println!("patch buffers after {} iterations (tau {}):", state.iteration, cfg.train.tau_mocm);
    for c in 0..buffers.num_classes() {
        let q = buffers.queue(c);
        let mean_d = q.iter().map(|p| p.mean_distance).sum::<f64>() / q.len().max(1) as f64;
        println!("  class {c}: {:3} stored, mean distance {mean_d:.3}", q.len());
    }

    let frame = &bench.target.items[0].image;
    let out = net.forward(state.teacher_params(), frame.view())?;
    let (labels, _) = pseudo_labels(&out.logits)?;
    let ones = labels.classes.mapv(|_| 1.0f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mixed = sample_mix(frame, &labels.classes, &ones, buffers, cfg.train.n_mocm.max(3), &mut rng)?;
    println!("pasted classes {:?}", mixed.pasted);
    write_triptych("classmix.png".as_ref(), frame, &mixed)?;
    println!("wrote classmix.png");
    Ok(())
}
