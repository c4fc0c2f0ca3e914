//! Central-difference check of the network's backward pass in double precision.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stvm::map::SpatialMap;
use stvm::segnet::{ArchConfig, ConvBlock, NetworkParams, SegNet, TinySeg};

const STEP: f64 = 1e-5;

fn main() -> stvm::error::Result<()> {
    let net = TinySeg::new(ArchConfig {
        num_classes: 3,
        metric_dim: 4,
        head_hidden: 6,
        blocks: vec![ConvBlock { channels: 4, stride: 2 }, ConvBlock { channels: 8, stride: 1 }],
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = net.init_network::<f64>(0);
    let image = Array3::from_shape_fn((8, 8, 3), |_| rng.gen::<f64>());
    let out = net.forward(&params, image.view())?;
    // loss = <probe, logits>, so d loss / d logits = probe
    let probe = Array2::from_shape_fn(out.logits.matrix().raw_dim(), |_| rng.gen_range(-1.0..1.0));
    let grads = net.backward(&params, &out.tape, &SpatialMap::from_matrix(8, 8, probe.clone())?)?;
    let loss = |p: &NetworkParams<f64>| -> f64 { (net.forward(p, image.view()).unwrap().logits.matrix() * &probe).sum() };
    let flat = grads.flat();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.gen_range(0..flat.len());
        let (mut plus, mut minus) = (params.clone(), params.clone());
        *plus.scalar_mut(i) += STEP;
        *minus.scalar_mut(i) -= STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        let err = (flat[i] - numeric).abs() / flat[i].abs().max(numeric.abs()).max(1e-8);
        println!("param {i:4}: analytic {:+.8e} numeric {numeric:+.8e} rel err {err:.1e}", flat[i]);
        worst = worst.max(err);
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
