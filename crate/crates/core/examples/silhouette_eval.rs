//! Silhouette score of Gaussian clusters under cosine distance as their separation grows.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stvm::eval::silhouette;

fn main() -> stvm::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (classes, per_class, dim) = (4, 100, 8);
    let labels: Vec<usize> = (0..classes * per_class).map(|i| i / per_class).collect();
    println!("separation  overall  per class");
    for separation in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let points = Array2::from_shape_fn((labels.len(), dim), |(i, c)| {
            let centre = if c == labels[i] { separation } else { 0.0 };
            centre + rng.sample::<f64, _>(StandardNormal)
        });
        let report = silhouette(points.view(), &labels)?;
        let per: Vec<String> = report.per_class.values().map(|v| format!("{v:6.2}")).collect();
        println!("{separation:10.1}  {:7.2}  {}", report.overall, per.join(" "));
    }
    Ok(())
}
