//! Fits a k-means codebook on clustered points and quantizes them.
//!
//! cargo run --example kmeans_codebook

use mvfuse::datagen::{kmeans_fit_traced, quantize};
use mvfuse::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvfuse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let centers = Tensor::randn(&[4, 2], 4.0, &mut rng);
    let mut rows = Vec::new();
    for i in 0..200 {
        let jitter = Tensor::randn(&[1, 2], 0.3, &mut rng);
        rows.extend(
            centers
                .row(i % 4)
                .iter()
                .zip(jitter.data())
                .map(|(c, j)| c + j),
        );
    }
    let points = Tensor::new(vec![200, 2], rows)?;

    let (codebook, history) = kmeans_fit_traced(&points, 4, 50, 0)?;
    for (i, d) in history.iter().enumerate() {
        println!("iteration {i:>2}: distortion {d:.5}");
    }
    for k in 0..codebook.k() {
        println!("centroid {k}: {:.3?}", codebook.centroid(k));
    }
    let (ids, quantized) = quantize(&points, &codebook)?;
    let err: f64 = points
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / 200.0;
    println!(
        "first ids {:?}, mean squared quantization error {err:.5}",
        &ids[..8]
    );
    Ok(())
}
