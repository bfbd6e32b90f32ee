//! Weighted and majority k-NN on an embedding bank, plus a linear probe.

use moca::eval::{knn_classify, linear_probe, EmbeddingBank, ProbeConfig, Voting};
use moca::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(n: usize, classes: usize, dim: usize, seed: u64) -> moca::Result<EmbeddingBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centre = ChaCha8Rng::seed_from_u64(42);
    let centres: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| centre.gen_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    let data = labels
        .iter()
        .flat_map(|&l| centres[l as usize].iter().map(|c| c + rng.gen_range(-1.5..1.5)).collect::<Vec<_>>())
        .collect();
    EmbeddingBank::new(Tensor::new(vec![n, dim], data)?, labels)
}

fn main() -> moca::Result<()> {
    let train = blobs(600, 5, 16, 0)?;
    let test = blobs(200, 5, 16, 1)?;
    for k in [1, 5, 20] {
        let w = knn_classify(&train, &test, k, Voting::Weighted)?.accuracy;
        let m = knn_classify(&train, &test, k, Voting::Majority)?.accuracy;
        println!("k={k:>2}: weighted {:.1}%, majority {:.1}%", 100.0 * w, 100.0 * m);
    }
    let probe = linear_probe(&train, &test, &ProbeConfig::default())?;
    println!("linear probe: train {:.1}%, test {:.1}%", 100.0 * probe.train_accuracy, 100.0 * probe.accuracy);
    Ok(())
}
