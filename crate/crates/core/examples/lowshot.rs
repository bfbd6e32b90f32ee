//! Low-shot logistic regression with 1, 2 and 5 shots per class.

use moca::eval::{lowshot_logreg, EmbeddingBank, LowShotConfig};
use moca::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> moca::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (classes, dim) = (4, 8);
    let centres: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut make = |n: usize| {
        let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
        let data = labels
            .iter()
            .flat_map(|&l| centres[l as usize].iter().map(|c| c + rng.gen_range(-0.9..0.9)).collect::<Vec<_>>())
            .collect();
        EmbeddingBank::new(Tensor::new(vec![n, dim], data).unwrap(), labels).unwrap()
    };
    let train = make(400);
    let test = make(200);
    for shots in [1, 2, 5] {
        let r = lowshot_logreg(
            &train,
            &test,
            &LowShotConfig {
                shots,
                ..Default::default()
            },
        )?;
        println!(
            "{shots} shot(s): {:.1} ± {:.1}% (l2 {}, splits {:?})",
            100.0 * r.mean,
            100.0 * r.std,
            r.l2,
            r.accuracies.iter().map(|a| format!("{:.1}", 100.0 * a)).collect::<Vec<_>>()
        );
    }
    Ok(())
}
