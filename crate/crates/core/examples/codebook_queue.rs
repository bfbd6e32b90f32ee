//! The codebook ring: enqueue teacher tokens, watch ages, derive τ_T and
//! bag-of-words targets.

use moca::codebook::{AssignmentBatch, Codebook, TemperatureState};
use moca::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> moca::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (k, d, k_new, n, batch) = (8, 4, 2, 16, 3);
    let mut book = Codebook::<f32>::random(k, d, k_new, &mut rng)?;
    let mut temp = TemperatureState::default();

    for step in 1..=6 {
        let tokens = Tensor::from_fn(vec![batch * n, d], |_| rng.gen_range(-1.0f32..1.0));
        let sims = book.similarities(&tokens)?;
        let tau = temp.update(&sims, n)?;
        let targets = AssignmentBatch::compute(&sims, temp.tau(), (4, 4), 1)?;
        let ins = book.enqueue(&[&tokens], n, step, &mut rng)?;
        let picks: Vec<String> = ins.iter().map(|i| format!("img{}/p{}→{}", i.image, i.patch, i.slot)).collect();
        println!(
            "step {step}: tau_T {tau:.3}, y[0] max {:.3}, inserted {}",
            targets.y.row(0).iter().cloned().fold(0.0, f32::max),
            picks.join(" ")
        );
    }
    println!("ages {:?}, write_ptr {}", book.ages(), book.write_ptr());
    Ok(())
}
