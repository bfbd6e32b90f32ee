//! Analytic and measured decoder cost of partial vs full decoding.

use std::time::Instant;

use moca::masking::{attention_cost, rounded_count};
use moca::numerics::{Tape, Tensor};
use moca::pipeline::{Moca, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn slots(n: usize, ratio: f64, decoded: f64) -> usize {
    1 + (n - rounded_count(n, ratio)) + rounded_count(n, decoded)
}

fn main() -> moca::Result<()> {
    for n in [64, 196] {
        let (full, part) = (slots(n, 0.55, 0.55), slots(n, 0.55, 0.2));
        println!(
            "N={n}: slots {full} → {part}, attention cost {} → {}",
            attention_cost(full),
            attention_cost(part)
        );
    }

    let model = Moca::<f32>::new(TrainConfig::default())?;
    let batch = model.cfg.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in [slots(64, 0.55, 0.55), slots(64, 0.55, 0.2)] {
        let z = Tensor::from_fn(vec![batch * s, model.cfg.vit.d_dec], |_| rng.gen_range(-1.0f32..1.0));
        let started = Instant::now();
        for _ in 0..3 {
            let tape = Tape::new();
            let h = model.heads.bind(&tape);
            let out = model.decoder.decode(&h, tape.leaf(z.clone()), s)?;
            tape.backward(out.mean())?;
        }
        println!("{s} slots: {:.1} ms per forward+backward", started.elapsed().as_secs_f64() * 1e3 / 3.0);
    }
    Ok(())
}
