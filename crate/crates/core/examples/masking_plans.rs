//! Two masking rounds with partial decoding on a 14×14 grid.

use moca::masking::{sample_plans, RoundSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> moca::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 196;
    for (round, ratio) in [(1u8, 0.55), (2, 0.75)] {
        let spec = RoundSpec {
            ratio,
            dec_fraction: Some(0.2),
        };
        let plan = &sample_plans(1, n, spec, round, &mut rng)?[0];
        plan.check()?;
        println!(
            "round {round}: |u| {}, |m| {}, |m_dec| {}, decoder slots {} (full decoding {})",
            plan.u.len(),
            plan.m.len(),
            plan.m_dec.len(),
            plan.decoder_slots(),
            1 + plan.u.len() + plan.m.len()
        );
        println!("  first visible {:?}", &plan.u[..8]);
        println!("  first decoded {:?}", &plan.m_dec[..8]);
    }
    Ok(())
}
