//! CIFAR-10 binary records and the MIMG container, plus two augmented views.

use moca::pipeline::augment::{augment_two_views, AugmentConfig};
use moca::pipeline::data::parse_cifar10;
use moca::pipeline::{read_mimg, synthetic, write_mimg};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> moca::Result<()> {
    let mut record = vec![3u8];
    record.extend((0..3072).map(|i| (i % 256) as u8));
    let cifar = parse_cifar10(&record)?;
    println!("CIFAR record: label {}, dims {:?}", cifar.labels[0], cifar.dims());

    let ds = synthetic(6, 3, 32, 0)?;
    let path = std::env::temp_dir().join("moca_example.mimg");
    write_mimg(&path, &ds)?;
    let back = read_mimg(&path)?;
    println!("MIMG: {} images {:?}, labels {:?}", back.len(), back.dims(), back.labels);

    let (a, b) = augment_two_views(ds.image(0), 32, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    println!("views: mean {:.3} and {:.3}", mean(&a), mean(&b));
    Ok(())
}
