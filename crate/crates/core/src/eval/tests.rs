use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;
use crate::pipeline::{synthetic, Moca, TrainConfig};

fn bank(rows: &[[f64; 2]], labels: &[u32]) -> EmbeddingBank {
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    EmbeddingBank::new(Tensor::new(vec![rows.len(), 2], data).unwrap(), labels.to_vec()).unwrap()
}

#[test]
fn exact_match_with_k1() {
    let b = bank(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]], &[2, 0, 1]);
    let q = bank(&[[0.0, 3.0]], &[0]);
    let r = knn_classify(&b, &q, 1, Voting::Weighted).unwrap();
    assert_eq!(r.predictions, vec![0]);
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn six_point_bank() {
    let b = bank(
        &[[1.0, 0.1], [0.9, 0.3], [0.7, 0.7], [0.2, 1.0], [-0.1, 1.0], [0.4, 0.9]],
        &[0, 0, 0, 1, 1, 1],
    );
    let q = bank(&[[1.0, 0.0], [0.0, 1.0], [0.75, 0.7], [0.6, 0.8]], &[0, 1, 0, 1]);
    for voting in [Voting::Majority, Voting::Weighted] {
        let r = knn_classify(&b, &q, 3, voting).unwrap();
        assert_eq!(r.predictions, vec![0, 1, 0, 1]);
        assert_eq!(r.accuracy, 1.0);
    }
}

#[test]
fn weighting_beats_count() {
    let b = bank(&[[1.0, 0.0], [0.5, 0.866], [0.5, 0.866]], &[0, 1, 1]);
    let q = bank(&[[1.0, 0.0]], &[0]);
    assert_eq!(knn_classify(&b, &q, 3, Voting::Weighted).unwrap().predictions, vec![0]);
    assert_eq!(knn_classify(&b, &q, 3, Voting::Majority).unwrap().predictions, vec![1]);
}

#[test]
fn knn_guards_and_ties() {
    let empty = EmbeddingBank::new(Tensor::zeros(vec![0, 2]), vec![]).unwrap();
    let q = bank(&[[1.0, 0.0]], &[0]);
    assert!(matches!(
        knn_classify(&empty, &q, 1, Voting::Weighted),
        Err(crate::MocaError::Contract(_))
    ));
    let b = bank(&[[1.0, 0.0], [1.0, 0.0]], &[1, 0]);
    assert_eq!(knn_classify(&b, &q, 2, Voting::Majority).unwrap().predictions, vec![0]);
    assert_eq!(knn_classify(&b, &q, 1, Voting::Majority).unwrap().predictions, vec![1]);
}

proptest! {
    #[test]
    fn positive_scaling_keeps_predictions(seed in 0u64..500, scale in 0.01f64..100.0) {
        let ds = synthetic(30, 3, 1, seed).unwrap();
        let raw = Tensor::new(vec![30, 3], ds.images.data().iter().map(|&v| v as f64 - 0.5).collect()).unwrap();
        let a = EmbeddingBank::new(raw.clone(), ds.labels.clone()).unwrap();
        let b = EmbeddingBank::new(raw.map(|v| v * scale), ds.labels.clone()).unwrap();
        let qa = a.subset(&[0, 5, 9]).unwrap();
        let ra = knn_classify(&a, &qa, 5, Voting::Weighted).unwrap();
        let rb = knn_classify(&b, &qa, 5, Voting::Weighted).unwrap();
        prop_assert_eq!(ra.predictions, rb.predictions);
    }
}

#[test]
fn bank_bytes_roundtrip() {
    let b = bank(&[[0.5, -2.0], [1.25, 3.0]], &[0, 7]);
    let back = EmbeddingBank::from_bytes(&b.to_bytes()).unwrap();
    assert_eq!(back, b);
    assert!(matches!(
        EmbeddingBank::from_bytes(&b.to_bytes()[..10]),
        Err(crate::MocaError::Format { .. })
    ));
}

#[test]
fn extraction_uses_teacher_and_is_deterministic() {
    let cfg = TrainConfig::micro();
    let mut model = Moca::<f32>::new(cfg).unwrap();
    let mut ds = synthetic(5, 2, 4, 3).unwrap();
    let n = 4 * 4 * 3;
    let px = ds.images.data()[..n].to_vec();
    ds.images.data_mut()[n..2 * n].copy_from_slice(&px);
    let a = extract_embeddings(&model, &ds).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a.raw.row(0), a.raw.row(1));
    for e in model.student.entries_mut() {
        e.value = e.value.map(|_| 0.0);
    }
    assert_eq!(extract_embeddings(&model, &ds).unwrap(), a);
    for e in model.teacher.entries_mut() {
        e.value = e.value.map(|v| v * 0.5);
    }
    assert_ne!(extract_embeddings(&model, &ds).unwrap(), a);
}

#[test]
fn probe_separable_and_degenerate() {
    let rows: Vec<[f64; 2]> = (0..40).map(|i| [if i % 2 == 0 { 1.0 } else { -1.0 }, i as f64 * 0.01]).collect();
    let labels: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
    let b = bank(&rows, &labels);
    let r = linear_probe(&b, &b, &ProbeConfig { epochs: 20, batch_size: 8, ..Default::default() }).unwrap();
    assert_eq!(r.train_accuracy, 1.0);

    let flat = bank(&[[1.0, 1.0]; 10], &[0, 0, 0, 0, 0, 0, 0, 1, 1, 1]);
    let r = linear_probe(&flat, &flat, &ProbeConfig { epochs: 20, batch_size: 4, ..Default::default() }).unwrap();
    assert!((r.accuracy - 0.7).abs() < 1e-12);
}

#[test]
fn lowshot_sampling_and_fit() {
    let rows: Vec<[f64; 2]> = (0..30).map(|i| [(i % 3) as f64, 1.0 + (i % 3 == 1) as u8 as f64]).collect();
    let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
    let b = bank(&rows, &labels);
    let picked = sample_shots(&b.labels, 3, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(picked.len(), 6);
    assert_eq!(picked.iter().map(|&i| b.labels[i]).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);

    let cfg = LowShotConfig {
        shots: 2,
        ..Default::default()
    };
    let r = lowshot_logreg(&b, &b, &cfg).unwrap();
    assert_eq!(r.accuracies.len(), 3);
    assert_eq!(r.mean, 1.0);
    assert_eq!(r.std, 0.0);

    let short = bank(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], &[0, 0, 2]);
    assert!(matches!(
        lowshot_logreg(&short, &short, &LowShotConfig::default()),
        Err(crate::MocaError::Sampling(_))
    ));
}

#[test]
fn logreg_converges_on_strongly_convex_problem() {
    let x = [1.0, 0.2, -0.5, 1.0, 0.3, -1.0, -1.0, 0.4];
    let y = [0, 1, 0, 1];
    let fit = fit_logreg(&x, &y, 2, 2, 1e-1, 1e-6, 10_000);
    assert!(fit.grad_norm < 1e-6, "{fit:?}");
    assert!(fit.iterations < 10_000);
}
