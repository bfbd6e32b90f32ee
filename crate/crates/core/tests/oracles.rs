mod support;

use moca::codebook::Codebook;
use moca::eval::{fit_logreg, knn_classify, EmbeddingBank, Voting};
use moca::numerics::{softmax_t, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::{knn, newton_logreg, softmax_ce, ListQueue};

fn one_hot(d: usize, at: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[at] = scale;
    v
}

/// Drives a ring and the list model through `steps` random insertions and
/// compares them read oldest-first.
fn queue_case(k: usize, k_new: usize, steps: usize, rng: &mut ChaCha8Rng) {
    let d = 16;
    let init: Vec<Vec<f64>> = (0..k).map(|i| one_hot(d, i % d, 1.0)).collect();
    let mut ring = Codebook::from_entries(Tensor::from_rows(&init).unwrap(), k_new).unwrap();
    let mut list = ListQueue::new(init);
    for step in 1..=steps as u64 {
        let batch: Vec<Vec<f64>> = (0..k_new)
            .map(|_| one_hot(d, rng.gen_range(0..d), rng.gen_range(0.5..4.0)))
            .collect();
        let unit: Vec<Vec<f64>> = batch.iter().map(|v| v.iter().map(|&x| if x != 0.0 { 1.0 } else { 0.0 }).collect()).collect();
        ring.push(&Tensor::new(vec![k_new, d], batch.concat()).unwrap(), step).unwrap();
        list.insert(&unit, step);
    }
    let w = ring.write_ptr();
    for (j, (v, age)) in list.items.iter().enumerate() {
        let slot = (w + j) % k;
        assert_eq!(ring.entries().row(slot), v.as_slice(), "K={k} K_new={k_new} slot {slot}");
        assert_eq!(ring.ages()[slot], *age);
    }
}

#[test]
fn queue_matches_list_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    queue_case(8, 2, 5, &mut rng);
    queue_case(8, 0, 5, &mut rng);
    queue_case(4, 4, 3, &mut rng);
    for _ in 0..1000 {
        let k = rng.gen_range(1..24);
        let k_new = rng.gen_range(0..=k);
        let steps = rng.gen_range(0..20);
        queue_case(k, k_new, steps, &mut rng);
    }
}

#[test]
fn softmax_and_ce_match_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (r, c) = (rng.gen_range(1..6), rng.gen_range(2..9));
        let tau = rng.gen_range(0.1..2.0);
        let x: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let t: Vec<Vec<f64>> = (0..r)
            .map(|_| {
                let w: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            })
            .collect();
        let (p_ref, ce_ref) = softmax_ce(&x, &t, tau);
        let xt = Tensor::from_rows(&x).unwrap();
        let tt = Tensor::from_rows(&t).unwrap();
        let p = softmax_t(&xt, tau).unwrap();
        for (a, b) in p.data().iter().zip(p_ref.concat()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let tape = Tape::new();
        let ce = tape.leaf(xt).softmax_cross_entropy(&tt, tau).unwrap().value().item();
        assert!((ce - ce_ref).abs() <= 1e-6, "{ce} vs {ce_ref}");
    }
}

fn bank_of(rows: &[Vec<f64>], labels: &[u32]) -> EmbeddingBank {
    EmbeddingBank::new(Tensor::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
}

#[test]
fn knn_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..30 {
        let m = if case == 0 { 1000 } else { rng.gen_range(1..300) };
        let d = rng.gen_range(2..12);
        let classes = rng.gen_range(1..6);
        let mut rows: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        if m > 4 {
            rows[3] = rows[1].clone();
        }
        let labels: Vec<u32> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
        let queries: Vec<Vec<f64>> = (0..40).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let bank = bank_of(&rows, &labels);
        let qb = bank_of(&queries, &vec![0; queries.len()]);
        for k in [1, 20.min(m), m] {
            for (voting, weighted) in [(Voting::Weighted, true), (Voting::Majority, false)] {
                let got = knn_classify(&bank, &qb, k, voting).unwrap().predictions;
                assert_eq!(got, knn(&rows, &labels, &queries, k, weighted), "case {case} k {k}");
            }
        }
    }
}

#[test]
fn six_point_bank_case() {
    let rows = vec![
        vec![1.0, 0.1],
        vec![0.9, 0.3],
        vec![0.7, 0.7],
        vec![0.2, 1.0],
        vec![-0.1, 1.0],
        vec![0.4, 0.9],
    ];
    let labels = [0, 0, 0, 1, 1, 1];
    let queries = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.75, 0.7], vec![0.6, 0.8]];
    let expect = knn(&rows, &labels, &queries, 3, true);
    let got = knn_classify(&bank_of(&rows, &labels), &bank_of(&queries, &[0; 4]), 3, Voting::Weighted).unwrap();
    assert_eq!(got.predictions, expect);
}

#[test]
fn logreg_matches_newton_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let x: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let c = (i % 2) as f64 * 2.0 - 1.0;
                vec![c * 0.5 + rng.gen_range(-0.8..0.8), rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let y: Vec<u32> = (0..12).map(|i| (i % 2) as u32).collect();
        let l2 = 1e-2;
        let (w, b) = newton_logreg(&x, &y, 2, l2);
        let fit = fit_logreg(&x.concat(), &y, 2, 2, l2, 1e-6, 10_000);
        assert!(fit.grad_norm < 1e-6);
        for c in 0..2 {
            for j in 0..2 {
                assert!((fit.model.w[c * 2 + j] - w[c][j]).abs() < 1e-4);
            }
            assert!((fit.model.b[c] - b[c]).abs() < 1e-4);
        }
        let test: Vec<Vec<f64>> = (0..400)
            .map(|i| {
                let c = (i % 2) as f64 * 2.0 - 1.0;
                vec![c * 0.5 + rng.gen_range(-0.8..0.8), rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let truth: Vec<u32> = (0..400).map(|i| (i % 2) as u32).collect();
        let oracle_acc = test
            .iter()
            .zip(&truth)
            .filter(|(q, &t)| {
                let z: Vec<f64> = (0..2).map(|c| b[c] + w[c][0] * q[0] + w[c][1] * q[1]).collect();
                u32::from(z[1] > z[0]) == t
            })
            .count() as f64
            / 400.0;
        let acc = fit.model.accuracy(&test.concat(), &truth);
        assert!((acc - oracle_acc).abs() <= 1e-4, "{acc} vs {oracle_acc}");
    }
}
