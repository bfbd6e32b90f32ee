use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::MocaError;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn identity_matmul_is_noop() {
    let tape = Tape::new();
    let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.leaf(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = eye.matmul(x).unwrap();
    assert_eq!(y.value().data(), x.value().data());
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![2, 3]));
    match a.matmul(b) {
        Err(MocaError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn l2_normalize_three_four() {
    let tape = Tape::new();
    let y = tape.leaf(t64(&[2], &[3.0, 4.0])).l2_normalize();
    close(y.value().data(), &[0.6, 0.8], 1e-12);
}

#[test]
fn l2_normalize_zero_vector_stays_finite() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros(vec![1, 3]));
    let y = x.l2_normalize();
    assert!(y.value().data().iter().all(|v| *v == 0.0));
    let g = tape.backward(y.sum()).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|v| v.is_finite()));
}

#[test]
fn mean_over_rows() {
    let tape = Tape::new();
    let y = tape.leaf(t64(&[2, 2], &[1.0, 3.0, 5.0, 7.0])).mean_axis(0).unwrap();
    assert_eq!(y.value().data(), &[3.0, 5.0]);
}

#[test]
fn softmax_examples() {
    let c = softmax_t(&t64(&[3], &[2.5, 2.5, 2.5]), 0.7).unwrap();
    close(c.data(), &[1.0 / 3.0; 3], 1e-12);

    // softmax(3·[1,0,0]) = [e³, 1, 1] / (e³ + 2)
    let s = softmax_t(&t64(&[3], &[1.0, 0.0, 0.0]), 1.0 / 3.0).unwrap();
    close(s.data(), &[0.909_443, 0.045_279, 0.045_279], 1e-4);

    let cold = softmax_t(&t64(&[3], &[0.2, 0.9, 0.1]), 1e-4).unwrap();
    close(cold.data(), &[0.0, 1.0, 0.0], 1e-9);
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    assert!(matches!(softmax_t(&t64(&[2], &[1.0, 2.0]), 0.0), Err(MocaError::Config(_))));
    assert!(matches!(softmax_t(&t64(&[2], &[1.0, 2.0]), -1.0), Err(MocaError::Config(_))));
}

#[test]
fn cosine_examples() {
    let a = t64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5f64.sqrt(), 0.5f64.sqrt()]);
    let b = t64(&[1, 2], &[1.0, 0.0]);
    let s = cosine_sim_matrix(&a, &b).unwrap();
    close(s.data(), &[1.0, 0.0, std::f64::consts::FRAC_1_SQRT_2], 1e-12);
    let bad = t64(&[1, 3], &[1.0, 0.0, 0.0]);
    assert!(matches!(cosine_sim_matrix(&a, &bad), Err(MocaError::Shape { .. })));
}

#[test]
fn cross_entropy_examples() {
    let onehot = [0.0, 1.0, 0.0, 0.0];
    assert_eq!(cross_entropy(&onehot, &onehot).unwrap(), 0.0);
    let ce: f64 = cross_entropy(&[0.25; 4], &onehot).unwrap();
    assert!((ce - 1.386_294_361).abs() < 1e-9);
    let ce2 = cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
    assert!((ce2 - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(matches!(
        cross_entropy(&[0.7, 0.7], &[0.5, 0.5]),
        Err(MocaError::Contract(_))
    ));
    assert!(matches!(
        cross_entropy(&[1.5, -0.5], &[0.5, 0.5]),
        Err(MocaError::Contract(_))
    ));
}

#[test]
fn fused_softmax_ce_matches_two_step_path() {
    let logits = random(&[3, 5], 7);
    let target = softmax_t(&random(&[3, 5], 8), 0.5).unwrap();
    let tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let fused = x.softmax_cross_entropy(&target, 1.0 / 3.0).unwrap();
    let two_step = x.softmax_t(1.0 / 3.0).unwrap().cross_entropy_rows(&target).unwrap();
    assert!((fused.value().item() - two_step.value().item()).abs() < 1e-12);
    let gf = tape.backward(fused).unwrap().get_or_zeros(x);
    let gt = tape.backward(two_step).unwrap().get_or_zeros(x);
    close(gf.data(), gt.data(), 1e-10);
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(random(&[2, 3], 1));
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_of_square() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn backward_requires_scalar_root() {
    let tape = Tape::new();
    let x = tape.leaf(random(&[2], 3));
    assert!(matches!(tape.backward(x), Err(MocaError::Contract(_))));
}

#[test]
fn detached_inputs_get_no_gradient() {
    let tape = Tape::new();
    let w = tape.leaf(random(&[3, 3], 4));
    let c = tape.constant(random(&[2, 3], 5));
    let y = c.matmul(w).unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(w).is_some());
    assert!(!c.requires_grad());
}

#[test]
fn gradients_accumulate_across_uses() {
    let tape = Tape::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
    let y = x.add(x).unwrap().add(x).unwrap().sum();
    assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn linear_function_checks_to_machine_precision() {
    let w = random(&[3, 2], 9);
    let r = finite_difference_check(
        |tape, x| Ok(x.matmul(tape.constant(w.clone()))?.sum()),
        &random(&[4, 3], 10),
        1e-5,
    )
    .unwrap();
    assert!(r.max_abs_err < 1e-9, "{r:?}");
}

#[test]
fn softmax_matmul_composite_gradcheck() {
    let w = random(&[4, 4], 11);
    let target = softmax_t(&random(&[4, 4], 12), 1.0).unwrap();
    let r = finite_difference_check(
        |tape, x| {
            let p = x.matmul(tape.constant(w.clone()))?.softmax_t(0.5)?;
            p.cross_entropy_rows(&target)
        },
        &random(&[4, 4], 13),
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn gelu_derivative_at_origin() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let g = tape.backward(x.gelu().sum()).unwrap();
    let d: f64 = g.get(x).unwrap().item();
    assert!((d - 0.5).abs() < 1e-15);
}

type Op = for<'t> fn(&'t Tape<f64>, Var<'t, f64>) -> crate::Result<Var<'t, f64>>;

fn weighted_sum<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> crate::Result<Var<'t, f64>> {
    let shape = y.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    y.mul(tape.constant(w)).map(Var::sum)
}

#[test]
fn every_differentiable_op_passes_gradcheck() {
    let cases: Vec<(&str, Vec<usize>, Op)> = vec![
        ("add", vec![3, 4], |t, x| weighted_sum(t, x.add(t.constant(random(&[3, 4], 1)))?)),
        ("sub", vec![3, 4], |t, x| weighted_sum(t, t.constant(random(&[3, 4], 1)).sub(x)?)),
        ("mul", vec![3, 4], |t, x| weighted_sum(t, x.mul(x)?)),
        ("scale", vec![3, 4], |t, x| weighted_sum(t, x.scale(-1.7))),
        ("add_row", vec![3, 4], |t, x| {
            let b = t.leaf(random(&[4], 2));
            weighted_sum(t, x.add_row(b)?)
        }),
        ("add_row bias", vec![4], |t, b| weighted_sum(t, t.constant(random(&[3, 4], 3)).add_row(b)?)),
        ("matmul lhs", vec![3, 4], |t, x| weighted_sum(t, x.matmul(t.constant(random(&[4, 2], 4)))?)),
        ("matmul rhs", vec![4, 2], |t, x| weighted_sum(t, t.constant(random(&[3, 4], 5)).matmul(x)?)),
        ("matmul_nt lhs", vec![3, 4], |t, x| weighted_sum(t, x.matmul_nt(t.constant(random(&[5, 4], 6)))?)),
        ("matmul_nt rhs", vec![5, 4], |t, x| weighted_sum(t, t.constant(random(&[3, 4], 6)).matmul_nt(x)?)),
        ("transpose", vec![3, 4], |t, x| weighted_sum(t, x.transpose()?)),
        ("reshape", vec![3, 4], |t, x| weighted_sum(t, x.reshape(vec![2, 6])?)),
        ("select_rows", vec![3, 4], |t, x| weighted_sum(t, x.select_rows(&[2, 0, 2, 1])?)),
        ("concat_rows", vec![3, 4], |t, x| {
            let other = t.constant(random(&[2, 4], 7));
            weighted_sum(t, t.concat_rows(&[x, other, x])?)
        }),
        ("mean_axis0", vec![2, 3, 4], |t, x| weighted_sum(t, x.mean_axis(0)?)),
        ("mean_axis1", vec![2, 3, 4], |t, x| weighted_sum(t, x.mean_axis(1)?)),
        ("mean_axis2", vec![2, 3, 4], |t, x| weighted_sum(t, x.mean_axis(2)?)),
        ("mean", vec![3, 4], |_, x| Ok(x.mean())),
        ("relu", vec![3, 4], |t, x| weighted_sum(t, x.relu())),
        ("gelu", vec![3, 4], |t, x| weighted_sum(t, x.gelu())),
        ("l2_normalize", vec![3, 4], |t, x| weighted_sum(t, x.l2_normalize())),
        ("softmax_t", vec![3, 4], |t, x| weighted_sum(t, x.softmax_t(0.4)?)),
        ("cross_entropy_rows", vec![3, 4], |_, x| {
            x.softmax_t(1.0)?.cross_entropy_rows(&softmax_t(&random(&[3, 4], 8), 1.0).unwrap())
        }),
        ("softmax_cross_entropy", vec![3, 4], |_, x| {
            x.softmax_cross_entropy(&softmax_t(&random(&[3, 4], 8), 1.0).unwrap(), 1.0 / 3.0)
        }),
        ("layer_norm x", vec![3, 4], |t, x| {
            let g = t.leaf(random(&[4], 9));
            let b = t.leaf(random(&[4], 10));
            weighted_sum(t, x.layer_norm(g, b, 1e-6)?)
        }),
        ("layer_norm gain", vec![4], |t, g| {
            let b = t.leaf(random(&[4], 10));
            weighted_sum(t, t.constant(random(&[3, 4], 11)).layer_norm(g, b, 1e-6)?)
        }),
        ("layer_norm bias", vec![4], |t, b| {
            let g = t.leaf(random(&[4], 9));
            weighted_sum(t, t.constant(random(&[3, 4], 11)).layer_norm(g, b, 1e-6)?)
        }),
        ("batch_norm x", vec![5, 3], |t, x| {
            let g = t.leaf(random(&[3], 12));
            let b = t.leaf(random(&[3], 13));
            weighted_sum(t, x.batch_norm_rows(g, b, 1e-5)?)
        }),
        ("batch_norm gain", vec![3], |t, g| {
            let b = t.leaf(random(&[3], 13));
            weighted_sum(t, t.constant(random(&[5, 3], 14)).batch_norm_rows(g, b, 1e-5)?)
        }),
        ("attention q", vec![6, 4], |t, q| {
            let k = t.constant(random(&[6, 4], 15));
            let v = t.constant(random(&[6, 4], 16));
            weighted_sum(t, t.attention(q, k, v, 3, 2)?)
        }),
        ("attention k", vec![6, 4], |t, k| {
            let q = t.constant(random(&[6, 4], 17));
            let v = t.constant(random(&[6, 4], 16));
            weighted_sum(t, t.attention(q, k, v, 3, 2)?)
        }),
        ("attention v", vec![6, 4], |t, v| {
            let q = t.constant(random(&[6, 4], 17));
            let k = t.constant(random(&[6, 4], 15));
            weighted_sum(t, t.attention(q, k, v, 3, 2)?)
        }),
        ("self attention", vec![6, 4], |t, x| weighted_sum(t, t.attention(x, x, x, 2, 1)?)),
    ];
    for (i, (name, shape, op)) in cases.into_iter().enumerate() {
        let x = random(&shape, 100 + i as u64);
        let r = finite_difference_check(op, &x, 1e-5).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn batch_norm_rejects_single_row() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 3]));
    let g = tape.leaf(Tensor::ones(vec![3]));
    let b = tape.leaf(Tensor::zeros(vec![3]));
    assert!(matches!(x.batch_norm_rows(g, b, 1e-5), Err(MocaError::Config(_))));
}

#[test]
fn attention_uniform_scores_average_values() {
    let tape = Tape::new();
    let q = tape.constant(Tensor::<f64>::zeros(vec![3, 2]));
    let v = tape.constant(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let out = tape.attention(q, q, v, 3, 1).unwrap();
    for r in 0..3 {
        close(out.value().row(r), &[3.0, 4.0], 1e-12);
    }
}

#[test]
fn threaded_matmul_matches_single_thread() {
    let a = random(&[130, 70], 1);
    let b = random(&[70, 90], 2);
    let single = a.matmul(&b).unwrap();
    set_matmul_threads(4);
    let multi = a.matmul(&b).unwrap();
    set_matmul_threads(1);
    close(single.data(), multi.data(), 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-80.0f64..80.0, 1..40), tau in 0.01f64..10.0) {
        let n = xs.len();
        let p = softmax_t(&Tensor::new(vec![n], xs).unwrap(), tau).unwrap();
        let s: f64 = p.data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn softmax_f32_rows_sum_to_one(xs in proptest::collection::vec(-80.0f32..80.0, 1..300)) {
        let n = xs.len();
        let p = softmax_t(&Tensor::new(vec![n], xs).unwrap(), 1.0 / 3.0).unwrap();
        let s: f64 = p.data().iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn softmax_temperature_is_prescaling(xs in proptest::collection::vec(-50.0f64..50.0, 1..20), tau in 0.05f64..5.0) {
        let n = xs.len();
        let x = Tensor::new(vec![n], xs).unwrap();
        let scaled = x.map(|v| v / tau);
        prop_assert_eq!(softmax_t(&x, tau).unwrap(), softmax_t(&scaled, 1.0).unwrap());
    }

    #[test]
    fn cosine_entries_bounded(seed in 0u64..1000) {
        let a = random(&[4, 3], seed);
        let b = random(&[5, 3], seed + 1);
        let s = cosine_sim_matrix(&a, &b).unwrap();
        prop_assert!(s.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
