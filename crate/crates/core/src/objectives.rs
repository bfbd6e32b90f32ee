//! Student prediction heads, the two cross-entropy objectives and the EMA
//! teacher update.

use crate::error::{MocaError, Result};
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::ParamStore;

/// Which encoder output acts as the student's global image embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GlobalToken {
    #[default]
    Avg,
    Cls,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the image-level loss; `1 − λ` goes to the token loss.
    pub lambda: f64,
    pub tau_b: f64,
    pub tau_d: f64,
    /// Also score decoder outputs at visible positions in the token loss.
    pub loss_on_visible: bool,
    pub global: GlobalToken,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            tau_b: 1.0 / 3.0,
            tau_d: 1.0 / 3.0,
            loss_on_visible: false,
            global: GlobalToken::Avg,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(MocaError::Config(format!("λ = {} outside [0, 1]", self.lambda)));
        }
        if !(self.tau_b > 0.0 && self.tau_d > 0.0) {
            return Err(MocaError::Config(format!(
                "student temperatures must be positive (τ_b {}, τ_d {})",
                self.tau_b, self.tau_d
            )));
        }
        Ok(())
    }
}

/// Raw token-head logits `dec_out · W^dᵀ`; the softmax with `τ_d` is fused
/// into the loss.
pub fn token_logits<'t, T: Scalar>(dec_out: Var<'t, T>, w_d: Var<'t, T>) -> Result<Var<'t, T>> {
    dec_out.matmul_nt(w_d)
}

/// `softmax(dec_out · W^dᵀ / τ_d)` for each decoded slot.
pub fn predict_token_assignments<'t, T: Scalar>(dec_out: Var<'t, T>, w_d: Var<'t, T>, tau_d: f64) -> Result<Var<'t, T>> {
    token_logits(dec_out, w_d)?.softmax_t(T::of(tau_d))
}

/// `softmax(g · W^bᵀ / τ_b)` for each global embedding row.
pub fn predict_global_assignment<'t, T: Scalar>(global: Var<'t, T>, w_b: Var<'t, T>, tau_b: f64) -> Result<Var<'t, T>> {
    global.matmul_nt(w_b)?.softmax_t(T::of(tau_b))
}

/// Mean over views of the per-view mean cross-entropy between student
/// token logits (`[R, K]`, scaled by `1/τ_d` inside) and detached teacher
/// assignments.
pub fn loss_loc<'t, T: Scalar>(views: &[(Var<'t, T>, &Tensor<T>)], tau_d: f64) -> Result<Var<'t, T>> {
    mean_of_ce(views, tau_d, "loss_loc")
}

/// Cross-view image loss: view 1's global prediction against view 2's BoW
/// target and vice versa, averaged over both terms and the batch.
/// `logits[v]` is `[B, K]`, `targets[v]` is the teacher BoW of view `v`.
pub fn loss_img<'t, T: Scalar>(logits: [Var<'t, T>; 2], targets: [&Tensor<T>; 2], tau_b: f64) -> Result<Var<'t, T>> {
    mean_of_ce(&[(logits[0], targets[1]), (logits[1], targets[0])], tau_b, "loss_img")
}

fn mean_of_ce<'t, T: Scalar>(terms: &[(Var<'t, T>, &Tensor<T>)], tau: f64, what: &str) -> Result<Var<'t, T>> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| MocaError::Contract(format!("{what} needs at least one term")))?;
    let mut acc = first.0.softmax_cross_entropy(first.1, T::of(tau))?;
    for (logits, target) in rest {
        acc = acc.add(logits.softmax_cross_entropy(target, T::of(tau))?)?;
    }
    Ok(acc.scale(T::of(1.0 / terms.len() as f64)))
}

/// `λ·L_img + (1 − λ)·L_loc`.
pub fn total_loss<'t, T: Scalar>(l_img: Var<'t, T>, l_loc: Var<'t, T>, lambda: f64) -> Result<Var<'t, T>> {
    if lambda == 1.0 {
        return Ok(l_img);
    }
    if lambda == 0.0 {
        return Ok(l_loc);
    }
    l_img.scale(T::of(lambda)).add(l_loc.scale(T::of(1.0 - lambda)))
}

/// `θ_T ← α·θ_T + (1 − α)·θ_S`, elementwise.
pub fn ema_update<T: Scalar>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, alpha: f64) -> Result<()> {
    teacher.check_same_layout(student)?;
    let a = T::of(alpha);
    let b = T::of(1.0 - alpha);
    for (t, s) in teacher.entries_mut().iter_mut().zip(student.entries()) {
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn eye(k: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![k, k], |i| if i / k == i % k { 1.0 } else { 0.0 })
    }

    #[test]
    fn head_closed_forms() {
        let tape = Tape::no_grad();
        let w = tape.constant(eye(3));
        let q = predict_token_assignments(tape.constant(t(&[1, 3], &[3.0, 0.0, 0.0])), w, 1.0 / 3.0).unwrap();
        assert!((q.value().data()[0] - 0.99975325).abs() < 1e-7);

        let q = predict_token_assignments(tape.constant(Tensor::zeros(vec![2, 3])), w, 1.0 / 3.0).unwrap();
        assert!(q.value().data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));

        let y = predict_global_assignment(tape.constant(t(&[1, 2], &[1.0, 0.0])), tape.constant(eye(2)), 1.0 / 3.0).unwrap();
        let v = y.value();
        assert!((v.data()[0] - 0.95257413).abs() < 1e-7);
        assert!((v.data()[1] - 0.04742587).abs() < 1e-7);
    }

    #[test]
    fn loss_closed_forms() {
        let tape = Tape::no_grad();
        let onehot = t(&[1, 4], &[0.0, 1.0, 0.0, 0.0]);
        let uniform = tape.constant(Tensor::zeros(vec![1, 4]));
        let l = loss_loc(&[(uniform, &onehot), (uniform, &onehot)], 1.0 / 3.0).unwrap();
        assert!((l.value().item() - 4f64.ln()).abs() < 1e-12);

        // Very confident correct logits drive the loss to zero.
        let sharp = tape.constant(t(&[1, 4], &[0.0, 100.0, 0.0, 0.0]));
        let l = loss_loc(&[(sharp, &onehot)], 1.0 / 3.0).unwrap();
        assert!(l.value().item() < 1e-12);

        let k = 4096;
        let mut y = vec![0.0; k];
        y[7] = 1.0;
        let y = Tensor::new(vec![1, k], y).unwrap();
        let z = tape.constant(Tensor::zeros(vec![1, k]));
        let l = loss_img([z, z], [&y, &y], 1.0 / 3.0).unwrap();
        assert!((l.value().item() - 8.3177662).abs() < 1e-6);
    }

    #[test]
    fn losses_are_view_symmetric() {
        let tape = Tape::no_grad();
        let a = tape.constant(Tensor::from_fn(vec![3, 5], |i| (i as f64 * 0.7).sin()));
        let b = tape.constant(Tensor::from_fn(vec![3, 5], |i| (i as f64 * 1.3).cos()));
        let ta = Tensor::from_fn(vec![3, 5], |i| if i % 5 == (i / 5) { 1.0 } else { 0.0 });
        let tb = Tensor::full(vec![3, 5], 0.2);
        let l1 = loss_loc(&[(a, &ta), (b, &tb)], 0.3).unwrap().value().item();
        let l2 = loss_loc(&[(b, &tb), (a, &ta)], 0.3).unwrap().value().item();
        assert!((l1 - l2).abs() < 1e-12);
        let i1 = loss_img([a, b], [&ta, &tb], 0.3).unwrap().value().item();
        let i2 = loss_img([b, a], [&tb, &ta], 0.3).unwrap().value().item();
        assert!((i1 - i2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_endpoints() {
        let tape = Tape::no_grad();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(5.0));
        assert_eq!(total_loss(a, b, 1.0).unwrap().value().item(), 2.0);
        assert_eq!(total_loss(a, b, 0.0).unwrap().value().item(), 5.0);
        assert_eq!(total_loss(a, b, 0.5).unwrap().value().item(), 3.5);
    }

    #[test]
    fn ema_arithmetic_and_endpoints() {
        let mut teacher = ParamStore::<f64>::new();
        teacher.add("w", Tensor::zeros(vec![3]), true);
        let mut student = ParamStore::<f64>::new();
        student.add("w", Tensor::ones(vec![3]), true);

        let mut t1 = teacher.clone();
        ema_update(&mut t1, &student, 0.99).unwrap();
        assert!(t1.entries()[0].value.data().iter().all(|&v| (v - 0.01).abs() < 1e-15));

        let mut t2 = teacher.clone();
        ema_update(&mut t2, &student, 1.0).unwrap();
        assert_eq!(t2, teacher);

        let mut t3 = teacher.clone();
        ema_update(&mut t3, &student, 0.0).unwrap();
        assert_eq!(t3.entries()[0].value, student.entries()[0].value);

        let mut other = ParamStore::<f64>::new();
        other.add("v", Tensor::ones(vec![3]), true);
        assert!(matches!(ema_update(&mut t3, &other, 0.5), Err(MocaError::Contract(_))));
    }

    #[test]
    fn bad_loss_config() {
        let c = LossConfig {
            lambda: 1.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = LossConfig {
            tau_d: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
