use crate::error::{MocaError, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Learning rate for 1-based step `t`.
    pub fn lr(&self, t: u64) -> f64 {
        if t <= self.warmup_steps {
            return self.peak * t as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return 0.0;
        }
        let progress = ((t - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay over a fixed list of parameter stores.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    /// `m` and `v` per store, per parameter.
    pub moments: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(stores: &[&ParamStore<T>], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let moments = stores
            .iter()
            .map(|s| {
                s.entries()
                    .iter()
                    .map(|e| {
                        let z = Tensor::zeros(e.value.shape().to_vec());
                        (z.clone(), z)
                    })
                    .collect()
            })
            .collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            moments,
        }
    }

    /// One update with learning rate `lr`; `grads[s][p]` matches
    /// `stores[s].entries()[p]`. Decay skips parameters flagged without it.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], grads: &[Vec<Tensor<T>>], lr: f64) -> Result<()> {
        if stores.len() != self.moments.len() || grads.len() != stores.len() {
            return Err(MocaError::Contract(format!(
                "optimizer tracks {} stores, got {} stores and {} gradient sets",
                self.moments.len(),
                stores.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (nb1, nb2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        let shrink = T::of(1.0 - lr * self.weight_decay);
        for ((store, g), mom) in stores.iter_mut().zip(grads).zip(&mut self.moments) {
            if g.len() != store.len() || mom.len() != store.len() {
                return Err(MocaError::Contract("gradient list does not match parameters".into()));
            }
            for ((entry, grad), (m, v)) in store.entries_mut().iter_mut().zip(g).zip(mom.iter_mut()) {
                if grad.shape() != entry.value.shape() {
                    return Err(MocaError::shape("adamw", grad.shape(), entry.value.shape()));
                }
                let decay = entry.decay;
                for (((p, &gv), mv), vv) in entry
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mv = b1 * *mv + nb1 * gv;
                    *vv = b2 * *vv + nb2 * gv * gv;
                    if decay {
                        *p *= shrink;
                    }
                    *p -= step * *mv / ((*vv * inv_c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            peak: 1.5e-4,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert_eq!(s.lr(10), 1.5e-4);
        assert!((s.lr(5) - 0.75e-4).abs() < 1e-18);
        assert!(s.lr(100).abs() < 1e-20);
        assert!((s.lr(55) - 0.75e-4).abs() < 1e-12);
        assert!(s.lr(30) > s.lr(60));
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::from_fn(vec![4], |i| i as f32 - 1.5), true);
        let before = store.clone();
        let mut opt = AdamW::new(&[&store], 0.9, 0.999, 1e-8, 0.05);
        let g = vec![vec![Tensor::ones(vec![4])]];
        opt.step(&mut [&mut store], &g, 0.0).unwrap();
        assert_eq!(store, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(vec![3]), false);
        let mut opt = AdamW::new(&[&store], 0.9, 0.999, 1e-12, 0.0);
        let g = vec![vec![Tensor::new(vec![3], vec![2.0, -0.5, 0.0]).unwrap()]];
        opt.step(&mut [&mut store], &g, 0.1).unwrap();
        let w = store.entries()[0].value.data();
        assert!((w[0] + 0.1).abs() < 1e-9);
        assert!((w[1] - 0.1).abs() < 1e-9);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn decay_only_where_flagged() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::ones(vec![1]), true);
        store.add("norm.gain", Tensor::ones(vec![1]), false);
        let mut opt = AdamW::new(&[&store], 0.9, 0.999, 1e-8, 0.5);
        let g = vec![vec![Tensor::zeros(vec![1]), Tensor::zeros(vec![1])]];
        opt.step(&mut [&mut store], &g, 0.1).unwrap();
        assert!((store.entries()[0].value.data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(store.entries()[1].value.data()[0], 1.0);
    }
}
