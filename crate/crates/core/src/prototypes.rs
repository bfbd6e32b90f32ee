//! Prototype generators: two-layer perceptrons mapping codebook entries to
//! unit-norm prediction prototypes.

use rand::Rng;

use crate::error::{MocaError, Result};
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::vit::Linear;

pub const BN_EPS: f64 = 1e-5;

/// `L2Norm → Linear(d, 2d) → BatchNorm over K → ReLU → Linear(2d, d_out) → L2Norm`.
#[derive(Clone, Debug)]
pub struct Generator {
    layer1: Linear,
    bn_gain: ParamId,
    bn_bias: ParamId,
    layer2: Linear,
    pub d_out: usize,
}

impl Generator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = 2 * d_in;
        let layer1 = Linear::new(store, &format!("{name}.layer1"), d_in, hidden, rng);
        let bn_gain = store.add(format!("{name}.bn.gain"), Tensor::ones(vec![hidden]), false);
        let bn_bias = store.add(format!("{name}.bn.bias"), Tensor::zeros(vec![hidden]), false);
        let layer2 = Linear::new(store, &format!("{name}.layer2"), hidden, d_out, rng);
        Generator {
            layer1,
            bn_gain,
            bn_bias,
            layer2,
            d_out,
        }
    }

    /// Prototypes `[K, d_out]` for the given (detached) codebook entries.
    /// Normalisation statistics come from the K entries of this call.
    pub fn generate<'t, T: Scalar>(&self, p: &Bound<'t, T>, entries: &Tensor<T>) -> Result<Var<'t, T>> {
        let [k, _] = entries.dims2("generate")?;
        if k < 2 {
            return Err(MocaError::Config(format!(
                "prototype generation needs K ≥ 2 codebook entries, got {k}"
            )));
        }
        let tape = p.get(self.bn_gain).tape();
        let x = tape.constant(entries.clone()).l2_normalize();
        let h = self
            .layer1
            .forward(p, x)?
            .batch_norm_rows(p.get(self.bn_gain), p.get(self.bn_bias), T::of(BN_EPS))?
            .relu();
        Ok(self.layer2.forward(p, h)?.l2_normalize())
    }
}
