use rand::Rng;

use crate::error::Result;
use crate::numerics::{Scalar, Var};
use crate::params::{init, Bound, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-6;

/// `y = x @ W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init::xavier_uniform(d_in, d_out, rng), true);
        let b = store.add(format!("{name}.bias"), crate::numerics::Tensor::zeros(vec![d_out]), false);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(p.get(self.w))?.add_row(p.get(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        use crate::numerics::Tensor;
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![d]), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d]), false),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p.get(self.gain), p.get(self.bias), T::of(LN_EPS))
    }
}

/// Pre-norm transformer block with a GELU MLP of ratio 4.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, 4 * d, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), 4 * d, d, rng),
            heads,
        }
    }

    /// `x` holds `batch` sequences of `seq` rows each, stacked.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, seq: usize) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let h = self.ln1.forward(p, x)?;
        let a = tape.attention(
            self.q.forward(p, h)?,
            self.k.forward(p, h)?,
            self.v.forward(p, h)?,
            seq,
            self.heads,
        )?;
        let x = x.add(self.proj.forward(p, a)?)?;
        let h = self.ln2.forward(p, x)?;
        let m = self.fc2.forward(p, self.fc1.forward(p, h)?.gelu())?;
        x.add(m)
    }
}
