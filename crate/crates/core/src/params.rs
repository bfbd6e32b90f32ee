//! Named parameter storage and its binding onto a tape.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MocaError, Result};
use crate::numerics::{GradCheckReport, Gradients, Scalar, Tape, Tensor, Var, REL_ERR_FLOOR};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered collection of named tensors. Two stores built by the same code
/// path have identical layouts, which is what the EMA teacher relies on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(MocaError::Contract(format!(
                "parameter trees differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(MocaError::Contract(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect(),
        }
    }

    /// Every parameter as a detached constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.entries.iter().map(|e| tape.constant(e.value.clone())).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
        }
    }
}

/// Parameters of one store placed on a tape.
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Wraps externally created variables, in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// One gradient per parameter, zeros where none flowed.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Central-difference check of `f` against backprop for the parameters of
/// several stores at once. At most `per_tensor` evenly spaced elements of each
/// tensor are probed. Returns one report per tensor, named.
pub fn check_param_gradients<F>(
    stores: &[&ParamStore<f64>],
    f: F,
    h: f64,
    per_tensor: usize,
) -> Result<Vec<(String, GradCheckReport)>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Bound<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let bound: Vec<_> = stores.iter().map(|s| s.bind(&tape)).collect();
    let root = f(&tape, &bound)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<Tensor<f64>>> = bound.iter().map(|b| b.gradients(&grads)).collect();

    let eval = |probe: &[ParamStore<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let bound: Vec<_> = probe.iter().map(|s| s.bind_frozen(&tape)).collect();
        let out = f(&tape, &bound)?.value();
        if out.numel() != 1 {
            return Err(MocaError::Contract("gradient check needs a scalar function".into()));
        }
        Ok(out.item())
    };

    let mut owned: Vec<ParamStore<f64>> = stores.iter().map(|s| (*s).clone()).collect();
    let mut reports = Vec::new();
    for (si, store) in stores.iter().enumerate() {
        for (pi, entry) in store.entries().iter().enumerate() {
            let n = entry.value.numel();
            let step = n.div_ceil(per_tensor.max(1)).max(1);
            let mut rep = GradCheckReport {
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                worst_index: 0,
                checked: 0,
            };
            for i in (0..n).step_by(step) {
                let orig = entry.value.data()[i];
                owned[si].entries[pi].value.data_mut()[i] = orig + h;
                let fp = eval(&owned)?;
                owned[si].entries[pi].value.data_mut()[i] = orig - h;
                let fm = eval(&owned)?;
                owned[si].entries[pi].value.data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[si][pi].data()[i];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
                if rel > rep.max_rel_err || !rel.is_finite() {
                    rep.max_rel_err = rel;
                    rep.worst_index = i;
                }
                rep.max_abs_err = rep.max_abs_err.max(abs);
                rep.checked += 1;
            }
            reports.push((entry.name.clone(), rep));
        }
    }
    Ok(reports)
}

/// Initialisers, all drawing from the caller's RNG stream.
pub mod init {
    use super::*;

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(vec![fan_in, fan_out], |_| T::of(rng.gen_range(-bound..bound)))
    }

    /// Normal samples truncated to ±2σ.
    pub fn trunc_normal<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<T> {
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
    }

    pub fn gaussian<T: Scalar>(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
    }
}
