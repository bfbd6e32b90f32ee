//! Differentiable operations on [`Var`]s.
//!
//! Every operation computes its forward value eagerly and registers a
//! backward closure on the tape when any input requires gradient. Shapes are
//! checked up front; mismatches name both operands.

use std::rc::Rc;

use super::scalar::{gemm, MatMut, MatRef, Scalar};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{MocaError, Result};

/// Floor applied to vector norms before division.
pub const NORM_EPS: f64 = 1e-8;
/// Probabilities below this are clamped before taking the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;
/// Tolerance on `Σ p = 1` when validating distributions.
pub const DIST_TOL: f64 = 1e-5;

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MocaError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn strided<T>(data: &[T], offset: usize, rs: usize) -> MatRef<'_, T> {
    MatRef { data, offset, rs, cs: 1 }
}

fn sum_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.last_dim();
    let mut out = vec![T::zero(); c];
    for row in t.data().chunks(c.max(1)) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::new(vec![c], out).expect("column sums")
}

/// Numerically stable softmax of `row / tau`, accumulated in f64.
fn softmax_row<T: Scalar>(row: &[T], tau: T, out: &mut [T]) {
    let mut max = T::neg_infinity();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x / tau;
        max = max.max(*o);
    }
    let mut sum = 0f64;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += o.to_f64().unwrap_or(0.0);
    }
    let inv = T::of(1.0 / sum);
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Row-wise `softmax(x / tau)` on a detached tensor.
pub fn softmax_t<T: Scalar>(x: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    if !(tau > T::zero()) {
        return Err(MocaError::Config(format!("softmax temperature must be > 0, got {tau}")));
    }
    let c = x.last_dim();
    let mut out = Tensor::zeros(x.shape().to_vec());
    if c == 0 {
        return Ok(out);
    }
    for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        softmax_row(src, tau, dst);
    }
    Ok(out)
}

/// Cosine similarity between every row of `a` and every row of `b`, with
/// norms floored at [`NORM_EPS`]. Entries are clamped to `[-1, 1]`.
pub fn cosine_sim_matrix<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, da] = a.dims2("cosine_sim")?;
    let [_, db] = b.dims2("cosine_sim")?;
    if da != db {
        return Err(MocaError::shape("cosine_sim", a.shape(), b.shape()));
    }
    let eps = T::of(NORM_EPS);
    let an = a.l2_normalize_rows(eps);
    let bn = b.l2_normalize_rows(eps);
    let sims = an.matmul_t(&bn, false, true)?;
    Ok(sims.map(|s| s.max(-T::one()).min(T::one())))
}

/// Checks that `p` is a probability vector within [`DIST_TOL`].
pub fn check_distribution<T: Scalar>(p: &[T], what: &str) -> Result<()> {
    let mut sum = 0f64;
    for &x in p {
        let x = x.to_f64().unwrap_or(f64::NAN);
        if !(x >= -DIST_TOL) {
            return Err(MocaError::Contract(format!("{what}: negative or non-finite entry {x}")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(MocaError::Contract(format!("{what}: sums to {sum}, expected 1")));
    }
    Ok(())
}

/// `CE(pred, target) = -Σ target[k] · log(max(pred[k], 1e-12))`.
pub fn cross_entropy<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() {
        return Err(MocaError::shape("cross_entropy", &[pred.len()], &[target.len()]));
    }
    check_distribution(pred, "cross_entropy prediction")?;
    check_distribution(target, "cross_entropy target")?;
    let clamp = T::of(LOG_CLAMP);
    Ok(-pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| t * p.max(clamp).ln())
        .sum::<T>())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self
            .tape
            .record(out, &[self, other], || Box::new(|g| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self.tape.record(out, &[self, other], || {
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|x| -x))])
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.record(out, &[self, other], || {
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&b, |g, y| g * y).expect("shape")),
                    Some(g.zip_map(&a, |g, x| g * x).expect("shape")),
                ]
            })
        }))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|x| x * s);
        self.tape
            .record(out, &[self], || Box::new(move |g| vec![Some(g.map(|x| x * s))]))
    }

    /// `x + bias` with `bias` broadcast over every row of the last axis.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        if b.ndim() != 1 || b.numel() != x.last_dim() {
            return Err(MocaError::shape("add_row", x.shape(), b.shape()));
        }
        let mut out = (*x).clone();
        let c = b.numel();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                for (o, &bb) in row.iter_mut().zip(b.data()) {
                    *o += bb;
                }
            }
        }
        Ok(self.tape.record(out, &[self, bias], || {
            Box::new(|g| vec![Some(g.clone()), Some(sum_rows(g))])
        }))
    }

    fn matmul_impl(self, other: Var<'t, T>, tb: bool) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul_t(&b, false, tb)?;
        Ok(self.tape.record(out, &[self, other], || {
            Box::new(move |g| {
                let ga = g.matmul_t(&b, false, !tb).expect("matmul grad");
                let gb = if tb {
                    g.matmul_t(&a, true, false)
                } else {
                    a.matmul_t(g, true, false)
                }
                .expect("matmul grad");
                vec![Some(ga), Some(gb)]
            })
        }))
    }

    /// `self[m,k] @ other[k,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// `self[m,k] @ other[n,k]ᵀ`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true)
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose2()?;
        Ok(self.tape.record(out, &[self], || {
            Box::new(|g| vec![Some(g.transpose2().expect("2-D grad"))])
        }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape.record(out, &[self], || {
            Box::new(move |g| vec![Some(g.clone().reshape(orig.clone()).expect("reshape grad"))])
        }))
    }

    /// Gathers rows (of the `[rows, last_dim]` view) by index; repeats allowed.
    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.select_rows(idx)?;
        let rows = x.rows();
        let c = x.last_dim();
        let orig = x.shape().to_vec();
        let idx = idx.to_vec();
        Ok(self.tape.record(out, &[self], || {
            Box::new(move |g| {
                let mut acc = vec![T::zero(); rows * c];
                for (r, &i) in idx.iter().enumerate() {
                    for (a, &gv) in acc[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *a += gv;
                    }
                }
                vec![Some(Tensor::new(orig.clone(), acc).expect("scatter"))]
            })
        }))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(MocaError::Contract(format!(
                "mean over axis {axis} of shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::of(len as f64);
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.tape.record(out, &[self], || {
            Box::new(move |g| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        for (d, &s) in gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *d = s * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), gx).expect("mean grad"))]
            })
        }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape.record(out, &[self], || {
            Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.item()))])
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.tape.record(out, &[self], || {
            Box::new(move |g| {
                vec![Some(
                    g.zip_map(&x, |g, v| if v > T::zero() { g } else { T::zero() })
                        .expect("relu grad"),
                )]
            })
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(gelu_fwd);
        self.tape.record(out, &[self], || {
            Box::new(move |g| {
                vec![Some(g.zip_map(&x, |g, v| g * gelu_grad(v)).expect("gelu grad"))]
            })
        })
    }

    /// Divides each last-axis vector by `max(‖v‖, 1e-8)`.
    pub fn l2_normalize(self) -> Var<'t, T> {
        let x = self.value();
        let c = x.last_dim().max(1);
        let eps = T::of(NORM_EPS);
        let norms: Vec<T> = x
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut out = (*x).clone();
        for (row, &n) in out.data_mut().chunks_mut(c).zip(&norms) {
            let d = n.max(eps);
            for v in row {
                *v /= d;
            }
        }
        let y = Rc::new(out.clone());
        self.tape.record(out, &[self], || {
            Box::new(move |g| {
                let mut gx = g.clone();
                for ((grow, yrow), &n) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(&norms) {
                    if n > eps {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv = (*gv - yv * dot) / n;
                        }
                    } else {
                        for gv in grow.iter_mut() {
                            *gv /= eps;
                        }
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// Row-wise `softmax(x / tau)` over the last axis.
    pub fn softmax_t(self, tau: T) -> Result<Var<'t, T>> {
        let out = softmax_t(&self.value(), tau)?;
        let y = Rc::new(out.clone());
        let c = out.last_dim().max(1);
        Ok(self.tape.record(out, &[self], || {
            Box::new(move |g| {
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot) / tau;
                    }
                }
                vec![Some(gx)]
            })
        }))
    }

    /// Mean over rows of `CE(pred_row, target_row)`, where `self` holds
    /// probability rows and `target` is detached. Log is clamped at 1e-12.
    pub fn cross_entropy_rows(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let p = self.value();
        same_shape("cross_entropy", &p, target)?;
        let c = p.last_dim().max(1);
        let rows = p.rows().max(1);
        let mut total = T::zero();
        for (prow, trow) in p.data().chunks(c).zip(target.data().chunks(c)) {
            total += cross_entropy(prow, trow)?;
        }
        let inv = T::one() / T::of(rows as f64);
        let out = Tensor::scalar(total * inv);
        let t = target.clone();
        let clamp = T::of(LOG_CLAMP);
        Ok(self.tape.record(out, &[self], || {
            Box::new(move |g| {
                let s = g.item() * inv;
                let gp = p
                    .zip_map(&t, |pv, tv| if pv > clamp { -tv / pv * s } else { T::zero() })
                    .expect("ce grad");
                vec![Some(gp)]
            })
        }))
    }

    /// Mean over rows of `CE(softmax(logits_row / tau), target_row)`, evaluated
    /// through log-softmax so no probability is ever clamped.
    pub fn softmax_cross_entropy(self, target: &Tensor<T>, tau: T) -> Result<Var<'t, T>> {
        if !(tau > T::zero()) {
            return Err(MocaError::Config(format!("softmax temperature must be > 0, got {tau}")));
        }
        let x = self.value();
        same_shape("softmax_cross_entropy", &x, target)?;
        let c = x.last_dim().max(1);
        let rows = x.rows().max(1);
        let mut probs = Tensor::zeros(x.shape().to_vec());
        let mut total = 0f64;
        for ((xrow, trow), prow) in x
            .data()
            .chunks(c)
            .zip(target.data().chunks(c))
            .zip(probs.data_mut().chunks_mut(c))
        {
            check_distribution(trow, "cross_entropy target")?;
            let max = xrow.iter().fold(T::neg_infinity(), |m, &v| m.max(v / tau));
            let lse: f64 = xrow
                .iter()
                .map(|&v| (v / tau - max).to_f64().unwrap_or(f64::NAN).exp())
                .sum::<f64>()
                .ln();
            for ((&xv, &tv), pv) in xrow.iter().zip(trow).zip(prow.iter_mut()) {
                let logp = (xv / tau - max).to_f64().unwrap_or(f64::NAN) - lse;
                *pv = T::of(logp.exp());
                total -= tv.to_f64().unwrap_or(0.0) * logp;
            }
        }
        let inv = T::one() / T::of(rows as f64);
        let out = Tensor::scalar(T::of(total) * inv);
        let t = target.clone();
        Ok(self.tape.record(out, &[self], || {
            Box::new(move |g| {
                let s = g.item() * inv / tau;
                vec![Some(probs.zip_map(&t, |p, tv| (p - tv) * s).expect("sce grad"))]
            })
        }))
    }

    /// Layer normalisation over the last axis with learnable gain and bias.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let c = x.last_dim();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(MocaError::shape("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.rows();
        let inv_c = T::one() / T::of(c as f64);
        let mut xhat = Tensor::zeros(x.shape().to_vec());
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(x.shape().to_vec());
        for r in 0..rows {
            let src = x.row(r);
            let mean = src.iter().copied().sum::<T>() * inv_c;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(src) {
                *h = (v - mean) * rs;
            }
            let xh = xhat.row(r).to_vec();
            for (((o, &h), &g), &b) in out.row_mut(r).iter_mut().zip(&xh).zip(gv.data()).zip(bv.data()) {
                *o = h * g + b;
            }
        }
        Ok(self.tape.record(out, &[self, gain, bias], || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(g.shape().to_vec());
                let mut ggain = vec![T::zero(); c];
                let mut gbias = vec![T::zero(); c];
                let mut dxh = vec![T::zero(); c];
                for r in 0..rows {
                    let grow = g.row(r);
                    let xh = xhat.row(r);
                    for k in 0..c {
                        dxh[k] = grow[k] * gv.data()[k];
                        ggain[k] += grow[k] * xh[k];
                        gbias[k] += grow[k];
                    }
                    let m1 = dxh.iter().copied().sum::<T>() * inv_c;
                    let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                    for (k, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd[r] * (dxh[k] - m1 - xh[k] * m2);
                    }
                }
                vec![
                    Some(gx),
                    Some(Tensor::new(vec![c], ggain).expect("gain")),
                    Some(Tensor::new(vec![c], gbias).expect("bias")),
                ]
            })
        }))
    }

    /// Batch normalisation of a `[rows, features]` matrix using the statistics
    /// of the current rows (training-mode statistics, no running averages).
    pub fn batch_norm_rows(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let [rows, c] = x.dims2("batch_norm")?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(MocaError::shape("batch_norm", x.shape(), gv.shape()));
        }
        if rows < 2 {
            return Err(MocaError::Config(format!(
                "batch normalisation needs at least 2 rows, got {rows}"
            )));
        }
        let inv_r = T::one() / T::of(rows as f64);
        let mut mean = vec![T::zero(); c];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_r);
        let mut var = vec![T::zero(); c];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s * inv_r + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape().to_vec());
        let mut out = Tensor::zeros(x.shape().to_vec());
        for r in 0..rows {
            for k in 0..c {
                let h = (x.row(r)[k] - mean[k]) * rstd[k];
                xhat.row_mut(r)[k] = h;
                out.row_mut(r)[k] = h * gv.data()[k] + bv.data()[k];
            }
        }
        Ok(self.tape.record(out, &[self, gain, bias], || {
            Box::new(move |g| {
                let mut ggain = vec![T::zero(); c];
                let mut gbias = vec![T::zero(); c];
                let mut m1 = vec![T::zero(); c];
                let mut m2 = vec![T::zero(); c];
                for r in 0..rows {
                    let grow = g.row(r);
                    let xh = xhat.row(r);
                    for k in 0..c {
                        let d = grow[k] * gv.data()[k];
                        ggain[k] += grow[k] * xh[k];
                        gbias[k] += grow[k];
                        m1[k] += d;
                        m2[k] += d * xh[k];
                    }
                }
                let mut gx = Tensor::zeros(g.shape().to_vec());
                for r in 0..rows {
                    let grow = g.row(r);
                    let xh = xhat.row(r).to_vec();
                    for (k, o) in gx.row_mut(r).iter_mut().enumerate() {
                        let d = grow[k] * gv.data()[k];
                        *o = rstd[k] * (d - m1[k] * inv_r - xh[k] * m2[k] * inv_r);
                    }
                }
                vec![
                    Some(gx),
                    Some(Tensor::new(vec![c], ggain).expect("gain")),
                    Some(Tensor::new(vec![c], gbias).expect("bias")),
                ]
            })
        }))
    }
}

impl<T: Scalar> Tape<T> {
    /// Concatenates 2-D blocks with equal column counts along the row axis.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let Some(first) = values.first() else {
            return Err(MocaError::Contract("concat of zero tensors".into()));
        };
        let c = first.last_dim();
        let mut data = Vec::new();
        let mut counts = Vec::with_capacity(values.len());
        for v in &values {
            if v.ndim() != 2 || v.last_dim() != c {
                return Err(MocaError::shape("concat_rows", first.shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
            counts.push(v.rows());
        }
        let total: usize = counts.iter().sum();
        let out = Tensor::new(vec![total, c], data)?;
        Ok(self.record(out, parts, || {
            Box::new(move |g| {
                let mut start = 0;
                counts
                    .iter()
                    .map(|&n| {
                        let block = g.data()[start * c..(start + n) * c].to_vec();
                        start += n;
                        Some(Tensor::new(vec![n, c], block).expect("split"))
                    })
                    .collect()
            })
        }))
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of length `seq`. `q`, `k`, `v` are `[batch·seq, width]`.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        seq: usize,
        heads: usize,
    ) -> Result<Var<'t, T>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let [rows, width] = qv.dims2("attention")?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(MocaError::shape("attention", qv.shape(), kv.shape()));
        }
        if seq == 0 || rows % seq != 0 || heads == 0 || width % heads != 0 {
            return Err(MocaError::Contract(format!(
                "attention: {rows} rows, seq {seq}, width {width}, heads {heads}"
            )));
        }
        let batch = rows / seq;
        let dh = width / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * width];
        let mut row_buf = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(seq, dh, seq, scale, strided(qv.data(), off, width), strided(kv.data(), off, width).t(), T::zero(), MatMut::dense(p, seq));
                for r in 0..seq {
                    let src = &p[r * seq..(r + 1) * seq];
                    row_buf.copy_from_slice(src);
                    softmax_row(&row_buf, T::one(), &mut p[r * seq..(r + 1) * seq]);
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    MatRef::dense(p, seq),
                    strided(vv.data(), off, width),
                    T::zero(),
                    MatMut { data: &mut out, offset: off, rs: width, cs: 1 },
                );
            }
        }
        let out = Tensor::new(vec![rows, width], out)?;
        Ok(self.record(out, &[q, k, v], || {
            Box::new(move |g| {
                let mut gq = vec![T::zero(); rows * width];
                let mut gk = vec![T::zero(); rows * width];
                let mut gv = vec![T::zero(); rows * width];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * width + h * dh;
                                                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        // dV = Pᵀ G
                        gemm(
                            seq,
                            seq,
                            dh,
                            T::one(),
                            MatRef::dense(p, seq).t(),
                            strided(g.data(), off, width),
                            T::zero(),
                            MatMut { data: &mut gv, offset: off, rs: width, cs: 1 },
                        );
                        // dP = G Vᵀ
                        gemm(seq, dh, seq, T::one(), strided(g.data(), off, width), strided(vv.data(), off, width).t(), T::zero(), MatMut::dense(&mut dp, seq));
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        for r in 0..seq {
                            let pr = &p[r * seq..(r + 1) * seq];
                            let dr = &mut dp[r * seq..(r + 1) * seq];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pv) in dr.iter_mut().zip(pr) {
                                *d = pv * (*d - dot);
                            }
                        }
                        gemm(
                            seq,
                            seq,
                            dh,
                            scale,
                            MatRef::dense(&dp, seq),
                            strided(kv.data(), off, width),
                            T::zero(),
                            MatMut { data: &mut gq, offset: off, rs: width, cs: 1 },
                        );
                        gemm(
                            seq,
                            seq,
                            dh,
                            scale,
                            MatRef::dense(&dp, seq).t(),
                            strided(qv.data(), off, width),
                            T::zero(),
                            MatMut { data: &mut gk, offset: off, rs: width, cs: 1 },
                        );
                    }
                }
                let shape = vec![rows, width];
                vec![
                    Some(Tensor::new(shape.clone(), gq).expect("gq")),
                    Some(Tensor::new(shape.clone(), gk).expect("gk")),
                    Some(Tensor::new(shape, gv).expect("gv")),
                ]
            })
        }))
    }
}
