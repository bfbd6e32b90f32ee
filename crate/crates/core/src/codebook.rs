//! Online codebook of teacher token embeddings, the adaptive teacher
//! temperature, soft assignments and their bag-of-words pooling.

use rand::seq::index;
use rand::Rng;

use crate::error::{MocaError, Result};
use crate::numerics::{cosine_sim_matrix, softmax_t, Scalar, Tensor, NORM_EPS};
use crate::params::init;

/// FIFO ring of `K` unit-norm embeddings. `K_new` slots are overwritten per
/// step, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    entries: Tensor<T>,
    ages: Vec<u64>,
    write_ptr: usize,
    k_new: usize,
}

/// One sampled codebook insertion: which image, view and patch it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Insertion {
    pub image: usize,
    pub view: usize,
    pub patch: usize,
    pub slot: usize,
}

impl<T: Scalar> Codebook<T> {
    /// Gaussian entries, normalised; all ages 0.
    pub fn random(k: usize, d: usize, k_new: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::from_entries(init::gaussian(vec![k, d], rng), k_new)
    }

    /// Builds a ring from explicit rows (normalised on the way in).
    pub fn from_entries(entries: Tensor<T>, k_new: usize) -> Result<Self> {
        let [k, _] = entries.dims2("codebook")?;
        if k == 0 {
            return Err(MocaError::Config("codebook size K must be positive".into()));
        }
        if k_new > k {
            return Err(MocaError::Config(format!("K_new {k_new} exceeds K {k}")));
        }
        Ok(Codebook {
            entries: entries.l2_normalize_rows(T::of(NORM_EPS)),
            ages: vec![0; k],
            write_ptr: 0,
            k_new,
        })
    }

    /// Restores a ring verbatim (checkpoint path); no renormalisation.
    pub fn from_parts(entries: Tensor<T>, ages: Vec<u64>, write_ptr: usize, k_new: usize) -> Result<Self> {
        let [k, _] = entries.dims2("codebook")?;
        if ages.len() != k || write_ptr >= k.max(1) || k_new > k {
            return Err(MocaError::Contract(format!(
                "inconsistent codebook state: K={k}, {} ages, write_ptr {write_ptr}, K_new {k_new}",
                ages.len()
            )));
        }
        Ok(Codebook {
            entries,
            ages,
            write_ptr,
            k_new,
        })
    }

    pub fn capacity(&self) -> usize {
        self.ages.len()
    }

    pub fn dim(&self) -> usize {
        self.entries.last_dim()
    }

    pub fn k_new(&self) -> usize {
        self.k_new
    }

    pub fn entries(&self) -> &Tensor<T> {
        &self.entries
    }

    pub fn ages(&self) -> &[u64] {
        &self.ages
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    /// Cosine similarity of every token row against every entry, `[R, K]`.
    pub fn similarities(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        cosine_sim_matrix(tokens, &self.entries)
    }

    /// Writes the rows of `vectors` at the ring head (normalised), stamping
    /// them with `step`. Returns the slots written.
    pub fn push(&mut self, vectors: &Tensor<T>, step: u64) -> Result<Vec<usize>> {
        let [n, d] = vectors.dims2("codebook push")?;
        if d != self.dim() {
            return Err(MocaError::shape("codebook push", vectors.shape(), self.entries.shape()));
        }
        let normed = vectors.l2_normalize_rows(T::of(NORM_EPS));
        let k = self.capacity();
        let mut slots = Vec::with_capacity(n);
        for r in 0..n {
            let slot = self.write_ptr;
            self.entries.row_mut(slot).copy_from_slice(normed.row(r));
            self.ages[slot] = step;
            self.write_ptr = (slot + 1) % k;
            slots.push(slot);
        }
        Ok(slots)
    }

    /// Samples `K_new` patch tokens, each from a different image, uniformly
    /// over views and patch positions, and enqueues them.
    ///
    /// `views[v]` holds `[B·n, d]` teacher patch tokens of view `v`.
    pub fn enqueue(
        &mut self,
        views: &[&Tensor<T>],
        n: usize,
        step: u64,
        rng: &mut impl Rng,
    ) -> Result<Vec<Insertion>> {
        if self.k_new == 0 {
            return Ok(Vec::new());
        }
        let first = views
            .first()
            .ok_or_else(|| MocaError::Contract("enqueue needs at least one view".into()))?;
        if n == 0 || first.rows() % n != 0 {
            return Err(MocaError::Contract(format!(
                "{} token rows are not whole images of {n} patches",
                first.rows()
            )));
        }
        let batch = first.rows() / n;
        if views.iter().any(|v| v.shape() != first.shape()) {
            return Err(MocaError::Contract("views disagree in shape".into()));
        }
        if batch < self.k_new {
            return Err(MocaError::Config(format!(
                "batch of {batch} images cannot supply K_new = {} distinct images",
                self.k_new
            )));
        }
        let images = index::sample(rng, batch, self.k_new);
        let mut picks = Vec::with_capacity(self.k_new);
        let mut rows = Vec::with_capacity(self.k_new * self.dim());
        for image in images.iter() {
            let view = rng.gen_range(0..views.len());
            let patch = rng.gen_range(0..n);
            rows.extend_from_slice(views[view].row(image * n + patch));
            picks.push((image, view, patch));
        }
        let slots = self.push(&Tensor::new(vec![self.k_new, self.dim()], rows)?, step)?;
        Ok(picks
            .into_iter()
            .zip(slots)
            .map(|((image, view, patch), slot)| Insertion {
                image,
                view,
                patch,
                slot,
            })
            .collect())
    }
}

/// EMA of the mean max-minus-mean similarity, giving `τ_T = 1/(10·μ̄)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureState {
    pub msd_ema: f64,
    pub momentum: f64,
    pub floor: f64,
}

impl Default for TemperatureState {
    fn default() -> Self {
        TemperatureState {
            msd_ema: 0.1,
            momentum: 0.99,
            floor: 1e-3,
        }
    }
}

impl TemperatureState {
    pub fn tau(&self) -> f64 {
        1.0 / (10.0 * self.msd_ema.max(self.floor))
    }

    /// Folds one batch of similarities (`[B·n, K]`, images contiguous) into
    /// the EMA and returns the new temperature.
    pub fn update<T: Scalar>(&mut self, sims: &Tensor<T>, n: usize) -> Result<f64> {
        let value = batch_msd(sims, n)?;
        self.msd_ema = self.momentum * self.msd_ema + (1.0 - self.momentum) * value;
        Ok(self.tau())
    }
}

/// Per token `max_k s − mean_k s`, averaged per image, then over images.
pub fn batch_msd<T: Scalar>(sims: &Tensor<T>, n: usize) -> Result<f64> {
    let [rows, k] = sims.dims2("temperature update")?;
    if n == 0 || rows == 0 || rows % n != 0 || k == 0 {
        return Err(MocaError::Contract(format!(
            "similarities {:?} are not whole images of {n} tokens",
            sims.shape()
        )));
    }
    let images = rows / n;
    let mut total = 0.0;
    for img in 0..images {
        let mut per_image = 0.0;
        for r in img * n..(img + 1) * n {
            let row = sims.row(r);
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for s in row {
                let s = s.to_f64().unwrap_or(f64::NAN);
                max = max.max(s);
                sum += s;
            }
            per_image += max - sum / k as f64;
        }
        total += per_image / n as f64;
    }
    Ok(total / images as f64)
}

/// Teacher soft assignments `q` and their pooled BoW targets `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentBatch<T> {
    /// `[B·N, K]`, images contiguous.
    pub q: Tensor<T>,
    /// `[B, K]`.
    pub y: Tensor<T>,
}

/// `softmax(sims / τ)` row-wise; the result is a plain (detached) tensor.
pub fn assign<T: Scalar>(sims: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    softmax_t(sims, T::of(tau))
}

/// `min(2, ⌊(min(rows, cols) − 1)/2⌋)`: the widest border that still leaves
/// at least one interior position, capped at 2.
pub fn default_border(grid: (usize, usize)) -> usize {
    let m = grid.0.min(grid.1);
    2.min(m.saturating_sub(1) / 2)
}

/// Mean of `q` over the interior patch positions of each image.
pub fn reduce_bow<T: Scalar>(q: &Tensor<T>, grid: (usize, usize), border: usize) -> Result<Tensor<T>> {
    let [rows, k] = q.dims2("reduce_bow")?;
    let (gr, gc) = grid;
    let n = gr * gc;
    if n == 0 || rows % n != 0 {
        return Err(MocaError::Contract(format!(
            "{rows} assignment rows are not whole {gr}×{gc} grids"
        )));
    }
    if 2 * border >= gr || 2 * border >= gc {
        return Err(MocaError::Config(format!(
            "border {border} leaves no interior in a {gr}×{gc} grid"
        )));
    }
    let interior: Vec<usize> = (border..gr - border)
        .flat_map(|r| (border..gc - border).map(move |c| r * gc + c))
        .collect();
    let batch = rows / n;
    let inv = 1.0 / interior.len() as f64;
    let mut out = Vec::with_capacity(batch * k);
    let mut acc = vec![0f64; k];
    for b in 0..batch {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &i in &interior {
            for (a, v) in acc.iter_mut().zip(q.row(b * n + i)) {
                *a += v.to_f64().unwrap_or(f64::NAN);
            }
        }
        out.extend(acc.iter().map(|a| T::of(a * inv)));
    }
    Tensor::new(vec![batch, k], out)
}

impl<T: Scalar> AssignmentBatch<T> {
    /// Assigns teacher tokens against the codebook and pools them.
    pub fn compute(sims: &Tensor<T>, tau: f64, grid: (usize, usize), border: usize) -> Result<Self> {
        let q = assign(sims, tau)?;
        let y = reduce_bow(&q, grid, border)?;
        Ok(AssignmentBatch { q, y })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn random_entries_are_unit_norm() {
        let cb = Codebook::<f32>::random(64, 16, 4, &mut rng(0)).unwrap();
        for r in 0..64 {
            let n: f64 = cb.entries().row(r).iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_entries_give_uniform_assignment() {
        let e = Tensor::<f64>::from_fn(vec![5, 3], |i| [1.0, 2.0, 3.0][i % 3]);
        let cb = Codebook::from_entries(e, 1).unwrap();
        let tok = Tensor::from_fn(vec![2, 3], |i| i as f64 - 2.0);
        let q = assign(&cb.similarities(&tok).unwrap(), 0.07).unwrap();
        for v in q.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_entry_gets_closed_form_mass() {
        let e = Tensor::<f64>::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let cb = Codebook::from_entries(e, 1).unwrap();
        let tok = Tensor::new(vec![1, 3], vec![2.0, 0.0, 0.0]).unwrap();
        let q = assign(&cb.similarities(&tok).unwrap(), 1.0 / 3.0).unwrap();
        let want = [0.9094429985, 0.0452785007, 0.0452785007];
        for (a, b) in q.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn temperature_arithmetic() {
        let mut ts = TemperatureState {
            msd_ema: 0.8,
            ..Default::default()
        };
        assert!((ts.tau() - 0.125).abs() < 1e-15);
        ts.msd_ema = 0.5;
        // Each row has max 0.7 and mean 0.
        let sims = Tensor::<f64>::new(vec![2, 2], vec![0.7, -0.7, -0.7, 0.7]).unwrap();
        ts.update(&sims, 1).unwrap();
        assert!((ts.msd_ema - 0.502).abs() < 1e-12);
    }

    #[test]
    fn constant_similarities_engage_floor() {
        let mut ts = TemperatureState {
            msd_ema: 0.0,
            ..Default::default()
        };
        let sims = Tensor::<f64>::full(vec![4, 6], 0.3);
        let tau = ts.update(&sims, 2).unwrap();
        assert_eq!(ts.msd_ema, 0.0);
        assert!((tau - 100.0).abs() < 1e-9);
    }

    #[test]
    fn msd_is_per_image_then_batch() {
        // Image 0 has two tokens with differences 1 and 0; image 1 one value 0.4 twice.
        let sims = Tensor::<f64>::from_rows(&[
            vec![1.0, -1.0],
            vec![0.0, 0.0],
            vec![0.4, -0.4],
            vec![-0.4, 0.4],
        ])
        .unwrap();
        let v = batch_msd(&sims, 2).unwrap();
        assert!((v - (0.5 + 0.4) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut cb = Codebook::<f64>::from_entries(Tensor::ones(vec![8, 2]), 2).unwrap();
        for step in 1..=5u64 {
            let v = Tensor::from_fn(vec![2, 2], |i| if i % 2 == 0 { step as f64 } else { 1.0 });
            cb.push(&v, step).unwrap();
        }
        assert_eq!(cb.ages(), &[5, 5, 2, 2, 3, 3, 4, 4]);
        assert_eq!(cb.write_ptr(), 2);
    }

    #[test]
    fn enqueue_picks_distinct_images() {
        let mut cb = Codebook::<f64>::random(16, 4, 4, &mut rng(1)).unwrap();
        let v1 = Tensor::from_fn(vec![6 * 3, 4], |i| (i as f64).sin());
        let v2 = Tensor::from_fn(vec![6 * 3, 4], |i| (i as f64).cos());
        let ins = cb.enqueue(&[&v1, &v2], 3, 1, &mut rng(2)).unwrap();
        assert_eq!(ins.len(), 4);
        let mut imgs: Vec<_> = ins.iter().map(|i| i.image).collect();
        imgs.sort();
        imgs.dedup();
        assert_eq!(imgs.len(), 4);
        for i in &ins {
            let src = [&v1, &v2][i.view].row(i.image * 3 + i.patch);
            let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (a, b) in cb.entries().row(i.slot).iter().zip(src) {
                assert!((a - b / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enqueue_needs_enough_images() {
        let mut cb = Codebook::<f64>::random(16, 4, 4, &mut rng(1)).unwrap();
        let v = Tensor::zeros(vec![3 * 2, 4]);
        assert!(matches!(
            cb.enqueue(&[&v], 2, 1, &mut rng(0)),
            Err(MocaError::Config(_))
        ));
    }

    #[test]
    fn frozen_codebook_is_untouched() {
        let mut cb = Codebook::<f64>::random(8, 4, 0, &mut rng(3)).unwrap();
        let before = cb.clone();
        let v = Tensor::ones(vec![4, 4]);
        assert!(cb.enqueue(&[&v], 1, 9, &mut rng(0)).unwrap().is_empty());
        assert_eq!(cb, before);
    }

    #[test]
    fn bow_examples() {
        let q = Tensor::<f64>::from_fn(vec![9, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
        let y = reduce_bow(&q, (3, 3), 1).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 0.0]);

        let q = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = reduce_bow(&q, (1, 2), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        assert!(matches!(reduce_bow(&q, (1, 2), 1), Err(MocaError::Config(_))));
    }

    #[test]
    fn border_defaults() {
        assert_eq!(default_border((14, 14)), 2);
        assert_eq!(default_border((8, 8)), 2);
        assert_eq!(default_border((4, 4)), 1);
        assert_eq!(default_border((2, 2)), 0);
        assert_eq!(default_border((1, 1)), 0);
        // 14×14 with border 2 pools 100 positions: one-hot at position 100 → mass 1/100.
        let q = Tensor::<f64>::from_fn(vec![196, 2], |i| {
            let (r, c) = (i / 2 / 14, i / 2 % 14);
            let interior = (2..12).contains(&r) && (2..12).contains(&c);
            match (interior && r == 2 && c == 2, i % 2) {
                (true, 0) => 1.0,
                (true, _) => 0.0,
                (false, 0) => 0.0,
                (false, _) => 1.0,
            }
        });
        let y = reduce_bow(&q, (14, 14), 2).unwrap();
        assert!((y.data()[0] - 0.01).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn assignments_are_distributions_and_scale_invariant(
            seed in 0u64..1000, scale in 0.01f64..100.0, tau in 0.01f64..2.0
        ) {
            let mut r = rng(seed);
            let cb = Codebook::<f64>::random(12, 6, 2, &mut r).unwrap();
            let tok = init::gaussian::<f64>(vec![8, 6], &mut r);
            let q = assign(&cb.similarities(&tok).unwrap(), tau).unwrap();
            let qs = assign(&cb.similarities(&tok.map(|v| v * scale)).unwrap(), tau).unwrap();
            let qc = assign(&cb.similarities(&tok).unwrap(), tau * 0.1).unwrap();
            for row in 0..8 {
                let s: f64 = q.row(row).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-5);
                let am = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                prop_assert_eq!(am(q.row(row)), am(qc.row(row)));
                for (a, b) in q.row(row).iter().zip(qs.row(row)) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }
            let y = reduce_bow(&q, (2, 2), 0).unwrap();
            for row in 0..2 {
                let s: f64 = y.row(row).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-5);
            }
        }
    }
}
