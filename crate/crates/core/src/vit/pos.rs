use crate::error::{MocaError, Result};
use crate::numerics::{Scalar, Tensor};

/// Fixed 2-D sine-cosine table of shape `[1 + rows·cols, d]`.
///
/// Row 0 is the global-token position and is all zeros. For patch `(r, c)`
/// (table row `1 + r·cols + c`) the first `d/2` channels encode `r` and the
/// last `d/2` encode `c`, each as `[sin(p·ω_k)…, cos(p·ω_k)…]` with
/// `ω_k = 10000^(−k/(d/4))`.
pub fn sincos_positions<T: Scalar>(grid: (usize, usize), d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(MocaError::Config(format!(
            "positional width {d} must be a positive multiple of 4"
        )));
    }
    let (rows, cols) = grid;
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut table = Tensor::zeros(vec![1 + rows * cols, d]);
    for r in 0..rows {
        for c in 0..cols {
            let out = table.row_mut(1 + r * cols + c);
            for (half, p) in [(0, r as f64), (1, c as f64)] {
                let base = half * 2 * quarter;
                for (k, w) in omega.iter().enumerate() {
                    out[base + k] = T::of((p * w).sin());
                    out[base + quarter + k] = T::of((p * w).cos());
                }
            }
        }
    }
    Ok(table)
}
