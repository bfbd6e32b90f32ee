/// Multinomial logistic regression on row-major features `[n, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxModel {
    pub classes: usize,
    pub dim: usize,
    /// `[classes, dim]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl SoftmaxModel {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        SoftmaxModel {
            classes,
            dim,
            w: vec![0.0; classes * dim],
            b: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| self.b[c] + self.w[c * self.dim..(c + 1) * self.dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Arg-max class; ties go to the lowest id.
    pub fn predict(&self, x: &[f64]) -> u32 {
        let z = self.logits(x);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best as u32
    }

    pub fn accuracy(&self, x: &[f64], y: &[u32]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let hits = y
            .iter()
            .enumerate()
            .filter(|&(i, &l)| self.predict(&x[i * self.dim..(i + 1) * self.dim]) == l)
            .count();
        hits as f64 / y.len() as f64
    }

    /// Mean cross-entropy over `rows` and its gradient `(gw, gb)`.
    pub fn loss_grad(&self, x: &[f64], y: &[u32], rows: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.w.len()];
        let mut gb = vec![0.0; self.classes];
        let mut loss = 0.0;
        let inv = 1.0 / rows.len().max(1) as f64;
        for &i in rows {
            let xi = &x[i * self.dim..(i + 1) * self.dim];
            let z = self.logits(xi);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let yi = y[i] as usize;
            loss += (s.ln() + m - z[yi]) * inv;
            for c in 0..self.classes {
                let g = (e[c] / s - f64::from(u8::from(c == yi))) * inv;
                gb[c] += g;
                for (gw, v) in gw[c * self.dim..(c + 1) * self.dim].iter_mut().zip(xi) {
                    *gw += g * v;
                }
            }
        }
        (loss, gw, gb)
    }
}
