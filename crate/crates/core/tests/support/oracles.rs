//! Brute-force references. Nothing here calls into the crate beyond `Tensor`.
#![allow(dead_code)]

use std::collections::VecDeque;

/// Plain FIFO list of `(vector, step)` pairs, oldest first.
pub struct ListQueue {
    pub items: VecDeque<(Vec<f64>, u64)>,
}

impl ListQueue {
    pub fn new(initial: Vec<Vec<f64>>) -> Self {
        ListQueue {
            items: initial.into_iter().map(|v| (v, 0)).collect(),
        }
    }

    pub fn insert(&mut self, batch: &[Vec<f64>], step: u64) {
        for v in batch {
            self.items.pop_front();
            self.items.push_back((v.clone(), step));
        }
    }
}

/// Row-wise `softmax(x/τ)` and mean `-Σ t log p`, straight from the formula.
pub fn softmax_ce(logits: &[Vec<f64>], targets: &[Vec<f64>], tau: f64) -> (Vec<Vec<f64>>, f64) {
    let mut probs = Vec::new();
    let mut ce = 0.0;
    for (x, t) in logits.iter().zip(targets) {
        let e: Vec<f64> = x.iter().map(|v| (v / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / z).collect();
        ce -= t.iter().zip(&p).map(|(ti, pi)| ti * pi.ln()).sum::<f64>();
        probs.push(p);
    }
    (probs, ce / logits.len() as f64)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Exhaustive cosine k-NN: full sort by (similarity desc, index asc), then
/// `exp(s/0.07)` or unit votes; ties to the lowest class.
pub fn knn(bank: &[Vec<f64>], labels: &[u32], queries: &[Vec<f64>], k: usize, weighted: bool) -> Vec<u32> {
    let classes = labels.iter().max().map_or(1, |&m| m as usize + 1);
    let normed: Vec<Vec<f64>> = bank.iter().map(|v| unit(v)).collect();
    queries
        .iter()
        .map(|q| {
            let q = unit(q);
            let mut all: Vec<(usize, f64)> = normed
                .iter()
                .enumerate()
                .map(|(i, b)| (i, b.iter().zip(&q).map(|(x, y)| x * y).sum()))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut votes = vec![0.0; classes];
            for &(i, s) in &all[..k] {
                votes[labels[i] as usize] += if weighted { (s / 0.07).exp() } else { 1.0 };
            }
            let mut best = 0;
            for c in 0..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// Multinomial logistic regression with penalty `l2/2·‖W‖²` (bias free),
/// solved by damped Newton steps on the full parameter vector.
/// Returns `(W [classes][dim], b [classes])`.
pub fn newton_logreg(x: &[Vec<f64>], y: &[u32], classes: usize, l2: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = x[0].len();
    let p = classes * (d + 1);
    let mut theta = vec![0.0; p];
    let feat = |xi: &[f64], j: usize| if j < d { xi[j] } else { 1.0 };
    for _ in 0..100 {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        let n = x.len() as f64;
        for (xi, &yi) in x.iter().zip(y) {
            let z: Vec<f64> = (0..classes)
                .map(|c| (0..=d).map(|j| theta[c * (d + 1) + j] * feat(xi, j)).sum())
                .collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let pr: Vec<f64> = e.iter().map(|v| v / s).collect();
            for c in 0..classes {
                let r = pr[c] - if c == yi as usize { 1.0 } else { 0.0 };
                for j in 0..=d {
                    g[c * (d + 1) + j] += r * feat(xi, j) / n;
                    for c2 in 0..classes {
                        let w = pr[c] * (if c == c2 { 1.0 } else { 0.0 } - pr[c2]);
                        for j2 in 0..=d {
                            h[c * (d + 1) + j][c2 * (d + 1) + j2] += w * feat(xi, j) * feat(xi, j2) / n;
                        }
                    }
                }
            }
        }
        for c in 0..classes {
            for j in 0..d {
                let i = c * (d + 1) + j;
                g[i] += l2 * theta[i];
                h[i][i] += l2;
            }
        }
        for (i, row) in h.iter_mut().enumerate() {
            row[i] += 1e-12;
        }
        let step = solve(h, g.clone());
        for (t, s) in theta.iter_mut().zip(&step) {
            *t -= s;
        }
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
            break;
        }
    }
    let w = (0..classes).map(|c| theta[c * (d + 1)..c * (d + 1) + d].to_vec()).collect();
    let b = (0..classes).map(|c| theta[c * (d + 1) + d]).collect();
    (w, b)
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}
