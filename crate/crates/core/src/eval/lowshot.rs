use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bank::EmbeddingBank;
use super::logreg::SoftmaxModel;
use crate::error::{MocaError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LowShotConfig {
    pub shots: usize,
    pub splits: usize,
    /// Candidate penalties, chosen once on the first split.
    pub l2_grid: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Held-out training items used to pick the penalty.
    pub val_size: usize,
    pub seed: u64,
}

impl Default for LowShotConfig {
    fn default() -> Self {
        LowShotConfig {
            shots: 1,
            splits: 3,
            l2_grid: vec![1e-4, 1e-3, 1e-2],
            tol: 1e-6,
            max_iter: 10_000,
            val_size: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowShotResult {
    pub shots: usize,
    pub l2: f64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over splits (0 for one split).
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub model: SoftmaxModel,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Minimizes mean cross-entropy + `l2/2·‖W‖²` by full-batch gradient
/// descent with step `1/L`, until the gradient norm drops below `tol`.
pub fn fit_logreg(x: &[f64], y: &[u32], dim: usize, classes: usize, l2: f64, tol: f64, max_iter: usize) -> Fit {
    let n = y.len();
    let rows: Vec<usize> = (0..n).collect();
    let sq: f64 = x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    let step = 1.0 / (0.5 * (sq + 1.0) + l2);
    let mut model = SoftmaxModel::zeros(classes, dim);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let (_, mut gw, gb) = model.loss_grad(x, y, &rows);
        for (g, w) in gw.iter_mut().zip(&model.w) {
            *g += l2 * w;
        }
        grad_norm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < tol {
            break;
        }
        for (w, g) in model.w.iter_mut().zip(&gw) {
            *w -= step * g;
        }
        for (b, g) in model.b.iter_mut().zip(&gb) {
            *b -= step * g;
        }
        iterations += 1;
    }
    Fit {
        model,
        iterations,
        grad_norm,
    }
}

/// `shots` distinct indices per class, classes in order.
pub fn sample_shots(labels: &[u32], classes: usize, shots: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(classes * shots);
    for c in 0..classes as u32 {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < shots {
            return Err(MocaError::Sampling(format!(
                "class {c} has {} items, {shots} shots requested",
                members.len()
            )));
        }
        out.extend(members.choose_multiple(rng, shots));
    }
    Ok(out)
}

fn gather(bank: &EmbeddingBank, idx: &[usize]) -> (Vec<f64>, Vec<u32>) {
    let x = idx.iter().flat_map(|&i| bank.normed.row(i).iter().copied()).collect();
    (x, idx.iter().map(|&i| bank.labels[i]).collect())
}

/// Few-shot classification of `test` from `shots` items per class of
/// `train`, on L2-normalized features, over `splits` random draws.
pub fn lowshot_logreg(train: &EmbeddingBank, test: &EmbeddingBank, cfg: &LowShotConfig) -> Result<LowShotResult> {
    if cfg.shots == 0 || cfg.splits == 0 || cfg.l2_grid.is_empty() {
        return Err(MocaError::Config(format!("invalid low-shot settings {cfg:?}")));
    }
    if train.dim() != test.dim() {
        return Err(MocaError::shape("lowshot_logreg", train.raw.shape(), test.raw.shape()));
    }
    let classes = train.num_classes();
    if cfg.shots * classes > train.len() {
        return Err(MocaError::Sampling(format!(
            "{} shots × {classes} classes exceed a bank of {}",
            cfg.shots,
            train.len()
        )));
    }
    let dim = train.dim();
    let (xt, yt) = gather(test, &(0..test.len()).collect::<Vec<_>>());
    let mut l2 = cfg.l2_grid[0];
    let mut accuracies = Vec::with_capacity(cfg.splits);
    for split in 0..cfg.splits {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1000).wrapping_add(split as u64));
        let picked = sample_shots(&train.labels, classes, cfg.shots, &mut rng)?;
        let (x, y) = gather(train, &picked);
        if split == 0 && cfg.l2_grid.len() > 1 {
            let mut rest: Vec<usize> = (0..train.len()).filter(|i| !picked.contains(i)).collect();
            rest.shuffle(&mut rng);
            rest.truncate(cfg.val_size);
            let (xv, yv) = gather(train, &rest);
            let mut best = f64::NEG_INFINITY;
            for &cand in &cfg.l2_grid {
                let acc = fit_logreg(&x, &y, dim, classes, cand, cfg.tol, cfg.max_iter).model.accuracy(&xv, &yv);
                if acc > best {
                    best = acc;
                    l2 = cand;
                }
            }
        }
        let fit = fit_logreg(&x, &y, dim, classes, l2, cfg.tol, cfg.max_iter);
        accuracies.push(fit.model.accuracy(&xt, &yt));
    }
    let k = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / k;
    let std = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(LowShotResult {
        shots: cfg.shots,
        l2,
        accuracies,
        mean,
        std,
    })
}
