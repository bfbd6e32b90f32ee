use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bank::EmbeddingBank;
use super::logreg::SoftmaxModel;
use crate::error::{MocaError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    /// Desk scale: 50 epochs.
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            lr: 0.04,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub accuracy: f64,
}

/// Per-dimension mean and inverse std of the training features.
fn standardizer(bank: &EmbeddingBank) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (bank.len() as f64, bank.dim());
    let mut mean = vec![0.0; d];
    for i in 0..bank.len() {
        for (m, v) in mean.iter_mut().zip(bank.raw.row(i)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..bank.len() {
        for ((s, v), m) in var.iter_mut().zip(bank.raw.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let inv = var.into_iter().map(|v| 1.0 / (v.sqrt() + 1e-6)).collect();
    (mean, inv)
}

fn standardized(bank: &EmbeddingBank, mean: &[f64], inv: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(bank.raw.numel());
    for i in 0..bank.len() {
        out.extend(bank.raw.row(i).iter().zip(mean).zip(inv).map(|((v, m), s)| (v - m) * s));
    }
    out
}

/// Trains a linear classifier on frozen, standardized features with
/// momentum SGD and a per-iteration cosine schedule.
pub fn linear_probe(train: &EmbeddingBank, val: &EmbeddingBank, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.is_empty() || train.dim() != val.dim() {
        return Err(MocaError::Contract(format!(
            "probe banks {:?} and {:?} are incompatible",
            train.raw.shape(),
            val.raw.shape()
        )));
    }
    let (mean, inv) = standardizer(train);
    let xt = standardized(train, &mean, &inv);
    let xv = standardized(val, &mean, &inv);
    let classes = train.num_classes().max(val.num_classes());
    let mut model = SoftmaxModel::zeros(classes, train.dim());
    let mut vel_w = vec![0.0; model.w.len()];
    let mut vel_b = vec![0.0; classes];
    let bs = cfg.batch_size.clamp(1, train.len());
    let per_epoch = train.len().div_ceil(bs);
    let total = (per_epoch * cfg.epochs).max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut it = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(bs) {
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * it as f64 / total).cos());
            let (_, gw, gb) = model.loss_grad(&xt, &train.labels, rows);
            for ((w, v), g) in model.w.iter_mut().zip(vel_w.iter_mut()).zip(gw) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
                *w -= lr * *v;
            }
            for ((b, v), g) in model.b.iter_mut().zip(vel_b.iter_mut()).zip(gb) {
                *v = cfg.momentum * *v + g;
                *b -= lr * *v;
            }
            it += 1;
        }
    }
    Ok(ProbeResult {
        train_accuracy: model.accuracy(&xt, &train.labels),
        accuracy: model.accuracy(&xv, &val.labels),
    })
}
