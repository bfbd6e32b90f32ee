use rayon::prelude::*;

use super::bank::EmbeddingBank;
use crate::error::{MocaError, Result};

pub const KNN_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_K: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Voting {
    /// Each neighbor votes `exp(sim / 0.07)`.
    Weighted,
    Majority,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub predictions: Vec<u32>,
    pub accuracy: f64,
}

/// Indices of the `k` most cosine-similar bank rows, best first; equal
/// similarities keep the lower index first.
pub fn nearest(bank: &EmbeddingBank, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut sims: Vec<(usize, f64)> = (0..bank.len())
        .map(|i| (i, bank.normed.row(i).iter().zip(query).map(|(a, b)| a * b).sum()))
        .collect();
    let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < sims.len() {
        sims.select_nth_unstable_by(k, by_rank);
        sims.truncate(k);
    }
    sims.sort_by(by_rank);
    sims
}

/// Class with the largest vote; ties go to the lowest class id.
pub fn vote(labels: &[u32], neighbors: &[(usize, f64)], classes: usize, voting: Voting) -> u32 {
    let mut score = vec![0.0f64; classes.max(1)];
    for &(i, s) in neighbors {
        score[labels[i] as usize] += match voting {
            Voting::Weighted => (s / KNN_TEMPERATURE).exp(),
            Voting::Majority => 1.0,
        };
    }
    let mut best = 0;
    for (c, &v) in score.iter().enumerate() {
        if v > score[best] {
            best = c;
        }
    }
    best as u32
}

/// Classifies each query row of `queries` from its `k` nearest bank items.
/// Accuracy is measured against the query labels.
pub fn knn_classify(bank: &EmbeddingBank, queries: &EmbeddingBank, k: usize, voting: Voting) -> Result<KnnResult> {
    if bank.is_empty() {
        return Err(MocaError::Contract("k-NN needs a non-empty bank".into()));
    }
    if k == 0 || k > bank.len() {
        return Err(MocaError::Contract(format!("k = {k} with a bank of {}", bank.len())));
    }
    if queries.dim() != bank.dim() {
        return Err(MocaError::shape("knn_classify", bank.raw.shape(), queries.raw.shape()));
    }
    let classes = bank.num_classes().max(queries.num_classes());
    let predictions: Vec<u32> = (0..queries.len())
        .into_par_iter()
        .map(|q| vote(&bank.labels, &nearest(bank, queries.normed.row(q), k), classes, voting))
        .collect();
    let correct = predictions.iter().zip(&queries.labels).filter(|(p, l)| p == l).count();
    Ok(KnnResult {
        accuracy: correct as f64 / queries.len().max(1) as f64,
        predictions,
    })
}
