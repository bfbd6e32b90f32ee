//! Frozen-feature evaluation of the teacher encoder.

pub mod bank;
pub mod knn;
pub mod linear;
pub mod logreg;
pub mod lowshot;

pub use bank::{extract_embeddings, EmbeddingBank};
pub use knn::{knn_classify, KnnResult, Voting, DEFAULT_K, KNN_TEMPERATURE};
pub use linear::{linear_probe, ProbeConfig, ProbeResult};
pub use logreg::SoftmaxModel;
pub use lowshot::{fit_logreg, lowshot_logreg, sample_shots, LowShotConfig, LowShotResult};

#[cfg(test)]
mod tests;
