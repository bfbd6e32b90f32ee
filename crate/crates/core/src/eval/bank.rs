use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{MocaError, Result};
use crate::numerics::{Scalar, Tensor};
use crate::pipeline::augment::center_crop;
use crate::pipeline::{ImageDataset, Moca};

/// Frozen global embeddings with labels. `normed` holds the L2-normalized
/// rows of `raw`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    pub raw: Tensor<f64>,
    pub normed: Tensor<f64>,
    pub labels: Vec<u32>,
}

const EXTRACT_CHUNK: usize = 64;
const BANK_MAGIC: &[u8; 4] = b"MEMB";

impl EmbeddingBank {
    pub fn new(raw: Tensor<f64>, labels: Vec<u32>) -> Result<Self> {
        if raw.ndim() != 2 || raw.rows() != labels.len() {
            return Err(MocaError::Contract(format!(
                "embeddings {:?} do not match {} labels",
                raw.shape(),
                labels.len()
            )));
        }
        let normed = raw.l2_normalize_rows(1e-12);
        Ok(EmbeddingBank { raw, normed, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.raw.last_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        EmbeddingBank::new(self.raw.select_rows(idx)?, labels)
    }

    /// `MEMB`, u32 count and width (LE), f32 rows, u32 labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * (self.raw.numel() + self.len()));
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &v in self.raw.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != BANK_MAGIC {
            return Err(MocaError::Format {
                offset: 0,
                msg: "not an embedding bank".into(),
            });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let (m, d) = (word(4) as usize, word(8) as usize);
        let need = 12 + 4 * (m * d + m);
        if bytes.len() != need {
            return Err(MocaError::Format {
                offset: bytes.len().min(need) as u64,
                msg: format!("expected {need} bytes for {m}×{d} embeddings, found {}", bytes.len()),
            });
        }
        let raw = (0..m * d).map(|i| f32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap()) as f64);
        let labels = (0..m).map(|i| word(12 + 4 * (m * d + i))).collect();
        EmbeddingBank::new(Tensor::new(vec![m, d], raw.collect())?, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MocaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| MocaError::io(path, e))?)
    }
}

/// Teacher [AVG] embedding of every image, center-cropped to the model's
/// input size.
pub fn extract_embeddings<T: Scalar>(model: &Moca<T>, ds: &ImageDataset) -> Result<EmbeddingBank> {
    let s = model.cfg.vit.image_size;
    let c = ds.dims().2;
    if c != model.cfg.vit.channels {
        return Err(MocaError::Config(format!(
            "dataset has {c} channels, model expects {}",
            model.cfg.vit.channels
        )));
    }
    let d = model.cfg.vit.d_enc;
    let starts: Vec<usize> = (0..ds.len()).step_by(EXTRACT_CHUNK).collect();
    let chunks: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&lo| -> Result<Vec<f64>> {
            let hi = (lo + EXTRACT_CHUNK).min(ds.len());
            let mut px = Vec::with_capacity((hi - lo) * s * s * c);
            for i in lo..hi {
                px.extend(center_crop(ds.image(i), s).into_iter().map(|v| T::of(v as f64)));
            }
            let emb = model.teacher_embed(&Tensor::new(vec![hi - lo, s, s, c], px)?)?;
            Ok(emb.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = chunks.concat();
    EmbeddingBank::new(Tensor::new(vec![ds.len(), d], data)?, ds.labels.clone())
}
