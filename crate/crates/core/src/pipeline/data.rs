use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::ImageRef;
use crate::error::{MocaError, Result};
use crate::numerics::Tensor;

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Images in `[0, 1]`, `[M, H, W, C]`, with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
}

impl ImageDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u32>) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(MocaError::Contract(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(ImageDataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn image(&self, i: usize) -> ImageRef<'_> {
        let (h, w, c) = self.dims();
        let n = h * w * c;
        ImageRef {
            data: &self.images.data()[i * n..(i + 1) * n],
            h,
            w,
            c,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let (h, w, c) = self.dims();
        let n = h * w * c;
        let mut data = Vec::with_capacity(idx.len() * n);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(MocaError::Contract(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(self.image(i).data);
            labels.push(self.labels[i]);
        }
        ImageDataset::new(Tensor::new(vec![idx.len(), h, w, c], data)?, labels)
    }

    /// The first `n` items (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Reads one CIFAR-10 binary batch file.
pub fn read_cifar10_file(path: &Path) -> Result<ImageDataset> {
    let bytes = fs::read(path).map_err(|e| MocaError::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Parses concatenated 3073-byte records: label byte, then R, G and B planes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<ImageDataset> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(MocaError::Format {
            offset: whole as u64,
            msg: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    let m = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut data = vec![0f32; m * plane * 3];
    let mut labels = Vec::with_capacity(m);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(MocaError::Format {
                offset: (r * CIFAR_RECORD) as u64,
                msg: format!("label {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as u32);
        let out = &mut data[r * plane * 3..(r + 1) * plane * 3];
        for ch in 0..3 {
            for (p, &v) in rec[1 + ch * plane..1 + (ch + 1) * plane].iter().enumerate() {
                out[p * 3 + ch] = v as f32 / 255.0;
            }
        }
    }
    ImageDataset::new(Tensor::new(vec![m, CIFAR_SIDE, CIFAR_SIDE, 3], data)?, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads a CIFAR-10 split from the standard binary directory
/// (`data_batch_1.bin` … `data_batch_5.bin`, `test_batch.bin`), or a single
/// batch file when `path` is a file.
pub fn load_cifar10(path: &Path, split: Split) -> Result<ImageDataset> {
    if path.is_file() {
        return read_cifar10_file(path);
    }
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![path.join("test_batch.bin")],
    };
    let files: Vec<PathBuf> = files.into_iter().filter(|f| f.is_file()).collect();
    if files.is_empty() {
        return Err(MocaError::Format {
            offset: 0,
            msg: format!("no CIFAR-10 {split:?} batches under {}", path.display()),
        });
    }
    let parts = files.iter().map(|f| read_cifar10_file(f)).collect::<Result<Vec<_>>>()?;
    concat(&parts)
}

pub fn concat(parts: &[ImageDataset]) -> Result<ImageDataset> {
    let first = parts
        .first()
        .ok_or_else(|| MocaError::Contract("nothing to concatenate".into()))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.dims() != (h, w, c) {
            return Err(MocaError::Contract("datasets differ in image size".into()));
        }
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    ImageDataset::new(Tensor::new(vec![labels.len(), h, w, c], data)?, labels)
}

const MIMG_MAGIC: &[u8; 4] = b"MIMG";

/// Raw container: `MIMG`, u32 count/H/W/C (LE), u8 pixels row-major, u8 labels.
pub fn write_mimg(path: &Path, ds: &ImageDataset) -> Result<()> {
    let (h, w, c) = ds.dims();
    let mut out = Vec::with_capacity(20 + ds.images.numel() + ds.len());
    out.extend_from_slice(MIMG_MAGIC);
    for v in [ds.len(), h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(ds.images.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    for &l in &ds.labels {
        let l = u8::try_from(l).map_err(|_| MocaError::Contract(format!("label {l} does not fit in a byte")))?;
        out.push(l);
    }
    let mut f = fs::File::create(path).map_err(|e| MocaError::io(path, e))?;
    f.write_all(&out).map_err(|e| MocaError::io(path, e))
}

pub fn read_mimg(path: &Path) -> Result<ImageDataset> {
    let bytes = fs::read(path).map_err(|e| MocaError::io(path, e))?;
    parse_mimg(&bytes)
}

pub fn parse_mimg(bytes: &[u8]) -> Result<ImageDataset> {
    if bytes.len() < 4 || &bytes[..4] != MIMG_MAGIC {
        return Err(MocaError::Format {
            offset: 0,
            msg: "missing MIMG magic".into(),
        });
    }
    if bytes.len() < 20 {
        return Err(MocaError::Format {
            offset: bytes.len() as u64,
            msg: "header ends early".into(),
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (m, h, w, c) = (field(0), field(1), field(2), field(3));
    let npix = m * h * w * c;
    let need = 20 + npix + m;
    if bytes.len() != need {
        return Err(MocaError::Format {
            offset: bytes.len().min(need) as u64,
            msg: format!("expected {need} bytes for {m} images of {h}×{w}×{c}, found {}", bytes.len()),
        });
    }
    let data = bytes[20..20 + npix].iter().map(|&b| b as f32 / 255.0).collect();
    let labels = bytes[20 + npix..].iter().map(|&b| b as u32).collect();
    ImageDataset::new(Tensor::new(vec![m, h, w, c], data)?, labels)
}

/// Class-structured synthetic images: each class owns a smooth colour
/// pattern; samples shift it, rescale its contrast and add pixel noise.
pub fn synthetic(n: usize, classes: usize, size: usize, seed: u64) -> Result<ImageDataset> {
    if classes == 0 {
        return Err(MocaError::Config("synthetic data needs at least one class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<Vec<(f32, f32, f32, [f32; 3])>> = (0..classes)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let fy = rng.gen_range(0.5..3.0f32);
                    let fx = rng.gen_range(0.5..3.0f32);
                    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
                    let colour = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                    (fy, fx, phase, colour)
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * size * size * 3);
    let mut labels = Vec::with_capacity(n);
    let tau = std::f32::consts::TAU;
    for i in 0..n {
        let class = i % classes;
        let dy = rng.gen_range(0.0..1.0f32);
        let dx = rng.gen_range(0.0..1.0f32);
        let gain = rng.gen_range(0.15..0.3f32);
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f32 / size as f32 + dy, x as f32 / size as f32 + dx);
                let mut rgb = [0.5f32; 3];
                for &(fy, fx, ph, col) in &waves[class] {
                    let s = (tau * (fy * py + fx * px) + ph).sin();
                    for ch in 0..3 {
                        rgb[ch] += gain * col[ch] * s;
                    }
                }
                for v in rgb {
                    data.push((v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class as u32);
    }
    ImageDataset::new(Tensor::new(vec![n, size, size, 3], data)?, labels)
}
