use std::path::Path;

use crate::error::{MocaError, Result};
use crate::pipeline::data::load_cifar10;
use crate::pipeline::{read_mimg, synthetic, ImageDataset, Split};

/// Training and validation images named by a `--data` argument:
/// a CIFAR-10 binary directory, a MIMG file, or `synthetic:N[:classes[:size]]`.
pub struct DataSpec {
    pub train: ImageDataset,
    pub val: ImageDataset,
}

const HOLDOUT_EVERY: usize = 5;

/// Every fifth image becomes validation.
fn holdout(ds: &ImageDataset) -> Result<(ImageDataset, ImageDataset)> {
    let (tr, va): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|i| i % HOLDOUT_EVERY != HOLDOUT_EVERY - 1);
    Ok((ds.subset(&tr)?, ds.subset(&va)?))
}

fn synthetic_spec(spec: &str, seed: u64) -> Result<ImageDataset> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |i: usize, default: usize| -> Result<usize> {
        parts.get(i).map_or(Ok(default), |s| {
            s.parse()
                .map_err(|_| MocaError::Config(format!("bad synthetic data spec `synthetic:{spec}`")))
        })
    };
    synthetic(num(0, 1000)?, num(1, 10)?, num(2, 32)?, seed)
}

pub fn load(data: &str, val: Option<&Path>, limit: Option<usize>, seed: u64) -> Result<DataSpec> {
    let cap = |ds: ImageDataset| match limit {
        Some(n) if n < ds.len() => ds.take(n),
        _ => Ok(ds),
    };
    let (train, held) = if let Some(spec) = data.strip_prefix("synthetic:") {
        let all = synthetic_spec(spec, seed)?;
        holdout(&all)?
    } else {
        let path = Path::new(data);
        if path.is_dir() {
            let train = load_cifar10(path, Split::Train)?;
            let test = load_cifar10(path, Split::Test)?;
            (train, test)
        } else {
            let all = read_mimg(path)?;
            holdout(&all)?
        }
    };
    let val = match val {
        Some(p) if p.is_dir() => load_cifar10(p, Split::Test)?,
        Some(p) => read_mimg(p)?,
        None => held,
    };
    Ok(DataSpec {
        train: cap(train)?,
        val,
    })
}

/// The training part of `data` (the same images eval treats as the bank).
pub fn load_pretrain(data: &str, limit: Option<usize>, seed: u64) -> Result<ImageDataset> {
    Ok(load(data, None, limit, seed)?.train)
}
