use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::augment::augment_two_views;
use super::config::TrainConfig;
use super::data::ImageDataset;
use super::metrics::MetricsWriter;
use super::model::{Moca, StepMetrics};
use super::optim::Schedule;
use super::rng::{augment_rng, shuffle_rng};
use crate::error::{MocaError, Result};
use crate::numerics::{Scalar, Tensor};

/// Where and how a pre-training run writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Metrics, resolved config and checkpoints go here when set.
    pub out_dir: Option<PathBuf>,
    /// Save `ckpt_epoch{e}.moca` every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Stop after this many total steps (the schedule still spans all epochs).
    pub max_steps: Option<u64>,
    /// Record `secs_per_step` as 0 so metrics files are bitwise comparable.
    pub deterministic: bool,
}

/// Full batches per epoch; the remainder is dropped.
pub fn steps_per_epoch(cfg: &TrainConfig, dataset_len: usize) -> u64 {
    (dataset_len / cfg.batch_size) as u64
}

pub fn schedule(cfg: &TrainConfig, dataset_len: usize) -> Schedule {
    let spe = steps_per_epoch(cfg, dataset_len);
    Schedule {
        peak: cfg.base_lr,
        warmup_steps: spe * cfg.warmup_epochs as u64,
        total_steps: spe * cfg.epochs as u64,
    }
}

/// Dataset indices of 0-based step `step`.
pub fn batch_indices(cfg: &TrainConfig, dataset_len: usize, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(cfg, dataset_len).max(1);
    let (epoch, k) = (step / spe, (step % spe) as usize);
    let mut order: Vec<usize> = (0..dataset_len).collect();
    order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
    order[k * cfg.batch_size..(k + 1) * cfg.batch_size].to_vec()
}

/// Two augmented view batches `[B, S, S, C]` for 0-based step `step`.
pub fn make_views<T: Scalar>(cfg: &TrainConfig, ds: &ImageDataset, idx: &[usize], step: u64) -> Result<[Tensor<T>; 2]> {
    let s = cfg.vit.image_size;
    let c = ds.dims().2;
    if c != cfg.vit.channels {
        return Err(MocaError::Config(format!(
            "dataset has {c} channels, model expects {}",
            cfg.vit.channels
        )));
    }
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = idx
        .par_iter()
        .enumerate()
        .map(|(j, &i)| augment_two_views(ds.image(i), s, &cfg.augment, &mut augment_rng(cfg.seed, step, j)))
        .collect();
    let mut a = Vec::with_capacity(idx.len() * s * s * c);
    let mut b = Vec::with_capacity(idx.len() * s * s * c);
    for (x, y) in pairs {
        a.extend(x.into_iter().map(|v| T::of(v as f64)));
        b.extend(y.into_iter().map(|v| T::of(v as f64)));
    }
    let shape = vec![idx.len(), s, s, c];
    Ok([Tensor::new(shape.clone(), a)?, Tensor::new(shape, b)?])
}

/// Continues training `model` from its current step to the end of the
/// configured epochs (or `max_steps`), calling `on_step` after every step.
pub fn pretrain<T: Scalar>(
    model: &mut Moca<T>,
    ds: &ImageDataset,
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    let cfg = model.cfg.clone();
    if ds.len() < cfg.batch_size {
        return Err(MocaError::Config(format!(
            "dataset of {} images is smaller than batch_size {}",
            ds.len(),
            cfg.batch_size
        )));
    }
    let spe = steps_per_epoch(&cfg, ds.len());
    let sched = schedule(&cfg, ds.len());
    let end = opts
        .max_steps
        .map_or(sched.total_steps, |m| m.min(sched.total_steps));

    let mut metrics = None;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| MocaError::io(dir, e))?;
        let resolved = dir.join("config.resolved.txt");
        fs::write(&resolved, cfg.to_text()).map_err(|e| MocaError::io(&resolved, e))?;
        metrics = Some(MetricsWriter::open(&dir.join("metrics.csv"))?);
    }

    let mut history = Vec::new();
    while model.step < end {
        let step = model.step;
        let idx = batch_indices(&cfg, ds.len(), step);
        let views = make_views(&cfg, ds, &idx, step)?;
        let mut m = model.train_step(views, &sched)?;
        m.epoch = step / spe;
        if opts.deterministic {
            m.secs = 0.0;
        }
        if let Some(w) = metrics.as_mut() {
            w.write(&m)?;
        }
        on_step(&m);
        history.push(m);

        let epoch_done = model.step % spe == 0;
        if let (Some(dir), true) = (&opts.out_dir, epoch_done && opts.checkpoint_every > 0) {
            let epoch = model.step / spe;
            if epoch % opts.checkpoint_every as u64 == 0 {
                if let Some(w) = metrics.as_mut() {
                    w.flush()?;
                }
                model.save(&dir.join(format!("ckpt_epoch{epoch}.moca")))?;
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &opts.out_dir {
        model.save(&dir.join("final.moca"))?;
    }
    Ok(history)
}
