//! Finite-difference check of the full training objective on a micro model.

use moca::params::check_param_gradients;
use moca::pipeline::{make_views, synthetic, Moca, TrainConfig};

fn main() -> moca::Result<()> {
    let cfg = TrainConfig::micro();
    let mut model = Moca::<f64>::new(cfg.clone())?;
    let ds = synthetic(cfg.batch_size, 2, cfg.vit.image_size, 7)?;
    let idx: Vec<usize> = (0..cfg.batch_size).collect();
    let views = make_views(&cfg, &ds, &idx, 0)?;
    let tp = model.teacher_pass(&views)?;
    let rounds = model.sample_round_plans(cfg.batch_size, &tp.targets)?;

    let reports = check_param_gradients(
        &[&model.student, &model.heads],
        |_, b| Ok(model.student_loss(&b[0], &b[1], &views, &tp.targets, &rounds)?.total),
        1e-5,
        4,
    )?;
    let mut worst = 0.0f64;
    for (name, r) in &reports {
        println!("{name:<40} checked {:>2}  rel {:.2e}", r.checked, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    println!("worst relative error {worst:.2e} over {} tensors", reports.len());
    Ok(())
}
