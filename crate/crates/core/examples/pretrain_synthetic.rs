//! Short pre-training run on synthetic class-structured images, then k-NN
//! of the trained teacher against a freshly initialised one.

use moca::eval::{extract_embeddings, knn_classify, Voting};
use moca::pipeline::{pretrain, synthetic, Moca, RunOptions, TrainConfig};

fn main() -> moca::Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.vit.image_size = 16;
    cfg.vit.depth = 3;
    cfg.vit.tap_layer = 2;
    cfg.vit.d_enc = 64;
    cfg.vit.d_dec = 32;
    cfg.vit.dec_depth = 1;
    cfg.codebook_size = 128;
    cfg.batch_size = 32;
    cfg.epochs = 4;
    cfg.warmup_epochs = 1;
    cfg.base_lr = 5e-4;

    // Class patterns come from the seed, so both splits share one draw.
    let all = synthetic(384, 4, 16, 0)?;
    let train = all.take(256)?;
    let test = all.subset(&(256..384).collect::<Vec<_>>())?;
    let random = Moca::<f32>::new(cfg.clone())?;
    let mut model = Moca::<f32>::new(cfg)?;
    let out = std::env::temp_dir().join("moca_pretrain_synthetic");
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        checkpoint_every: 2,
        ..Default::default()
    };
    pretrain(&mut model, &train, &opts, |m| {
        if m.step % 8 == 0 {
            println!("step {:>3} loss {:.4} img {:.4} loc {:.4} tau_T {:.3}", m.step, m.loss_total, m.loss_img, m.loss_loc, m.tau_t);
        }
    })?;
    for (name, m) in [("random", &random), ("trained", &model)] {
        let bank = extract_embeddings(m, &train)?;
        let q = extract_embeddings(m, &test)?;
        let acc = knn_classify(&bank, &q, 20, Voting::Weighted)?.accuracy;
        println!("{name} teacher k-NN {:.1}%", 100.0 * acc);
    }
    println!("outputs in {}", out.display());
    Ok(())
}
