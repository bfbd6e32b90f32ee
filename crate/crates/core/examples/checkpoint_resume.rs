//! Interrupt a run, save, reload and continue; the result matches the
//! uninterrupted run bit for bit.

use moca::pipeline::{pretrain, synthetic, Moca, RunOptions, TrainConfig};

fn main() -> moca::Result<()> {
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::micro()
    };
    let ds = synthetic(8, 2, 4, 0)?;
    let opts = RunOptions {
        deterministic: true,
        ..Default::default()
    };

    let mut straight = Moca::<f32>::new(cfg.clone())?;
    pretrain(&mut straight, &ds, &opts, |_| {})?;

    let mut first = Moca::<f32>::new(cfg.clone())?;
    let half = RunOptions {
        max_steps: Some(17),
        ..opts.clone()
    };
    pretrain(&mut first, &ds, &half, |_| {})?;
    let path = std::env::temp_dir().join("moca_resume_example.moca");
    first.save(&path)?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("saved step {} to {} ({size} bytes)", first.step, path.display());

    let mut resumed = Moca::<f32>::load(&path, Some(&cfg))?;
    pretrain(&mut resumed, &ds, &opts, |_| {})?;
    println!(
        "resumed to step {}; identical to the straight run: {}",
        resumed.step,
        resumed.to_bytes() == straight.to_bytes()
    );

    let mut other = cfg.clone();
    other.vit.d_enc = 16;
    match Moca::<f32>::load(&path, Some(&other)) {
        Err(e) => {
            let msg = e.to_string();
            let lines: Vec<&str> = msg.lines().collect();
            println!("loading into a wider model fails (exit code {}):", e.exit_code());
            for l in lines.iter().take(4) {
                println!("{l}");
            }
            println!("  ... {} more", lines.len().saturating_sub(4));
        }
        Ok(_) => println!("unexpected: mismatched load succeeded"),
    }
    Ok(())
}
