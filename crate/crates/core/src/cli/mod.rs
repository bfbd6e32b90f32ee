//! Command-line front end: `pretrain`, `eval` and `ablate`.

mod data;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use data::{load, load_pretrain, DataSpec};

use crate::error::{MocaError, Result};
use crate::eval::{
    extract_embeddings, knn_classify, linear_probe, lowshot_logreg, EmbeddingBank, LowShotConfig, ProbeConfig, Voting,
    DEFAULT_K,
};
use crate::pipeline::metrics::append_result;
use crate::pipeline::{pretrain, Moca, RunOptions, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "moca", about = "Masked online-codebook pre-training and frozen-feature evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train a student/teacher pair and write checkpoints and metrics.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint's teacher with a frozen-feature protocol.
    Eval(EvalArgs),
    /// Train and k-NN-evaluate one run per grid value and seed.
    Ablate(AblateArgs),
}

/// The run configuration: `key = value` text plus `--set` overrides.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Config file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::parse(&fs::read_to_string(p).map_err(|e| MocaError::io(p, e))?)?,
            None => TrainConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| MocaError::Config(format!("override `{o}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn is_default(&self) -> bool {
        self.config.is_none() && self.overrides.is_empty() && self.seed.is_none()
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunConfig,
    /// CIFAR-10 directory, MIMG file or `synthetic:N[:classes[:size]]`.
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Write 0 for secs_per_step so metrics files compare bitwise.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Knn,
    Linear,
    Lowshot,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub protocol: Protocol,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: String,
    /// Validation images; defaults to the CIFAR test split or a held-out fifth.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Plain majority vote instead of similarity weighting.
    #[arg(long)]
    pub majority: bool,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.04)]
    pub lr: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 5])]
    pub shots: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub splits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append `protocol,config,seed,accuracy` rows here.
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Name for the config column; defaults to the checkpoint file stem.
    #[arg(long)]
    pub label: Option<String>,
    /// Also save the training-image embedding bank.
    #[arg(long)]
    pub export_bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunConfig,
    /// `lambda=1.0,0.5,0.0`, `ratio=0.55,0.75` or `condenser=on,off`; any
    /// config key works.
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub deterministic: bool,
}

/// Parses `key=v1,v2,...`.
pub fn parse_grid(grid: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = grid
        .split_once('=')
        .ok_or_else(|| MocaError::Config(format!("grid `{grid}` is not KEY=V1,V2,...")))?;
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(MocaError::Config(format!("grid `{grid}` has no values")));
    }
    Ok((k.trim().to_string(), values))
}

/// Caps rayon's pool at `MOCA_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MOCA_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| MocaError::Config(format!("MOCA_THREADS must be a positive integer, got `{v}`")))?;
        // A pool that already exists (tests, embedding) keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

fn progress(quiet: bool) -> impl FnMut(&crate::pipeline::StepMetrics) {
    move |m| {
        if !quiet && (m.step % 50 == 0 || m.step == 1) {
            eprintln!(
                "step {} epoch {} lr {:.3e} loss {:.4} (img {:.4}, loc {:.4}) tau_T {:.3}",
                m.step, m.epoch, m.lr, m.loss_total, m.loss_img, m.loss_loc, m.tau_t
            );
        }
    }
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<Moca<f32>> {
    let mut model = match &a.resume {
        Some(p) if a.run.is_default() => Moca::<f32>::load(p, None)?,
        Some(p) => Moca::<f32>::load(p, Some(&a.run.resolve()?))?,
        None => Moca::<f32>::new(a.run.resolve()?)?,
    };
    let ds = load_pretrain(&a.data, a.limit, model.cfg.seed)?;
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
        max_steps: a.max_steps,
        deterministic: a.deterministic,
    };
    pretrain(&mut model, &ds, &opts, progress(a.quiet))?;
    Ok(model)
}

fn fmt_acc(a: f64) -> String {
    format!("{:.2}", 100.0 * a)
}

/// Runs one protocol; returns the `(config, accuracy)` cells written.
pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<(String, String)>> {
    let model = Moca::<f32>::load(&a.ckpt, None)?;
    let data = load(&a.data, a.val.as_deref(), a.limit, model.cfg.seed)?;
    let (h, w, c) = data.train.dims();
    let s = model.cfg.vit.image_size;
    if c != model.cfg.vit.channels || h.min(w) < s {
        return Err(MocaError::Config(format!(
            "checkpoint expects {s}×{s}×{} inputs, data is {h}×{w}×{c}",
            model.cfg.vit.channels
        )));
    }
    let bank = extract_embeddings(&model, &data.train)?;
    if let Some(p) = &a.export_bank {
        bank.save(p)?;
    }
    let queries = extract_embeddings(&model, &data.val)?;
    let label = a.label.clone().unwrap_or_else(|| stem(&a.ckpt));
    let rows = run_protocol(a, &bank, &queries, &label)?;
    for (cfg, acc) in &rows {
        let proto = protocol_name(a.protocol);
        println!("{proto},{cfg},{},{acc}", a.seed);
        if let Some(p) = &a.results {
            append_result(p, proto, cfg, a.seed, acc)?;
        }
    }
    Ok(rows)
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Knn => "knn",
        Protocol::Linear => "linear",
        Protocol::Lowshot => "lowshot",
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn run_protocol(a: &EvalArgs, bank: &EmbeddingBank, queries: &EmbeddingBank, label: &str) -> Result<Vec<(String, String)>> {
    Ok(match a.protocol {
        Protocol::Knn => {
            let voting = if a.majority { Voting::Majority } else { Voting::Weighted };
            let r = knn_classify(bank, queries, a.k.min(bank.len()), voting)?;
            vec![(format!("{label}:k={}", a.k), fmt_acc(r.accuracy))]
        }
        Protocol::Linear => {
            let cfg = ProbeConfig {
                epochs: a.epochs,
                lr: a.lr,
                seed: a.seed,
                ..Default::default()
            };
            let r = linear_probe(bank, queries, &cfg)?;
            vec![(format!("{label}:epochs={}", a.epochs), fmt_acc(r.accuracy))]
        }
        Protocol::Lowshot => {
            let mut rows = Vec::new();
            for &shots in &a.shots {
                let cfg = LowShotConfig {
                    shots,
                    splits: a.splits,
                    seed: a.seed,
                    ..Default::default()
                };
                let r = lowshot_logreg(bank, queries, &cfg)?;
                rows.push((
                    format!("{label}:shots={shots}:l2={}", r.l2),
                    format!("{}±{}", fmt_acc(r.mean), fmt_acc(r.std)),
                ));
            }
            rows
        }
    })
}

/// One k-NN result per grid cell and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub key: String,
    pub value: String,
    pub seed: u64,
    pub accuracy: f64,
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<AblationRow>> {
    let (key, values) = parse_grid(&a.grid)?;
    let base = a.run.resolve()?;
    let mut cells = Vec::new();
    for v in &values {
        let mut cfg = base.clone();
        cfg.set(&key, v)?;
        cfg.validate()?;
        cells.push((v.clone(), cfg));
    }
    fs::create_dir_all(&a.out).map_err(|e| MocaError::io(&a.out, e))?;
    let results = a.out.join("ablation.csv");
    let mut rows = Vec::new();
    for &seed in &a.seeds {
        let data = load(&a.data, a.val.as_deref(), a.limit, seed)?;
        for (v, cfg) in &cells {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let dir = a.out.join(format!("{key}={v}")).join(format!("seed{seed}"));
            let mut model = Moca::<f32>::new(cfg)?;
            let opts = RunOptions {
                out_dir: Some(dir),
                checkpoint_every: 0,
                max_steps: a.max_steps,
                deterministic: a.deterministic,
            };
            pretrain(&mut model, &data.train, &opts, |_| {})?;
            let bank = extract_embeddings(&model, &data.train)?;
            let queries = extract_embeddings(&model, &data.val)?;
            let r = knn_classify(&bank, &queries, a.k.min(bank.len()), Voting::Weighted)?;
            let acc = fmt_acc(r.accuracy);
            println!("knn,{key}={v},{seed},{acc}");
            append_result(&results, "knn", &format!("{key}={v}"), seed, &acc)?;
            rows.push(AblationRow {
                key: key.clone(),
                value: v.clone(),
                seed,
                accuracy: r.accuracy,
            });
        }
    }
    for v in &values {
        let accs: Vec<f64> = rows.iter().filter(|r| &r.value == v).map(|r| r.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        eprintln!("{key}={v}: mean k-NN {} over {} seeds", fmt_acc(mean), accs.len());
    }
    Ok(rows)
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = init_threads().and_then(|_| match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(a).map(|_| ()),
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
