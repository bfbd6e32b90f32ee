use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{AdamW, Schedule};
use super::rng::{stream_at, Stream};
use crate::codebook::{default_border, AssignmentBatch, Codebook, TemperatureState};
use crate::error::{MocaError, Result};
use crate::masking::{sample_plans, second_round, DecoderEmbed, MaskPlan, RoundSpec};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::objectives::{ema_update, loss_img, loss_loc, token_logits, total_loss, GlobalToken};
use crate::params::{Bound, ParamStore};
use crate::prototypes::Generator;
use crate::vit::{Decoder, Encoder};

/// Complete training state: student, teacher, heads, codebook, optimizer
/// and the sequential random streams.
#[derive(Clone, Debug)]
pub struct Moca<T> {
    pub cfg: TrainConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub embed: DecoderEmbed,
    pub gen_b: Generator,
    pub gen_d: Generator,
    /// Student encoder parameters.
    pub student: ParamStore<T>,
    /// Decoder, decoder embedding and generator parameters.
    pub heads: ParamStore<T>,
    /// EMA copy of `student`.
    pub teacher: ParamStore<T>,
    pub codebook: Codebook<T>,
    pub temperature: TemperatureState,
    pub opt: AdamW<T>,
    pub mask_rng: ChaCha8Rng,
    pub codebook_rng: ChaCha8Rng,
    /// Optimizer steps completed.
    pub step: u64,
}

/// Teacher outputs for both full views of a batch.
#[derive(Clone, Debug)]
pub struct TeacherPass<T> {
    /// Final-layer patch tokens, `[B·N, d_enc]` per view.
    pub tokens: [Tensor<T>; 2],
    /// Similarities to the codebook, `[B·N, K]` per view.
    pub sims: [Tensor<T>; 2],
    pub targets: [AssignmentBatch<T>; 2],
}

/// Mask plans of one round: one plan per image, per view.
pub type RoundPlans = [Vec<MaskPlan>; 2];

pub struct LossParts<'t, T> {
    pub total: Var<'t, T>,
    /// Round-averaged components.
    pub img: f64,
    pub loc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_img: f64,
    pub loss_loc: f64,
    pub tau_t: f64,
    pub secs: f64,
}

impl<T: Scalar> Moca<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = stream_at(cfg.seed, Stream::Init, 0);
        let mut student = ParamStore::new();
        let encoder = Encoder::new(&cfg.vit, &mut student, &mut init)?;
        let mut heads = ParamStore::new();
        let embed = DecoderEmbed::new(&cfg.vit, cfg.condenser, &mut heads, &mut init)?;
        let decoder = Decoder::new(&cfg.vit, &mut heads, &mut init);
        let gen_b = Generator::new(&mut heads, "gen_b", cfg.vit.d_enc, cfg.vit.d_enc, &mut init);
        let gen_d = Generator::new(&mut heads, "gen_d", cfg.vit.d_enc, cfg.vit.d_dec, &mut init);
        let codebook = Codebook::random(cfg.codebook_size, cfg.vit.d_enc, cfg.codebook_new_words, &mut init)?;
        let opt = AdamW::new(&[&student, &heads], cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        let temperature = TemperatureState {
            msd_ema: cfg.msd_init,
            momentum: cfg.msd_momentum,
            floor: cfg.msd_floor,
        };
        Ok(Moca {
            teacher: student.clone(),
            mask_rng: stream_at(cfg.seed, Stream::Mask, 0),
            codebook_rng: stream_at(cfg.seed, Stream::Codebook, 0),
            cfg,
            encoder,
            decoder,
            embed,
            gen_b,
            gen_d,
            student,
            heads,
            codebook,
            temperature,
            opt,
            step: 0,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.cfg.vit.num_patches()
    }

    pub fn bow_border(&self) -> usize {
        self.cfg.bow_border.unwrap_or_else(|| default_border(self.cfg.vit.grid()))
    }

    /// Teacher forward on both full views, then assignments and BoW targets
    /// at the current temperature.
    pub fn teacher_pass(&self, views: &[Tensor<T>; 2]) -> Result<TeacherPass<T>> {
        let tape = Tape::no_grad();
        let p = self.teacher.bind_frozen(&tape);
        let tau = self.temperature.tau();
        let (grid, border) = (self.cfg.vit.grid(), self.bow_border());
        let run = |v: &Tensor<T>| -> Result<(Tensor<T>, Tensor<T>, AssignmentBatch<T>)> {
            let out = self.encoder.encode_full(&p, v)?;
            let tokens = (*out.final_tokens.value()).clone();
            let sims = self.codebook.similarities(&tokens)?;
            let targets = AssignmentBatch::compute(&sims, tau, grid, border)?;
            Ok((tokens, sims, targets))
        };
        let (t0, s0, a0) = run(&views[0])?;
        let (t1, s1, a1) = run(&views[1])?;
        Ok(TeacherPass {
            tokens: [t0, t1],
            sims: [s0, s1],
            targets: [a0, a1],
        })
    }

    fn round_specs(&self) -> Vec<RoundSpec> {
        std::iter::once(self.cfg.mask_ratio_1)
            .chain(self.cfg.mask_ratio_2)
            .map(|ratio| RoundSpec {
                ratio,
                dec_fraction: self.cfg.dec_fraction,
            })
            .collect()
    }

    /// Draws the masks of every round for both views from the mask stream.
    /// Round 2 reuses the round-1 targets, so only plans are drawn.
    pub fn sample_round_plans(&mut self, batch: usize, targets: &[AssignmentBatch<T>; 2]) -> Result<Vec<RoundPlans>> {
        let n = self.num_patches();
        let specs = self.round_specs();
        let mut rounds = Vec::with_capacity(specs.len());
        let v0 = sample_plans(batch, n, specs[0], 1, &mut self.mask_rng)?;
        let v1 = sample_plans(batch, n, specs[0], 1, &mut self.mask_rng)?;
        rounds.push([v0, v1]);
        if let Some(&spec) = specs.get(1) {
            let (v0, _) = second_round(batch, n, spec, targets, &mut self.mask_rng)?;
            let (v1, _) = second_round(batch, n, spec, targets, &mut self.mask_rng)?;
            rounds.push([v0, v1]);
        }
        Ok(rounds)
    }

    /// The student objective for one step, averaged over masking rounds.
    pub fn student_loss<'t>(
        &self,
        s: &Bound<'t, T>,
        h: &Bound<'t, T>,
        views: &[Tensor<T>; 2],
        targets: &[AssignmentBatch<T>; 2],
        rounds: &[RoundPlans],
    ) -> Result<LossParts<'t, T>> {
        if rounds.is_empty() {
            return Err(MocaError::Contract("no masking rounds".into()));
        }
        let entries = self.codebook.entries();
        let w_b = self.gen_b.generate(h, entries)?;
        let w_d = self.gen_d.generate(h, entries)?;
        let seqs = [self.encoder.patchify(s, &views[0])?, self.encoder.patchify(s, &views[1])?];
        let n = self.num_patches();
        let lc = &self.cfg.loss;
        let tape = w_b.tape();

        let mut totals = Vec::with_capacity(rounds.len());
        let (mut img_sum, mut loc_sum) = (0.0, 0.0);
        for round in rounds {
            let mut global_logits = Vec::with_capacity(2);
            let mut token_terms: Vec<(Var<'t, T>, Tensor<T>)> = Vec::with_capacity(2);
            for v in 0..2 {
                let plans = &round[v];
                let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.u.clone()).collect();
                let out = self.encoder.encode(s, &seqs[v], &visible)?;
                let global = match lc.global {
                    GlobalToken::Avg => out.avg,
                    GlobalToken::Cls => out.cls,
                };
                global_logits.push(global.matmul_nt(w_b)?);

                let di = self.embed.build(h, &out, plans)?;
                let dec = self.decoder.decode(h, di.z, di.slots)?;
                let mut rows = Vec::new();
                let mut target_rows = Vec::new();
                for (b, plan) in plans.iter().enumerate() {
                    for (j, &i) in plan.m_dec.iter().enumerate() {
                        rows.push(di.dec_row(b, j));
                        target_rows.push(b * n + i);
                    }
                    if lc.loss_on_visible {
                        for (j, &i) in plan.u.iter().enumerate() {
                            rows.push(di.visible_row(b, j));
                            target_rows.push(b * n + i);
                        }
                    }
                }
                if !rows.is_empty() {
                    let logits = token_logits(dec.select_rows(&rows)?, w_d)?;
                    token_terms.push((logits, targets[v].q.select_rows(&target_rows)?));
                }
            }
            let l_img = loss_img(
                [global_logits[0], global_logits[1]],
                [&targets[0].y, &targets[1].y],
                lc.tau_b,
            )?;
            let l_loc = if token_terms.is_empty() {
                tape.constant(Tensor::scalar(T::zero()))
            } else {
                let terms: Vec<(Var<'t, T>, &Tensor<T>)> = token_terms.iter().map(|(l, t)| (*l, t)).collect();
                loss_loc(&terms, lc.tau_d)?
            };
            img_sum += to_f64(l_img.value().item());
            loc_sum += to_f64(l_loc.value().item());
            totals.push(total_loss(l_img, l_loc, lc.lambda)?);
        }
        let r = rounds.len() as f64;
        let mut total = totals[0];
        for &t in &totals[1..] {
            total = total.add(t)?;
        }
        if totals.len() > 1 {
            total = total.scale(T::of(1.0 / r));
        }
        Ok(LossParts {
            total,
            img: img_sum / r,
            loc: loc_sum / r,
        })
    }

    /// One optimisation step on a pair of augmented view batches
    /// (`[B, H, W, C]` each).
    pub fn train_step(&mut self, views: [Tensor<T>; 2], schedule: &Schedule) -> Result<StepMetrics> {
        let started = Instant::now();
        let batch = views[0].shape().first().copied().unwrap_or(0);
        let t = self.step + 1;

        let tp = self.teacher_pass(&views)?;
        let both = stack_rows(&tp.sims[0], &tp.sims[1])?;
        let tau_t = self.temperature.update(&both, self.num_patches())?;
        let rounds = self.sample_round_plans(batch, &tp.targets)?;

        let tape = Tape::new();
        let s = self.student.bind(&tape);
        let h = self.heads.bind(&tape);
        let parts = self.student_loss(&s, &h, &views, &tp.targets, &rounds)?;
        let loss = to_f64(parts.total.value().item());
        if !loss.is_finite() {
            return Err(self.numerical_failure(t, "loss", loss, &views, &tp));
        }
        let grads = tape.backward(parts.total)?;
        let gs = vec![s.gradients(&grads), h.gradients(&grads)];
        drop(grads);
        for (store, g) in [&self.student, &self.heads].iter().zip(&gs) {
            for (e, gt) in store.entries().iter().zip(g) {
                if gt.data().iter().any(|v| !v.is_finite()) {
                    return Err(self.numerical_failure(t, &format!("gradient of {}", e.name), f64::NAN, &views, &tp));
                }
            }
        }

        let lr = schedule.lr(t);
        self.opt.step(&mut [&mut self.student, &mut self.heads], &gs, lr)?;
        ema_update(&mut self.teacher, &self.student, self.cfg.teacher_momentum)?;
        self.codebook
            .enqueue(&[&tp.tokens[0], &tp.tokens[1]], self.num_patches(), t, &mut self.codebook_rng)?;
        self.step = t;
        Ok(StepMetrics {
            step: t,
            epoch: 0,
            lr,
            loss_total: loss,
            loss_img: parts.img,
            loss_loc: parts.loc,
            tau_t,
            secs: started.elapsed().as_secs_f64(),
        })
    }

    fn numerical_failure(&self, step: u64, what: &str, value: f64, views: &[Tensor<T>; 2], tp: &TeacherPass<T>) -> MocaError {
        let stat = |name: &str, t: &Tensor<T>| {
            let bad = t.data().iter().filter(|v| !v.is_finite()).count();
            format!("  {name} {:?}: max|x| {}, non-finite {bad}\n", t.shape(), t.max_abs())
        };
        let mut msg = format!("{what} is {value}\n");
        for v in 0..2 {
            msg += &stat(&format!("view{v}"), &views[v]);
            msg += &stat(&format!("teacher_tokens{v}"), &tp.tokens[v]);
            msg += &stat(&format!("q{v}"), &tp.targets[v].q);
            msg += &stat(&format!("y{v}"), &tp.targets[v].y);
        }
        msg += &stat("codebook", self.codebook.entries());
        for e in self.student.entries().iter().chain(self.heads.entries()) {
            if e.value.data().iter().any(|v| !v.is_finite()) {
                msg += &stat(&e.name, &e.value);
            }
        }
        msg += &format!("  tau_T {}\n", self.temperature.tau());
        MocaError::Numerical { step, msg }
    }

    /// Teacher [AVG] embeddings of full views, `[B, d_enc]`.
    pub fn teacher_embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let p = self.teacher.bind_frozen(&tape);
        let out = self.encoder.encode_full(&p, images)?;
        Ok((*out.avg.value()).clone())
    }
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn stack_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.last_dim() != b.last_dim() {
        return Err(MocaError::shape("stack_rows", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.last_dim()], data)
}
