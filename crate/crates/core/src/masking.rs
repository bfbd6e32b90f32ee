//! Mask plans, partial decoding and decoder-input assembly.
//!
//! Patch indices here are 0-based over the `N` patches; the global token is
//! never part of a plan.

use rand::seq::index;
use rand::Rng;

use crate::codebook::AssignmentBatch;
use crate::error::{MocaError, Result};
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{init, Bound, ParamId, ParamStore};
use crate::vit::{sincos_positions, EncoderOutput, Linear, ViTConfig};

/// `⌊x·N + 0.5⌋`.
pub fn rounded_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + 0.5).floor() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub n: usize,
    /// Visible patches, ascending.
    pub u: Vec<usize>,
    /// Masked patches, ascending.
    pub m: Vec<usize>,
    /// Masked patches that get a decoder slot, ascending.
    pub m_dec: Vec<usize>,
    pub round: u8,
    pub ratio: f64,
    pub dec_fraction: f64,
}

impl MaskPlan {
    pub fn check(&self) -> Result<()> {
        let mut seen = vec![0u8; self.n];
        for &i in self.u.iter().chain(&self.m) {
            if i >= self.n {
                return Err(MocaError::Contract(format!("index {i} outside 0..{}", self.n)));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(MocaError::Contract("u and m do not partition the patches".into()));
        }
        if self.m_dec.iter().any(|i| self.m.binary_search(i).is_err()) {
            return Err(MocaError::Contract("decoded subset is not inside m".into()));
        }
        Ok(())
    }

    /// Decoder sequence length with the global slot: `1 + |u| + |m_dec|`.
    pub fn decoder_slots(&self) -> usize {
        1 + self.u.len() + self.m_dec.len()
    }
}

/// Uniformly masks `⌊ratio·N + 0.5⌋` of `N` patches; every masked patch is
/// decoded until [`select_partial`] narrows it.
pub fn sample_mask(n: usize, ratio: f64, round: u8, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(MocaError::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let k = rounded_count(n, ratio);
    if k >= n {
        return Err(MocaError::Config(format!(
            "mask ratio {ratio} leaves no visible patch out of {n}"
        )));
    }
    let mut m = index::sample(rng, n, k).into_vec();
    m.sort_unstable();
    let mut is_masked = vec![false; n];
    for &i in &m {
        is_masked[i] = true;
    }
    let u = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        n,
        u,
        m_dec: m.clone(),
        m,
        round,
        ratio,
        dec_fraction: k as f64 / n as f64,
    })
}

/// Keeps a uniform subset of `⌊dec_fraction·N + 0.5⌋` masked patches.
pub fn select_partial(mut plan: MaskPlan, dec_fraction: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if dec_fraction < 0.0 {
        return Err(MocaError::Config(format!("decode fraction {dec_fraction} is negative")));
    }
    let k = rounded_count(plan.n, dec_fraction);
    if k > plan.m.len() {
        return Err(MocaError::Config(format!(
            "cannot decode {k} of {} masked patches",
            plan.m.len()
        )));
    }
    plan.m_dec = if k == plan.m.len() {
        plan.m.clone()
    } else {
        let mut picked: Vec<usize> = index::sample(rng, plan.m.len(), k)
            .into_iter()
            .map(|j| plan.m[j])
            .collect();
        picked.sort_unstable();
        picked
    };
    plan.dec_fraction = dec_fraction;
    Ok(plan)
}

/// Masking settings for one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundSpec {
    pub ratio: f64,
    /// `None` decodes every masked patch.
    pub dec_fraction: Option<f64>,
}

/// One plan per image, all with equal counts.
pub fn sample_plans(
    batch: usize,
    n: usize,
    spec: RoundSpec,
    round: u8,
    rng: &mut impl Rng,
) -> Result<Vec<MaskPlan>> {
    (0..batch)
        .map(|_| {
            let plan = sample_mask(n, spec.ratio, round, rng)?;
            match spec.dec_fraction {
                Some(f) => select_partial(plan, f, rng),
                None => Ok(plan),
            }
        })
        .collect()
}

/// Fresh round-2 plans; the teacher targets are handed back untouched.
pub fn second_round<'a, T>(
    batch: usize,
    n: usize,
    spec: RoundSpec,
    targets: &'a [AssignmentBatch<T>],
    rng: &mut impl Rng,
) -> Result<(Vec<MaskPlan>, &'a [AssignmentBatch<T>])> {
    Ok((sample_plans(batch, n, spec, 2, rng)?, targets))
}

/// Analytic decoder attention cost of one sequence, `slots²`.
pub fn attention_cost(slots: usize) -> usize {
    slots * slots
}

/// Stacked decoder sequences plus where each slot kind starts.
pub struct DecoderInput<'t, T> {
    /// `[B·slots, d_dec]`.
    pub z: Var<'t, T>,
    pub batch: usize,
    pub slots: usize,
    /// Offset of the first visible slot within a sequence.
    pub visible_offset: usize,
    /// Offset of the first mask slot within a sequence.
    pub dec_offset: usize,
    pub n_visible: usize,
    pub n_dec: usize,
}

impl<T> DecoderInput<'_, T> {
    /// Row of decoded mask slot `j` of image `b`.
    pub fn dec_row(&self, b: usize, j: usize) -> usize {
        b * self.slots + self.dec_offset + j
    }

    /// Row of visible slot `j` of image `b`.
    pub fn visible_row(&self, b: usize, j: usize) -> usize {
        b * self.slots + self.visible_offset + j
    }
}

/// Projection, mask embedding and position table feeding the decoder.
#[derive(Clone, Debug)]
pub struct DecoderEmbed {
    proj: Linear,
    mask_token: ParamId,
    pos: Tensor<f64>,
    /// Condenser mode: global slot from [AVG], visible slots from the tap
    /// layer. Off: visible slots from the last layer, no global slot.
    pub condenser: bool,
}

impl DecoderEmbed {
    pub fn new<T: Scalar>(cfg: &ViTConfig, condenser: bool, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let proj = Linear::new(store, "dec.embed", cfg.d_enc, cfg.d_dec, rng);
        let mask_token = store.add("dec.mask_token", init::trunc_normal(vec![1, cfg.d_dec], 0.02, rng), false);
        Ok(DecoderEmbed {
            proj,
            mask_token,
            pos: sincos_positions(cfg.grid(), cfg.d_dec)?,
            condenser,
        })
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    /// Assembles `[global; visible i∈u; mask i∈m_dec]` per image, each slot
    /// plus its position row. `enc` must come from encoding exactly the `u`
    /// sets of `plans`, in order.
    pub fn build<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        enc: &EncoderOutput<'t, T>,
        plans: &[MaskPlan],
    ) -> Result<DecoderInput<'t, T>> {
        let batch = plans.len();
        if batch != enc.batch {
            return Err(MocaError::Contract(format!(
                "{batch} plans for {} encoded images",
                enc.batch
            )));
        }
        let nu = enc.n_visible;
        let nd = plans.first().map_or(0, |pl| pl.m_dec.len());
        if plans.iter().any(|pl| pl.u.len() != nu || pl.m_dec.len() != nd) {
            return Err(MocaError::Contract("plan sizes differ within the batch".into()));
        }
        let tape = p.get(self.mask_token).tape();
        let d = self.proj.d_out;
        let global = usize::from(self.condenser);
        let slots = global + nu + nd;

        let visible_src = if self.condenser { enc.tap } else { enc.final_tokens };
        let pv = self.proj.forward(p, visible_src)?;
        let masks = p.get(self.mask_token).select_rows(&vec![0; batch * nd])?;
        let mut parts = vec![pv, masks];
        if self.condenser {
            parts.push(self.proj.forward(p, enc.avg)?);
        }
        let all = tape.concat_rows(&parts)?;

        let (mask_base, avg_base) = (batch * nu, batch * nu + batch * nd);
        let mut order = Vec::with_capacity(batch * slots);
        let mut pos = Vec::with_capacity(batch * slots * d);
        let table: Tensor<T> = self.pos.cast();
        for (b, plan) in plans.iter().enumerate() {
            if self.condenser {
                order.push(avg_base + b);
                pos.extend_from_slice(table.row(0));
            }
            for (j, &i) in plan.u.iter().enumerate() {
                order.push(b * nu + j);
                pos.extend_from_slice(table.row(1 + i));
            }
            for (j, &i) in plan.m_dec.iter().enumerate() {
                order.push(mask_base + b * nd + j);
                pos.extend_from_slice(table.row(1 + i));
            }
        }
        let z = all
            .select_rows(&order)?
            .add(tape.constant(Tensor::new(vec![batch * slots, d], pos)?))?;
        Ok(DecoderInput {
            z,
            batch,
            slots,
            visible_offset: global,
            dec_offset: global + nu,
            n_visible: nu,
            n_dec: nd,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tape;
    use crate::vit::Encoder;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn counts_follow_rounding_rule() {
        assert_eq!(rounded_count(196, 0.55), 108);
        assert_eq!(rounded_count(196, 0.20), 39);
        assert_eq!(rounded_count(196, 0.75), 147);
        let plan = select_partial(sample_mask(196, 0.55, 1, &mut rng(0)).unwrap(), 0.2, &mut rng(1)).unwrap();
        assert_eq!(plan.u.len(), 88);
        assert_eq!(plan.m_dec.len(), 39);
        assert_eq!(plan.decoder_slots(), 128);
        assert_eq!(sample_mask(196, 0.55, 1, &mut rng(0)).unwrap().decoder_slots(), 197);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let plan = sample_mask(16, 0.0, 1, &mut rng(0)).unwrap();
        assert!(plan.m.is_empty());
        assert_eq!(plan.u, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_requests_rejected() {
        assert!(matches!(sample_mask(2, 0.9, 1, &mut rng(0)), Err(MocaError::Config(_))));
        assert!(matches!(sample_mask(4, 1.0, 1, &mut rng(0)), Err(MocaError::Config(_))));
        let plan = sample_mask(10, 0.3, 1, &mut rng(0)).unwrap();
        assert!(matches!(select_partial(plan, 0.5, &mut rng(0)), Err(MocaError::Config(_))));
    }

    #[test]
    fn partial_saturation_and_empty() {
        let plan = sample_mask(50, 0.4, 1, &mut rng(3)).unwrap();
        let full = select_partial(plan.clone(), 0.4, &mut rng(4)).unwrap();
        assert_eq!(full.m_dec, full.m);
        let none = select_partial(plan, 0.0, &mut rng(4)).unwrap();
        assert!(none.m_dec.is_empty());
        assert_eq!(none.decoder_slots(), 1 + 30);
    }

    #[test]
    fn plans_are_reproducible() {
        let spec = RoundSpec {
            ratio: 0.55,
            dec_fraction: Some(0.2),
        };
        let a = sample_plans(4, 64, spec, 1, &mut rng(9)).unwrap();
        let b = sample_plans(4, 64, spec, 1, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn second_round_reuses_targets() {
        let targets = vec![AssignmentBatch {
            q: Tensor::<f64>::full(vec![4, 3], 1.0 / 3.0),
            y: Tensor::full(vec![1, 3], 1.0 / 3.0),
        }];
        let spec = RoundSpec {
            ratio: 0.75,
            dec_fraction: None,
        };
        let (plans, reused) = second_round(1, 4, spec, &targets, &mut rng(0)).unwrap();
        assert!(std::ptr::eq(reused, targets.as_slice()));
        assert_eq!(plans[0].round, 2);
        assert_eq!(plans[0].m.len(), 3);
    }

    #[test]
    fn cost_monotone() {
        let slots = |r: f64, f: f64| {
            1 + 196 - rounded_count(196, r) + rounded_count(196, f)
        };
        assert!(attention_cost(slots(0.75, 0.2)) < attention_cost(slots(0.55, 0.2)));
        assert!(attention_cost(slots(0.55, 0.1)) < attention_cost(slots(0.55, 0.2)));
    }

    fn micro() -> ViTConfig {
        ViTConfig {
            image_size: 4,
            patch_size: 1,
            channels: 1,
            depth: 2,
            heads: 2,
            d_enc: 8,
            d_dec: 4,
            dec_depth: 1,
            dec_heads: 1,
            tap_layer: 1,
        }
    }

    #[test]
    fn decoder_input_layout_and_bottleneck() {
        let cfg = micro();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(0);
        let enc = Encoder::new(&cfg, &mut store, &mut r).unwrap();
        let emb = DecoderEmbed::new(&cfg, true, &mut store, &mut r).unwrap();
        let x = Tensor::from_fn(vec![2, 4, 4, 1], |i| (i as f64 * 0.37).sin());
        let spec = RoundSpec {
            ratio: 0.5,
            dec_fraction: Some(0.25),
        };
        let plans = sample_plans(2, 16, spec, 1, &mut r).unwrap();
        let vis: Vec<_> = plans.iter().map(|p| p.u.clone()).collect();

        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let out = enc.encode(&p, &enc.patchify(&p, &x).unwrap(), &vis).unwrap();
        let di = emb.build(&p, &out, &plans).unwrap();
        assert_eq!(di.slots, 1 + 8 + 4);
        assert_eq!(di.z.shape(), vec![2 * 13, 4]);

        // Mask slots are e^M plus the position row.
        let pos: Tensor<f64> = sincos_positions((4, 4), 4).unwrap();
        let e = store.get(emb.mask_token()).row(0).to_vec();
        let z = di.z.value();
        for (j, &i) in plans[1].m_dec.iter().enumerate() {
            let row = z.row(di.dec_row(1, j));
            for c in 0..4 {
                assert!((row[c] - e[c] - pos.row(1 + i)[c]).abs() < 1e-12);
            }
        }

        // Replacing the last-layer patch tokens while holding avg fixed
        // leaves the decoder input untouched.
        let altered = EncoderOutput {
            final_tokens: tape.constant(Tensor::full(vec![16, 8], 5.0)),
            ..out
        };
        let dj = emb.build(&p, &altered, &plans).unwrap();
        assert_eq!(dj.z.value().data(), z.data());
    }

    #[test]
    fn non_condenser_uses_final_tokens() {
        let cfg = micro();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(1);
        let enc = Encoder::new(&cfg, &mut store, &mut r).unwrap();
        let emb = DecoderEmbed::new(&cfg, false, &mut store, &mut r).unwrap();
        let x = Tensor::from_fn(vec![1, 4, 4, 1], |i| (i as f64).cos());
        let plans = sample_plans(
            1,
            16,
            RoundSpec {
                ratio: 0.25,
                dec_fraction: None,
            },
            1,
            &mut r,
        )
        .unwrap();
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let out = enc.encode(&p, &enc.patchify(&p, &x).unwrap(), &[plans[0].u.clone()]).unwrap();
        let di = emb.build(&p, &out, &plans).unwrap();
        assert_eq!(di.slots, 12 + 4);
        assert_eq!(di.dec_offset, 12);
        let altered = EncoderOutput {
            tap: tape.constant(Tensor::full(vec![12, 8], 5.0)),
            avg: tape.constant(Tensor::full(vec![1, 8], 5.0)),
            ..out
        };
        let dj = emb.build(&p, &altered, &plans).unwrap();
        assert_eq!(dj.z.value().data(), di.z.value().data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn partition_and_counts(n in 1usize..400, ratio in 0.0f64..0.99, dec in 0.0f64..1.0, seed in 0u64..10_000) {
            let mut r = rng(seed);
            match sample_mask(n, ratio, 1, &mut r) {
                Ok(plan) => {
                    prop_assert_eq!(plan.m.len(), rounded_count(n, ratio));
                    prop_assert_eq!(plan.u.len() + plan.m.len(), n);
                    plan.check().unwrap();
                    let want = rounded_count(n, dec * ratio);
                    let plan = select_partial(plan, dec * ratio, &mut r).unwrap();
                    prop_assert_eq!(plan.m_dec.len(), want);
                    plan.check().unwrap();
                    prop_assert_eq!(plan.decoder_slots(), 1 + plan.u.len() + want);
                }
                Err(_) => prop_assert!(rounded_count(n, ratio) >= n),
            }
        }
    }
}
