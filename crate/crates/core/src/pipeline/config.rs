use std::fmt::Write as _;

use crate::error::{MocaError, Result};
use crate::objectives::{GlobalToken, LossConfig};
use crate::vit::{default_tap_layer, ViTConfig};

use super::augment::AugmentConfig;

/// Everything that defines a pre-training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub vit: ViTConfig,
    pub loss: LossConfig,
    pub codebook_size: usize,
    pub codebook_new_words: usize,
    /// Fraction of patches masked in the first round.
    pub mask_ratio_1: f64,
    /// Second-round ratio; `None` trains with a single round.
    pub mask_ratio_2: Option<f64>,
    /// Fraction of all patches decoded; `None` decodes every masked patch.
    pub dec_fraction: Option<f64>,
    pub condenser: bool,
    /// BoW border; `None` picks the grid-dependent default.
    pub bow_border: Option<usize>,
    pub teacher_momentum: f64,
    pub msd_init: f64,
    pub msd_floor: f64,
    pub msd_momentum: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        TrainConfig {
            vit: ViTConfig::default(),
            loss: LossConfig::default(),
            codebook_size: 1024,
            codebook_new_words: 4,
            mask_ratio_1: 0.55,
            mask_ratio_2: Some(0.75),
            dec_fraction: Some(0.20),
            condenser: true,
            bow_border: None,
            teacher_momentum: 0.99,
            msd_init: 0.1,
            msd_floor: 1e-3,
            msd_momentum: 0.99,
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            epochs: 50,
            warmup_epochs: 5,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// ViT-B/16 at the published settings.
    pub fn imagenet_scale() -> Self {
        TrainConfig {
            vit: ViTConfig::vit_base(),
            codebook_size: 4096,
            batch_size: 2048,
            epochs: 800,
            warmup_epochs: 30,
            ..Default::default()
        }
    }

    /// Two-layer width-8 model on 4×4 images (a 2×2 grid), K=6, batch 2,
    /// no augmentation. Small enough for finite-difference checks.
    pub fn micro() -> Self {
        TrainConfig {
            vit: ViTConfig {
                image_size: 4,
                patch_size: 2,
                channels: 3,
                depth: 2,
                heads: 2,
                d_enc: 8,
                d_dec: 8,
                dec_depth: 1,
                dec_heads: 2,
                tap_layer: default_tap_layer(2),
            },
            codebook_size: 6,
            codebook_new_words: 2,
            batch_size: 2,
            epochs: 2,
            warmup_epochs: 1,
            base_lr: 1e-3,
            augment: AugmentConfig::disabled(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.loss.validate()?;
        let err = |m: String| Err(MocaError::Config(m));
        if self.warmup_epochs > self.epochs {
            return err(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.codebook_size < 2 {
            return err(format!("codebook_size {} must be at least 2", self.codebook_size));
        }
        if self.codebook_new_words > self.codebook_size {
            return err("codebook_new_words exceeds codebook_size".into());
        }
        if self.codebook_new_words > self.batch_size {
            return err(format!(
                "batch_size {} cannot supply {} new words from distinct images",
                self.batch_size, self.codebook_new_words
            ));
        }
        if self.batch_size < 1 {
            return err("batch_size must be positive".into());
        }
        for r in std::iter::once(self.mask_ratio_1).chain(self.mask_ratio_2) {
            if !(0.0..1.0).contains(&r) {
                return err(format!("mask ratio {r} outside [0, 1)"));
            }
        }
        if let Some(f) = self.dec_fraction {
            let lowest = self.mask_ratio_2.map_or(self.mask_ratio_1, |r| r.min(self.mask_ratio_1));
            if f < 0.0 || f > lowest + 1e-12 {
                return err(format!("decoded fraction {f} must lie in [0, {lowest}]"));
            }
        }
        if !(0.0..=1.0).contains(&self.teacher_momentum) {
            return err(format!("teacher_momentum {} outside [0, 1]", self.teacher_momentum));
        }
        if !(self.msd_floor > 0.0) {
            return err("msd_floor must be positive".into());
        }
        if let Some(b) = self.bow_border {
            let (r, c) = self.vit.grid();
            if 2 * b >= r.min(c) {
                return err(format!("bow_border {b} leaves no interior in a {r}×{c} grid"));
            }
        }
        self.augment.validate()
    }

    pub fn rounds(&self) -> usize {
        1 + usize::from(self.mask_ratio_2.is_some())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut tap_set = false;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| MocaError::ConfigLine { line: no + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            if key == "decoder_intermediate_layer" {
                tap_set = true;
            }
            cfg.set(key, value).map_err(|e| match e {
                MocaError::Config(msg) => fail(msg),
                other => other,
            })?;
        }
        if !tap_set {
            cfg.vit.tap_layer = default_tap_layer(cfg.vit.depth);
        }
        Ok(cfg)
    }

    /// Applies one setting. Unknown keys are a configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| MocaError::Config(format!("{key}: cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "on" | "true" | "yes" => Ok(true),
                "off" | "false" | "no" => Ok(false),
                _ => Err(MocaError::Config(format!("{key}: expected on/off, got `{v}`"))),
            }
        }
        fn pct(key: &str, v: &str) -> Result<f64> {
            Ok(num::<f64>(key, v)? / 100.0)
        }
        fn opt_pct(key: &str, v: &str) -> Result<Option<f64>> {
            if v == "none" {
                Ok(None)
            } else {
                pct(key, v).map(Some)
            }
        }
        match key {
            "image_size" => self.vit.image_size = num(key, value)?,
            "patch_size" => self.vit.patch_size = num(key, value)?,
            "channels" => self.vit.channels = num(key, value)?,
            "encoder_depth" => self.vit.depth = num(key, value)?,
            "encoder_self_attention_heads" => self.vit.heads = num(key, value)?,
            "encoder_embedding_size" => self.vit.d_enc = num(key, value)?,
            "decoder_intermediate_layer" => self.vit.tap_layer = num(key, value)?,
            "decoder_depth" => self.vit.dec_depth = num(key, value)?,
            "decoder_embedding_size" => self.vit.d_dec = num(key, value)?,
            "decoder_self_attention_heads" => self.vit.dec_heads = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "codebook_new_words_per_training_step" => self.codebook_new_words = num(key, value)?,
            "mask_percentage_for_1st_round" => self.mask_ratio_1 = pct(key, value)?,
            "mask_percentage_for_2nd_round" => self.mask_ratio_2 = opt_pct(key, value)?,
            "percentage_of_predicted_tokens" => self.dec_fraction = opt_pct(key, value)?,
            "condenser" => self.condenser = flag(key, value)?,
            "bow_border" => {
                self.bow_border = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "loss_weighting_parameter" => self.loss.lambda = num(key, value)?,
            "student_temperature_b" => self.loss.tau_b = num(key, value)?,
            "student_temperature_d" => self.loss.tau_d = num(key, value)?,
            "loss_on_visible" => self.loss.loss_on_visible = flag(key, value)?,
            "global_token" => {
                self.loss.global = match value {
                    "avg" => GlobalToken::Avg,
                    "cls" => GlobalToken::Cls,
                    _ => return Err(MocaError::Config(format!("global_token: expected avg or cls, got `{value}`"))),
                }
            }
            "teacher_momentum" => self.teacher_momentum = num(key, value)?,
            "msd_init" => self.msd_init = num(key, value)?,
            "msd_floor" => self.msd_floor = num(key, value)?,
            "msd_momentum" => self.msd_momentum = num(key, value)?,
            "optimizer" => {
                if value != "adamw" {
                    return Err(MocaError::Config(format!("optimizer: only adamw is supported, got `{value}`")));
                }
            }
            "learning_rate_schedule" => {
                if value != "cosine" {
                    return Err(MocaError::Config(format!(
                        "learning_rate_schedule: only cosine is supported, got `{value}`"
                    )));
                }
            }
            "base_learning_rate" => self.base_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "optimizer_momentum_beta1" => self.beta1 = num(key, value)?,
            "optimizer_momentum_beta2" => self.beta2 = num(key, value)?,
            "adam_epsilon" => self.adam_eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "augmentation" => self.augment.enabled = flag(key, value)?,
            "crop_scale_min" => self.augment.scale_min = num(key, value)?,
            "crop_scale_max" => self.augment.scale_max = num(key, value)?,
            "flip_probability" => self.augment.flip_p = num(key, value)?,
            "brightness_jitter" => self.augment.brightness = num(key, value)?,
            "contrast_jitter" => self.augment.contrast = num(key, value)?,
            "grayscale_probability" => self.augment.grayscale_p = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            // Short aliases used by ablation grids.
            "lambda" => self.loss.lambda = num(key, value)?,
            "ratio" => self.mask_ratio_1 = num(key, value)?,
            _ => return Err(MocaError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Fully resolved settings in the same syntax [`TrainConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let pct = |x: f64| format!("{}", (x * 100.0 * 1e9).round() / 1e9);
        let opt = |x: Option<f64>| x.map_or("none".to_string(), pct);
        let flag = |b: bool| if b { "on" } else { "off" };
        let v = &self.vit;
        let a = &self.augment;
        let mut s = String::new();
        let mut kv = |k: &str, val: String| {
            let _ = writeln!(s, "{k} = {val}");
        };
        kv("image_size", v.image_size.to_string());
        kv("patch_size", v.patch_size.to_string());
        kv("channels", v.channels.to_string());
        kv("encoder_depth", v.depth.to_string());
        kv("encoder_self_attention_heads", v.heads.to_string());
        kv("encoder_embedding_size", v.d_enc.to_string());
        kv("codebook_size", self.codebook_size.to_string());
        kv("codebook_new_words_per_training_step", self.codebook_new_words.to_string());
        kv("mask_percentage_for_1st_round", pct(self.mask_ratio_1));
        kv("mask_percentage_for_2nd_round", opt(self.mask_ratio_2));
        kv("percentage_of_predicted_tokens", opt(self.dec_fraction));
        kv("decoder_intermediate_layer", v.tap_layer.to_string());
        kv("decoder_depth", v.dec_depth.to_string());
        kv("decoder_embedding_size", v.d_dec.to_string());
        kv("decoder_self_attention_heads", v.dec_heads.to_string());
        kv("loss_weighting_parameter", self.loss.lambda.to_string());
        kv("condenser", flag(self.condenser).into());
        kv("bow_border", self.bow_border.map_or("auto".into(), |b| b.to_string()));
        kv("student_temperature_b", self.loss.tau_b.to_string());
        kv("student_temperature_d", self.loss.tau_d.to_string());
        kv("loss_on_visible", flag(self.loss.loss_on_visible).into());
        kv(
            "global_token",
            match self.loss.global {
                GlobalToken::Avg => "avg".into(),
                GlobalToken::Cls => "cls".into(),
            },
        );
        kv("teacher_momentum", self.teacher_momentum.to_string());
        kv("msd_init", self.msd_init.to_string());
        kv("msd_floor", self.msd_floor.to_string());
        kv("msd_momentum", self.msd_momentum.to_string());
        kv("optimizer", "adamw".into());
        kv("base_learning_rate", self.base_lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("optimizer_momentum_beta1", self.beta1.to_string());
        kv("optimizer_momentum_beta2", self.beta2.to_string());
        kv("adam_epsilon", self.adam_eps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate_schedule", "cosine".into());
        kv("epochs", self.epochs.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("augmentation", flag(a.enabled).into());
        kv("crop_scale_min", a.scale_min.to_string());
        kv("crop_scale_max", a.scale_max.to_string());
        kv("flip_probability", a.flip_p.to_string());
        kv("brightness_jitter", a.brightness.to_string());
        kv("contrast_jitter", a.contrast.to_string());
        kv("grayscale_probability", a.grayscale_p.to_string());
        kv("seed", self.seed.to_string());
        s
    }
}
