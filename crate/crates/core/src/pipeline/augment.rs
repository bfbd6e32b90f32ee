use rand::Rng;

use crate::error::{MocaError, Result};

/// Two-view augmentation recipe: random resized crop, horizontal flip,
/// brightness/contrast jitter and random grayscale.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub grayscale_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale_min: 0.3,
            scale_max: 1.0,
            ratio_min: 3.0 / 4.0,
            ratio_max: 4.0 / 3.0,
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            grayscale_p: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.scale_min
            && self.scale_min <= self.scale_max
            && self.scale_max <= 1.0
            && 0.0 < self.ratio_min
            && self.ratio_min <= self.ratio_max
            && (0.0..=1.0).contains(&self.flip_p)
            && (0.0..=1.0).contains(&self.grayscale_p)
            && (0.0..1.0).contains(&self.brightness)
            && (0.0..1.0).contains(&self.contrast);
        if ok {
            Ok(())
        } else {
            Err(MocaError::Config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

/// An `h × w × c` image borrowed from a dataset.
#[derive(Clone, Copy, Debug)]
pub struct ImageRef<'a> {
    pub data: &'a [f32],
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ImageRef<'_> {
    fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    /// Bilinear resample of the window `(y0, x0, ch, cw)` to `out × out`,
    /// sampling at pixel centres.
    pub fn resample(&self, window: (f64, f64, f64, f64), out: usize) -> Vec<f32> {
        let (y0, x0, wh, ww) = window;
        let mut dst = Vec::with_capacity(out * out * self.c);
        let sy = wh / out as f64;
        let sx = ww / out as f64;
        for oy in 0..out {
            let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let (y_lo, ty) = (fy.floor() as usize, fy - fy.floor());
            let y_hi = (y_lo + 1).min(self.h - 1);
            for ox in 0..out {
                let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let (x_lo, tx) = (fx.floor() as usize, fx - fx.floor());
                let x_hi = (x_lo + 1).min(self.w - 1);
                for ch in 0..self.c {
                    let top = self.at(y_lo, x_lo, ch) as f64 * (1.0 - tx) + self.at(y_lo, x_hi, ch) as f64 * tx;
                    let bot = self.at(y_hi, x_lo, ch) as f64 * (1.0 - tx) + self.at(y_hi, x_hi, ch) as f64 * tx;
                    dst.push((top * (1.0 - ty) + bot * ty) as f32);
                }
            }
        }
        dst
    }
}

/// Largest centred square, resized to `out × out` (a copy when sizes match).
pub fn center_crop(img: ImageRef<'_>, out: usize) -> Vec<f32> {
    if img.h == out && img.w == out {
        return img.data.to_vec();
    }
    let side = img.h.min(img.w) as f64;
    let y0 = (img.h as f64 - side) / 2.0;
    let x0 = (img.w as f64 - side) / 2.0;
    img.resample((y0, x0, side, side), out)
}

fn crop_window(img: ImageRef<'_>, cfg: &AugmentConfig, rng: &mut impl Rng) -> (f64, f64, f64, f64) {
    let (h, w) = (img.h as f64, img.w as f64);
    let area = h * w;
    let (lr_min, lr_max) = (cfg.ratio_min.ln(), cfg.ratio_max.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let ratio = if lr_max > lr_min { rng.gen_range(lr_min..lr_max).exp() } else { cfg.ratio_min };
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w && ch <= h {
            let y0 = rng.gen_range(0.0..=h - ch);
            let x0 = rng.gen_range(0.0..=w - cw);
            return (y0, x0, ch, cw);
        }
    }
    let side = h.min(w);
    ((h - side) / 2.0, (w - side) / 2.0, side, side)
}

/// One random view of `img` at `out × out`.
pub fn augment_view(img: ImageRef<'_>, out: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f32> {
    if !cfg.enabled {
        return center_crop(img, out);
    }
    let mut v = img.resample(crop_window(img, cfg, rng), out);
    let c = img.c;
    if rng.gen_bool(cfg.flip_p) {
        for row in v.chunks_mut(out * c) {
            for x in 0..out / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (out - 1 - x) * c + ch);
                }
            }
        }
    }
    let b = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness) as f32;
    let k = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast) as f32;
    for p in v.iter_mut() {
        *p *= b;
    }
    let mean = v.iter().map(|&p| p as f64).sum::<f64>() as f32 / v.len().max(1) as f32;
    for p in v.iter_mut() {
        *p = ((*p - mean) * k + mean).clamp(0.0, 1.0);
    }
    if c == 3 && rng.gen_bool(cfg.grayscale_p) {
        for px in v.chunks_mut(3) {
            let g = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.fill(g);
        }
    }
    v
}

/// Two independent views of the same image.
pub fn augment_two_views(
    img: ImageRef<'_>,
    out: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Vec<f32>, Vec<f32>) {
    let a = augment_view(img, out, cfg, rng);
    let b = augment_view(img, out, cfg, rng);
    (a, b)
}
