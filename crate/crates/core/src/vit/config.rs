use crate::error::{MocaError, Result};

/// Shape of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    /// 1-based encoder layer whose output feeds the condenser decoder.
    pub tap_layer: usize,
}

impl Default for ViTConfig {
    /// Desk-scale model: 32×32 inputs, 8×8 patch grid, 6 layers of width 128.
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 6,
            heads: 4,
            d_enc: 128,
            d_dec: 64,
            dec_depth: 2,
            dec_heads: 4,
            tap_layer: default_tap_layer(6),
        }
    }
}

/// `⌈2·depth/3⌉`, i.e. layer 8 of 12.
pub fn default_tap_layer(depth: usize) -> usize {
    (2 * depth).div_ceil(3)
}

impl ViTConfig {
    /// ViT-B/16 with the ImageNet-scale decoder (width 512, 16 heads, depth 2, tap 8).
    pub fn vit_base() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            depth: 12,
            heads: 12,
            d_enc: 768,
            d_dec: 512,
            dec_depth: 2,
            dec_heads: 16,
            tap_layer: 8,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MocaError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 || self.tap_layer == 0 || self.tap_layer > self.depth {
            return err(format!(
                "tap layer {} outside 1..={}",
                self.tap_layer, self.depth
            ));
        }
        if self.heads == 0 || self.d_enc % self.heads != 0 {
            return err(format!("d_enc {} not divisible by heads {}", self.d_enc, self.heads));
        }
        if self.dec_heads == 0 || self.d_dec % self.dec_heads != 0 {
            return err(format!(
                "d_dec {} not divisible by decoder heads {}",
                self.d_dec, self.dec_heads
            ));
        }
        if self.d_enc % 4 != 0 || self.d_dec % 4 != 0 {
            return err(format!(
                "sine-cosine embeddings need widths divisible by 4 (d_enc {}, d_dec {})",
                self.d_enc, self.d_dec
            ));
        }
        if self.channels == 0 {
            return err("channels must be positive".into());
        }
        Ok(())
    }
}
