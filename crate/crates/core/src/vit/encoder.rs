use rand::Rng;

use super::config::ViTConfig;
use super::layers::{Block, LayerNorm, Linear};
use super::pos::sincos_positions;
use crate::error::{MocaError, Result};
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{init, Bound, ParamId, ParamStore};

/// Splits `[B, H, W, C]` images into flattened non-overlapping patches,
/// returning `[B·N, p·p·C]` with patches in row-major grid order.
pub fn extract_patches<T: Scalar>(images: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let &[b, h, w, c] = images.shape() else {
        return Err(MocaError::Config(format!(
            "expected [B, H, W, C] images, got {:?}",
            images.shape()
        )));
    };
    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(MocaError::Config(format!(
            "images are {h}×{w}×{c}, model expects {s}×{s}×{}",
            cfg.channels,
            s = cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let (gr, gc) = cfg.grid();
    let mut out = Vec::with_capacity(images.numel());
    let src = images.data();
    for img in 0..b {
        for r in 0..gr {
            for cc in 0..gc {
                for py in 0..p {
                    let y = r * p + py;
                    let start = ((img * h + y) * w + cc * p) * c;
                    out.extend_from_slice(&src[start..start + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![b * gr * gc, cfg.patch_dim()], out)
}

/// Embedded token sequences: `[B·(1+N), d]` with the `[CLS]` token at row 0
/// of each image block.
pub struct TokenSequence<'t, T> {
    pub tokens: Var<'t, T>,
    pub batch: usize,
    pub grid: (usize, usize),
}

impl<T> TokenSequence<'_, T> {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Encoder outputs for the visible patches of every image, stacked by image.
pub struct EncoderOutput<'t, T> {
    /// Tap-layer patch tokens after their own normalisation, `[B·n, d]`.
    pub tap: Var<'t, T>,
    /// Last-layer patch tokens after the final normalisation, `[B·n, d]`.
    pub final_tokens: Var<'t, T>,
    /// Mean of `final_tokens` per image (the [AVG] token), `[B, d]`.
    pub avg: Var<'t, T>,
    /// Final-normalised [CLS] token per image, `[B, d]`.
    pub cls: Var<'t, T>,
    pub batch: usize,
    pub n_visible: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: ViTConfig,
    patch_embed: Linear,
    cls_token: ParamId,
    blocks: Vec<Block>,
    tap_norm: LayerNorm,
    final_norm: LayerNorm,
    pos: Tensor<f64>,
}

impl Encoder {
    /// Registers all encoder parameters in `store` (which should be
    /// dedicated to the encoder so the teacher can mirror it).
    pub fn new<T: Scalar>(cfg: &ViTConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_enc;
        let patch_embed = Linear::new(store, "enc.patch_embed", cfg.patch_dim(), d, rng);
        let cls_token = store.add("enc.cls_token", init::trunc_normal(vec![1, d], 0.02, rng), false);
        let blocks = (0..cfg.depth)
            .map(|l| Block::new(store, &format!("enc.blocks.{l}"), d, cfg.heads, rng))
            .collect();
        let tap_norm = LayerNorm::new(store, "enc.tap_norm", d);
        let final_norm = LayerNorm::new(store, "enc.norm", d);
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_embed,
            cls_token,
            blocks,
            tap_norm,
            final_norm,
            pos: sincos_positions(cfg.grid(), d)?,
        })
    }

    /// Linear patch embedding plus positions, with `[CLS]` prepended.
    pub fn patchify<'t, T: Scalar>(&self, p: &Bound<'t, T>, images: &Tensor<T>) -> Result<TokenSequence<'t, T>> {
        let patches = extract_patches(images, &self.cfg)?;
        let n = self.cfg.num_patches();
        let batch = patches.rows() / n;
        let d = self.cfg.d_enc;
        let tape = p.get(self.cls_token).tape();
        let pos: Tensor<T> = self.pos.cast();
        let mut tiled = Vec::with_capacity(batch * n * d);
        for _ in 0..batch {
            tiled.extend_from_slice(&pos.data()[d..]);
        }
        let emb = self
            .patch_embed
            .forward(p, tape.constant(patches))?
            .add(tape.constant(Tensor::new(vec![batch * n, d], tiled)?))?;
        let cls = p
            .get(self.cls_token)
            .add(tape.constant(Tensor::new(vec![1, d], pos.row(0).to_vec())?))?;
        let all = tape.concat_rows(&[emb, cls])?;
        let mut order = Vec::with_capacity(batch * (n + 1));
        for b in 0..batch {
            order.push(batch * n);
            order.extend((0..n).map(|i| b * n + i));
        }
        Ok(TokenSequence {
            tokens: all.select_rows(&order)?,
            batch,
            grid: self.cfg.grid(),
        })
    }

    /// Runs the encoder on `[CLS]` plus the visible patches of each image.
    /// `visible[b]` lists 0-based patch indices; all lists must have the same
    /// length.
    pub fn encode<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        seq: &TokenSequence<'t, T>,
        visible: &[Vec<usize>],
    ) -> Result<EncoderOutput<'t, T>> {
        let n = seq.num_patches();
        if visible.len() != seq.batch {
            return Err(MocaError::Contract(format!(
                "{} visible sets for a batch of {}",
                visible.len(),
                seq.batch
            )));
        }
        let n_vis = visible.first().map_or(0, Vec::len);
        if n_vis == 0 {
            return Err(MocaError::Contract("encoder needs at least one visible patch".into()));
        }
        let mut rows = Vec::with_capacity(seq.batch * (n_vis + 1));
        for (b, u) in visible.iter().enumerate() {
            if u.len() != n_vis {
                return Err(MocaError::Contract(format!(
                    "visible set sizes differ within the batch ({} vs {n_vis})",
                    u.len()
                )));
            }
            rows.push(b * (n + 1));
            for &i in u {
                if i >= n {
                    return Err(MocaError::Contract(format!("patch index {i} ≥ {n}")));
                }
                rows.push(b * (n + 1) + 1 + i);
            }
        }
        let s = n_vis + 1;
        let mut x = seq.tokens.select_rows(&rows)?;
        let mut tap_src = None;
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(p, x, s)?;
            if l + 1 == self.cfg.tap_layer {
                tap_src = Some(x);
            }
        }
        let tap_src = tap_src.expect("tap layer validated against depth");

        let patch_rows: Vec<usize> = (0..seq.batch)
            .flat_map(|b| (1..s).map(move |j| b * s + j))
            .collect();
        let cls_rows: Vec<usize> = (0..seq.batch).map(|b| b * s).collect();

        let tap = self.tap_norm.forward(p, tap_src.select_rows(&patch_rows)?)?;
        let normed = self.final_norm.forward(p, x)?;
        let final_tokens = normed.select_rows(&patch_rows)?;
        let cls = normed.select_rows(&cls_rows)?;
        let d = self.cfg.d_enc;
        let avg = final_tokens.reshape(vec![seq.batch, n_vis, d])?.mean_axis(1)?;
        Ok(EncoderOutput {
            tap,
            final_tokens,
            avg,
            cls,
            batch: seq.batch,
            n_visible: n_vis,
        })
    }

    /// Full-view forward pass (every patch visible).
    pub fn encode_full<'t, T: Scalar>(&self, p: &Bound<'t, T>, images: &Tensor<T>) -> Result<EncoderOutput<'t, T>> {
        let seq = self.patchify(p, images)?;
        let all: Vec<usize> = (0..seq.num_patches()).collect();
        let visible = vec![all; seq.batch];
        self.encode(p, &seq, &visible)
    }
}
