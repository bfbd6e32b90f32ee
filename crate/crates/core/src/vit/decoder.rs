use rand::Rng;

use super::config::ViTConfig;
use super::layers::{Block, LayerNorm};
use crate::error::{MocaError, Result};
use crate::numerics::{Scalar, Var};
use crate::params::{Bound, ParamStore};

/// Transformer stack over assembled decoder slots. A zero-depth decoder is
/// the identity (no final norm either).
#[derive(Clone, Debug)]
pub struct Decoder {
    pub d_dec: usize,
    blocks: Vec<Block>,
    norm: Option<LayerNorm>,
}

impl Decoder {
    pub fn new<T: Scalar>(cfg: &ViTConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let d = cfg.d_dec;
        let blocks: Vec<Block> = (0..cfg.dec_depth)
            .map(|l| Block::new(store, &format!("dec.blocks.{l}"), d, cfg.dec_heads, rng))
            .collect();
        let norm = (!blocks.is_empty()).then(|| LayerNorm::new(store, "dec.norm", d));
        Decoder { d_dec: d, blocks, norm }
    }

    /// `z` stacks `batch` sequences of `slots` rows each; returns one output
    /// row per input row, in input order.
    pub fn decode<'t, T: Scalar>(&self, p: &Bound<'t, T>, z: Var<'t, T>, slots: usize) -> Result<Var<'t, T>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.d_dec {
            return Err(MocaError::Config(format!(
                "decoder input {shape:?} does not match width {}",
                self.d_dec
            )));
        }
        if slots == 0 || shape[0] % slots != 0 {
            return Err(MocaError::Contract(format!(
                "{} decoder rows are not a whole number of {slots}-slot sequences",
                shape[0]
            )));
        }
        let mut x = z;
        for block in &self.blocks {
            x = block.forward(p, x, slots)?;
        }
        match &self.norm {
            Some(n) => n.forward(p, x),
            None => Ok(x),
        }
    }
}
