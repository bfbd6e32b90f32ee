use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MocaError, Result};

/// ChaCha stream ids of the named random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Augment = 1,
    Shuffle = 2,
    Init = 3,
    Mask = 4,
    Codebook = 5,
}

/// Words reserved per augmented sample; augmentation draws far fewer.
const SAMPLE_WORDS: u128 = 1 << 12;

/// Key derived from the run seed; every stream is a ChaCha stream under it.
pub fn key(seed: u64) -> [u8; 32] {
    ChaCha8Rng::seed_from_u64(seed).get_seed()
}

/// Fresh generator for `stream` positioned at word `offset`.
pub fn stream_at(seed: u64, stream: Stream, offset: u128) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::from_seed(key(seed));
    r.set_stream(stream as u64);
    r.set_word_pos(offset);
    r
}

/// Generator for augmenting batch item `sample` at `step`; independent of
/// every other (step, sample) pair and of the order they are consumed in.
pub fn augment_rng(seed: u64, step: u64, sample: usize) -> ChaCha8Rng {
    let slot = ((step as u128) << 32) | sample as u128;
    stream_at(seed, Stream::Augment, slot * SAMPLE_WORDS)
}

/// Generator for the data order of `epoch`.
pub fn shuffle_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    stream_at(seed, Stream::Shuffle, (epoch as u128) << 48)
}

/// Serialised position of a sequential stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngRecord {
    pub name: String,
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngRecord {
    pub fn capture(name: &str, rng: &ChaCha8Rng) -> Self {
        RngRecord {
            name: name.into(),
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.name.len() + 32 + 8 + 16);
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.stream.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    /// Parses one record from the front of `bytes`; returns it and the bytes
    /// consumed.
    pub fn from_bytes(bytes: &[u8], base: u64) -> Result<(Self, usize)> {
        let short = |at: usize| MocaError::Format {
            offset: base + at as u64,
            msg: "RNG record ends early".into(),
        };
        let len = u32::from_le_bytes(bytes.get(..4).ok_or_else(|| short(0))?.try_into().unwrap()) as usize;
        let mut at = 4;
        let name = bytes.get(at..at + len).ok_or_else(|| short(at))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| MocaError::Format {
            offset: base + at as u64,
            msg: "RNG stream name is not UTF-8".into(),
        })?;
        at += len;
        let seed: [u8; 32] = bytes.get(at..at + 32).ok_or_else(|| short(at))?.try_into().unwrap();
        at += 32;
        let stream = u64::from_le_bytes(bytes.get(at..at + 8).ok_or_else(|| short(at))?.try_into().unwrap());
        at += 8;
        let word_pos = u128::from_le_bytes(bytes.get(at..at + 16).ok_or_else(|| short(at))?.try_into().unwrap());
        at += 16;
        Ok((
            RngRecord {
                name,
                seed,
                stream,
                word_pos,
            },
            at,
        ))
    }
}
