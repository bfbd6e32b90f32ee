pub mod cli;
pub mod codebook;
pub mod error;
pub mod eval;
pub mod masking;
pub mod numerics;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod prototypes;
pub mod vit;

pub use error::{MocaError, Result};
