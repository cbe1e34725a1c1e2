//! Reference network: strided stem, attention blocks, upsampling, three heads.

pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, linear_grad_check, GradCheckReport};
pub use model::{ForwardCache, HeadOutputs, Net};
pub use params::{ema_update, load_checkpoint, save_checkpoint, NetParams, ParamSpec, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub stem_channels: usize,
    /// Output width of each attention block.
    pub block_channels: Vec<usize>,
    /// Attention modules per block; module `n` (1-based) uses dilation `n`.
    pub n_asa: Vec<usize>,
    pub head_channels: usize,
    pub n_cls: usize,
    /// `[height, width]`.
    pub input_size: [usize; 2],
    pub precision: Precision,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetConfig {
    /// Desk-scale default: 64×64 input, two blocks of 8 and 16 channels.
    pub fn toy() -> Self {
        Self {
            stem_channels: 8,
            block_channels: vec![8, 16],
            n_asa: vec![2, 2],
            head_channels: 16,
            n_cls: 2,
            input_size: [64, 64],
            precision: Precision::Single,
        }
    }

    /// Smallest useful config, in double precision, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            block_channels: vec![8],
            n_asa: vec![2],
            head_channels: 8,
            n_cls: 2,
            input_size: [16, 16],
            precision: Precision::Double,
        }
    }

    /// Segmentation channels: background, one per class, overlap.
    pub fn seg_channels(&self) -> usize {
        self.n_cls + 2
    }

    /// Blocks 1 and 2 (0-based) halve the resolution.
    pub fn block_stride(&self, block: usize) -> usize {
        if block == 1 || block == 2 {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.block_channels.is_empty() {
            return bad("at least one block is required");
        }
        if self.block_channels.len() != self.n_asa.len() {
            return bad("block_channels and n_asa must have the same length");
        }
        if self.n_asa.contains(&0) {
            return bad("every block needs at least one attention module");
        }
        if self.stem_channels == 0 || self.head_channels == 0 || self.block_channels.contains(&0) {
            return bad("channel counts must be positive");
        }
        if self.n_cls == 0 {
            return bad("n_cls must be positive");
        }
        if self.input_size.contains(&0) {
            return bad("input size must be positive");
        }
        Ok(())
    }
}
