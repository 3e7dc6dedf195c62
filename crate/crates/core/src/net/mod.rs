//! The reconstruction network and its adversary.
//!
//! The generator is a three-scale encoder/decoder. Each scale is a group of
//! depthwise-bottleneck blocks with channel ("depth") attention, wrapped in
//! a learned groupwise skip; spatial attention gates feed the downsample
//! path and the decoder skips. Upsampling is conv + pixel shuffle + PReLU,
//! and the head maps back to RGB through a sigmoid. The discriminator is a
//! six-layer swish CNN over conditioned image pairs.

pub(crate) mod blocks;
mod discriminator;
mod generator;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::Generator;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Channel widths per scale, shallow to deep.
    pub depths: Vec<usize>,
    /// Attention blocks chained inside each group.
    pub blocks_per_group: usize,
    /// Squeeze ratio of the depth-attention MLP.
    pub reduction: usize,
    /// Bottleneck expansion factor.
    pub expansion: usize,
    /// Build the attention branches (channel and spatial). Disabling removes
    /// those parameters entirely rather than bypassing them at run time.
    pub attention: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depths: vec![64, 128, 256],
            blocks_per_group: 3,
            reduction: 16,
            expansion: 2,
            attention: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.len() < 2 {
            return Err(Error::Config(
                "network needs at least two scales (depths.len() >= 2)".into(),
            ));
        }
        if self.blocks_per_group == 0 {
            return Err(Error::Config("blocks_per_group must be at least 1".into()));
        }
        if self.expansion == 0 {
            return Err(Error::Config("expansion must be at least 1".into()));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction must be at least 1".into()));
        }
        for &d in &self.depths {
            if d == 0 {
                return Err(Error::Config("channel depths must be positive".into()));
            }
            if self.attention && d % self.reduction != 0 {
                return Err(Error::Config(format!(
                    "depth {d} is not divisible by the attention reduction {}",
                    self.reduction
                )));
            }
        }
        Ok(())
    }

    /// Input sides must be multiples of this (one factor of 2 per
    /// downsampling stage).
    pub fn alignment(&self) -> usize {
        1 << (self.depths.len() - 1)
    }
}
