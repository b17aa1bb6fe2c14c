//! The HQS-unrolled super-resolution network.
//!
//! The LR image is lifted into a `channels`-wide feature space at LR
//! resolution. A learned transposition produces the `H^T y` analogue, then
//! `iterations` rounds alternate a learned least-squares step and a learned
//! denoiser (stacked attention + hierarchical exploration blocks). Only the
//! final sub-pixel convolution leaves LR resolution.

mod features;
mod layout;
mod net;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{dump_features, FeatureMap, FeatureTrace, Stage};
pub use layout::{layout, param_count, ConvSpec, ParamCount};
pub use net::{Graph, HsrNet};

/// Channel groups in a hierarchical exploration block.
pub const HEB_BRANCHES: usize = 4;
/// Pooling levels (x1, x2, x4) in a multi-level spatial attention block.
pub const MSA_LEVELS: usize = 3;
/// Spatial sizes reaching the attention blocks must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 4;

/// How the attention map is applied to the block input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsaMode {
    /// `input * A`
    #[default]
    Gate,
    /// `input + A`
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsrConfig {
    pub channels: usize,
    pub n_blocks: usize,
    pub iterations: usize,
    pub scale: usize,
    pub leaky_slope: f64,
    pub msa_enabled: bool,
    pub msa_mode: MsaMode,
    pub share_iter_weights: bool,
}

impl Default for HsrConfig {
    fn default() -> Self {
        HsrConfig {
            channels: 64,
            n_blocks: 10,
            iterations: 3,
            scale: 4,
            leaky_slope: 0.1,
            msa_enabled: true,
            msa_mode: MsaMode::Gate,
            share_iter_weights: true,
        }
    }
}

impl HsrConfig {
    pub fn paper(scale: usize) -> Self {
        HsrConfig {
            scale,
            ..HsrConfig::default()
        }
    }

    /// Small configuration for smoke tests and overfitting runs.
    pub fn tiny(scale: usize) -> Self {
        HsrConfig {
            channels: 16,
            n_blocks: 2,
            iterations: 2,
            scale,
            ..HsrConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 16 != 0 {
            return Err(Error::Config(format!(
                "channels must be a positive multiple of 16, got {}",
                self.channels
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        check_scale(self.scale)?;
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Channels per attention branch and per exploration branch.
    pub fn branch_channels(&self) -> usize {
        self.channels / HEB_BRANCHES
    }
}

pub fn check_scale(scale: usize) -> Result<()> {
    if !(2..=4).contains(&scale) {
        return Err(Error::InvalidArgument(format!(
            "scale must be 2, 3 or 4, got {scale}"
        )));
    }
    Ok(())
}
