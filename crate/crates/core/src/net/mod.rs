//! Conditional velocity network: a small space-time patch transformer with
//! attribute tokens, envmap modulation, a keyframe cross-attention adapter
//! and an optional inverse-rendering adapter.

mod layers;
mod model;
mod params;
mod patch;
mod rope;

pub use layers::{abs0, attention, layer_norm, softmax_last, Linear, Lora};
pub use model::{Conditioning, InverseHeads, Keyframes, Modality, RefClip, RenderNet};
pub use params::{Builder, GroupMask, Init, Param, ParamGroup, ParamStore};
pub use patch::{patchify, unpatchify, TokenGrid};
pub use rope::{rope_apply, rope_tensor, ROPE_BASE};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ATTRIBUTE_CHANNELS: usize = 8;
/// zt (3) + masked reference (3) + mask (1).
pub const INPUT_CHANNELS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyframeVariant {
    #[default]
    ReusedQuery,
    DedicatedQuery,
}

impl std::str::FromStr for KeyframeVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reused_query" => Ok(Self::ReusedQuery),
            "dedicated_query" => Ok(Self::DedicatedQuery),
            _ => Err(Error::invalid(format!("unknown keyframe variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: f64,
    pub lora_rank: usize,
    pub keyframe_variant: KeyframeVariant,
    pub keyframe_ffn_lora: bool,
    pub height: usize,
    pub width: usize,
    pub env_height: usize,
    pub env_width: usize,
    pub env_patch: usize,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 128,
            depth: 6,
            heads: 4,
            ffn_mult: 4.0,
            lora_rank: 8,
            keyframe_variant: KeyframeVariant::ReusedQuery,
            keyframe_ffn_lora: false,
            height: 64,
            width: 64,
            env_height: 16,
            env_width: 32,
            env_patch: 4,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    /// Returns the offending field and reason on failure.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let pos = |name: &'static str, v: usize| {
            if v == 0 {
                Err((name, "must be positive".to_string()))
            } else {
                Ok(())
            }
        };
        pos("patch", self.patch)?;
        pos("dim", self.dim)?;
        pos("depth", self.depth)?;
        pos("heads", self.heads)?;
        pos("lora_rank", self.lora_rank)?;
        pos("env_patch", self.env_patch)?;
        if !self.dim.is_multiple_of(self.heads) {
            return Err(("heads", format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(("heads", format!("head_dim {} must be even", self.head_dim())));
        }
        if !(self.ffn_mult.is_finite() && self.ffn_mult > 0.0) {
            return Err(("ffn_mult", "must be positive".into()));
        }
        if self.height == 0 || !self.height.is_multiple_of(self.patch) {
            return Err(("height", format!("{} not divisible by patch {}", self.height, self.patch)));
        }
        if self.width == 0 || !self.width.is_multiple_of(self.patch) {
            return Err(("width", format!("{} not divisible by patch {}", self.width, self.patch)));
        }
        if self.env_height == 0 || !self.env_height.is_multiple_of(self.env_patch) {
            return Err(("env_height", "not divisible by env_patch".into()));
        }
        if self.env_width == 0 || !self.env_width.is_multiple_of(self.env_patch) {
            return Err(("env_width", "not divisible by env_patch".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(f, r)| Error::invalid(format!("net.{f}: {r}")))
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        ((self.dim as f64 * self.ffn_mult).round() as usize).max(1)
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn env_tokens(&self) -> usize {
        (self.env_height / self.env_patch) * (self.env_width / self.env_patch)
    }
}
