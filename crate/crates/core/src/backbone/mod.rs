//! ViT-style classifier: a trunk `f_b` (patch embedding, pre-norm attention
//! blocks that accept key/value prefixes) and a linear head `f_φ` on the
//! class token.

mod model;
mod params;
mod pretrain;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{msa_prefix, patch_embed, Backbone, BlockVars, PrefixVars};
pub use params::{BackboneParams, ParamGroup, Trainable};
pub use pretrain::{pretrain, PretrainOptions, PretrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// 1-indexed attention layers that receive the domain-invariant prompt.
    pub dip_layers: Vec<usize>,
    /// 1-indexed attention layers that receive the domain-specific prompt.
    pub dsp_layers: Vec<usize>,
    /// Tokens per key prefix (and per value prefix) of every prompt block.
    pub prompt_half_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 2,
            dip_layers: vec![1, 2],
            dsp_layers: vec![3, 4],
            prompt_half_len: 5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.num_classes < 2 {
            return fail("depth, channels and mlp_ratio must be positive, num_classes >= 2".into());
        }
        if self.prompt_half_len == 0 {
            return fail("prompt_half_len must be positive".into());
        }
        let dip: BTreeSet<_> = self.dip_layers.iter().copied().collect();
        let dsp: BTreeSet<_> = self.dsp_layers.iter().copied().collect();
        if dip.len() != self.dip_layers.len() || dsp.len() != self.dsp_layers.len() {
            return fail("duplicate prompt layer index".into());
        }
        if dip.is_empty() || dsp.is_empty() {
            return fail("both prompt kinds need at least one layer".into());
        }
        if let Some(l) = dip.intersection(&dsp).next() {
            return fail(format!("layer {l} assigned to both prompt kinds"));
        }
        if let Some(l) = dip.iter().chain(&dsp).find(|&&l| l == 0 || l > self.depth) {
            return fail(format!("prompt layer {l} outside 1..={}", self.depth));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}
