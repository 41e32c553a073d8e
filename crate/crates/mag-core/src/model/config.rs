//! Transformer configuration shared by teacher, student, generator and
//! memory models.

use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Whole-clip attention, no cache (the teacher).
    Bidirectional,
    /// Block-by-block generation against a cache.
    BlockCausal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Frames per block; equals the cache compression rate under last-frame
    /// retention.
    pub block_frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub attention_mode: AttentionMode,
    pub scene_vocab: usize,
    pub motion_vocab: usize,
    pub time_embed_dim: usize,
    /// Highest admissible token position id; exceeding it is a horizon error.
    pub max_position: u32,
    pub rope_base: f64,
}

impl ModelConfig {
    /// Desk-scale default: 24x24 grayscale frames, patch 4 -> 36 tokens per
    /// frame, blocks of 3 frames.
    pub fn desk_default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            patch_size: 4,
            block_frames: 3,
            frame_h: 24,
            frame_w: 24,
            channels: 1,
            attention_mode: AttentionMode::BlockCausal,
            scene_vocab: 8,
            motion_vocab: 4,
            time_embed_dim: 32,
            max_position: 1 << 20,
            rope_base: 10000.0,
        }
    }

    /// Small configuration used by fast tests and the acceptance trainings.
    pub fn tiny(layers: usize, d_model: usize, heads: usize, patch: usize, b: usize) -> Self {
        ModelConfig {
            layers,
            d_model,
            heads,
            patch_size: patch,
            block_frames: b,
            ..Self::desk_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(MagError::Config("layers, d_model, heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(MagError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.d_model / self.heads).is_multiple_of(2) {
            return Err(MagError::Config("head dim must be even for rotary embedding".into()));
        }
        if !self.frame_h.is_multiple_of(self.patch_size) || !self.frame_w.is_multiple_of(self.patch_size) {
            return Err(MagError::Config(format!(
                "frame {}x{} not divisible by patch {}",
                self.frame_h, self.frame_w, self.patch_size
            )));
        }
        if self.block_frames == 0 {
            return Err(MagError::Config("block_frames must be >= 1".into()));
        }
        Ok(())
    }

    /// Tokens per frame.
    pub fn frame_tokens(&self) -> usize {
        (self.frame_h / self.patch_size) * (self.frame_w / self.patch_size)
    }

    /// Tokens per block.
    pub fn block_tokens(&self) -> usize {
        self.frame_tokens() * self.block_frames
    }

    /// Values per token.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn frame_values(&self) -> usize {
        self.frame_h * self.frame_w * self.channels
    }

    /// Everything that determines parameter shapes (attention mode and
    /// horizon excluded).
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        self.layers == other.layers
            && self.d_model == other.d_model
            && self.heads == other.heads
            && self.patch_size == other.patch_size
            && self.frame_h == other.frame_h
            && self.frame_w == other.frame_w
            && self.channels == other.channels
            && self.scene_vocab == other.scene_vocab
            && self.motion_vocab == other.motion_vocab
            && self.time_embed_dim == other.time_embed_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        let c = ModelConfig::desk_default();
        c.validate().unwrap();
        assert_eq!(c.frame_tokens(), 36);
        assert_eq!(c.patch_dim(), 16);
    }

    #[test]
    fn indivisible_patch_rejected() {
        let mut c = ModelConfig::desk_default();
        c.patch_size = 5;
        assert!(c.validate().is_err());
    }
}
