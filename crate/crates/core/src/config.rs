use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the pipeline. Widths are deliberately tiny so the whole
/// two-stage run fits on a laptop CPU; every field can be overridden.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Pixels per side of the (square) input image.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub n_vision_layers: usize,
    pub n_heads: usize,
    /// Number of learned queries, i.e. prefix pseudo-tokens handed to the decoder.
    pub n_queries: usize,
    pub n_query_layers: usize,
    pub d_decoder: usize,
    pub n_decoder_layers: usize,
    /// Set from the tokenizer when a model is built.
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub mlp_ratio: usize,
    /// Learned position embeddings on the patch sequence.
    pub vision_positions: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch_size: 8,
            d_vision: 64,
            n_vision_layers: 2,
            n_heads: 4,
            n_queries: 8,
            n_query_layers: 1,
            d_decoder: 64,
            n_decoder_layers: 2,
            vocab_size: 0,
            max_text_len: 160,
            mlp_ratio: 4,
            vision_positions: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_vision % self.n_heads != 0 || self.d_decoder % self.n_heads != 0 {
            return bad(format!(
                "d_vision {} and d_decoder {} must be divisible by n_heads {}",
                self.d_vision, self.d_decoder, self.n_heads
            ));
        }
        if self.max_text_len < 1 || self.n_queries < 1 {
            return bad("max_text_len and n_queries must both be at least 1".into());
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return bad("channels and mlp_ratio must be positive".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size is unset; build the tokenizer first".into());
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Decoder context: the prefix pseudo-tokens plus the text budget.
    pub fn context_len(&self) -> usize {
        self.n_queries + self.max_text_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> ModelConfig {
        ModelConfig { vocab_size: 10, ..ModelConfig::default() }
    }

    #[test]
    fn defaults_are_valid() {
        let c = valid();
        c.validate().unwrap();
        assert_eq!(c.n_patches(), 64);
        assert_eq!(c.patch_len(), 192);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ModelConfig { patch_size: 7, ..valid() }.validate().is_err());
        assert!(ModelConfig { n_heads: 3, ..valid() }.validate().is_err());
        assert!(ModelConfig { n_queries: 0, ..valid() }.validate().is_err());
        assert!(ModelConfig { max_text_len: 0, ..valid() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 0, ..valid() }.validate().is_err());
    }
}
