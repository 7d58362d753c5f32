use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Side length of the square grayscale images.
pub const IMAGE_SIDE: usize = 8;
/// Side length of a square patch.
pub const PATCH_SIDE: usize = 2;
/// Pixels per patch token.
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;
/// Image tokens per sample.
pub const IMAGE_TOKENS: usize = (IMAGE_SIDE / PATCH_SIDE) * (IMAGE_SIDE / PATCH_SIDE);
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single token stream, one attention and one feed-forward gate per block.
    StandardDit,
    /// Visual and text streams with joint attention and per-stream gates.
    MmDit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub variant: Variant,
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Text tokens per sample, used by [`Variant::MmDit`] only.
    pub text_tokens: usize,
    /// Number of real classes; the null class id equals this value.
    pub class_count: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            variant: Variant::StandardDit,
            depth: 6,
            model_dim: 32,
            heads: 4,
            ff_mult: 4,
            text_tokens: 4,
            class_count: 4,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("invalid architecture: {m}")));
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if self.model_dim < 2 || !self.model_dim.is_multiple_of(2) {
            return bad(format!("model_dim must be even and >= 2, got {}", self.model_dim));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be positive".into());
        }
        if self.class_count == 0 || self.class_count > 4 {
            return bad(format!(
                "class_count must be in 1..=4 (procedural shapes), got {}",
                self.class_count
            ));
        }
        if self.variant == Variant::MmDit && self.text_tokens == 0 {
            return bad("MM-DiT needs at least one text token".into());
        }
        Ok(())
    }

    pub fn null_class(&self) -> usize {
        self.class_count
    }

    /// Gates per block: attention and feed-forward, per stream.
    pub fn gates_per_block(&self) -> usize {
        match self.variant {
            Variant::StandardDit => 2,
            Variant::MmDit => 4,
        }
    }

    pub fn streams(&self) -> usize {
        match self.variant {
            Variant::StandardDit => 1,
            Variant::MmDit => 2,
        }
    }

    pub fn ff_dim(&self) -> usize {
        self.model_dim * self.ff_mult
    }

    /// Width of one block's modulation output (summed over streams).
    pub fn modulation_width(&self) -> usize {
        6 * self.model_dim * self.streams()
    }

    /// Short stable digest used to bind calibrations to a model shape.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("arch serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
