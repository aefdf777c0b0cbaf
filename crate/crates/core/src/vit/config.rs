use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the image representation is read off the final token matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final class token (DeiT style).
    ClassToken,
    /// Mean of the spatial tokens (Swin style).
    GlobalPool,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::ClassToken => "class_token",
            Pooling::GlobalPool => "global_pool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "class_token" => Some(Pooling::ClassToken),
            "global_pool" => Some(Pooling::GlobalPool),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    /// Desk preset: 32px input (padded MNIST), 4px patches, 4 layers.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 1,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 2,
            num_classes: 10,
            pooling: Pooling::ClassToken,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return fail("channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Spatial token count N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// N + 1, including the class token at row 0.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}
