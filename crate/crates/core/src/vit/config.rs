use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters for the micro-ViT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    /// Native input side in pixels (square images).
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub num_registers: usize,
    /// `false` selects pooled mode: no [CLS], the head reads the patch mean.
    #[serde(default = "default_true")]
    pub use_cls: bool,
    pub num_classes: usize,
    #[serde(default = "default_eps")]
    pub layernorm_eps: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-6
}

impl ViTConfig {
    /// The desk-scale model used across tests and examples:
    /// 32px images, 8px patches, D=32, 2 blocks, 4 heads.
    pub fn micro(num_registers: usize, num_classes: usize) -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            num_registers,
            use_cls: true,
            num_classes,
            layernorm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return bad("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return bad("depth, mlp_ratio and num_classes must be positive".into());
        }
        if !(self.layernorm_eps >= 0.0 && self.layernorm_eps.is_finite()) {
            return bad(format!("layernorm_eps {} invalid", self.layernorm_eps));
        }
        Ok(())
    }

    /// Patches per side at native resolution.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Rows of `pos_embed`: one per grid cell plus one for [CLS].
    pub fn pos_rows(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls)
    }

    pub fn layout(&self, grid: usize) -> SequenceLayout {
        SequenceLayout {
            use_cls: self.use_cls,
            num_registers: self.num_registers,
            grid,
        }
    }
}

/// Where each kind of token sits in the sequence: [CLS]?, registers, patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub use_cls: bool,
    pub num_registers: usize,
    pub grid: usize,
}

impl SequenceLayout {
    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn register_offset(&self) -> usize {
        usize::from(self.use_cls)
    }

    pub fn patch_offset(&self) -> usize {
        usize::from(self.use_cls) + self.num_registers
    }

    pub fn seq_len(&self) -> usize {
        self.patch_offset() + self.num_patches()
    }

    pub fn patch_rows(&self) -> std::ops::Range<usize> {
        self.patch_offset()..self.seq_len()
    }

    pub fn register_rows(&self) -> std::ops::Range<usize> {
        self.register_offset()..self.patch_offset()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_lengths() {
        let l = SequenceLayout { use_cls: true, num_registers: 0, grid: 2 };
        assert_eq!(l.seq_len(), 5);
        let l = SequenceLayout { use_cls: true, num_registers: 4, grid: 2 };
        assert_eq!(l.seq_len(), 9);
        assert_eq!(l.register_rows(), 1..5);
        let l = SequenceLayout { use_cls: false, num_registers: 2, grid: 2 };
        assert_eq!(l.seq_len(), 6);
        assert_eq!(l.patch_rows(), 2..6);
    }

    #[test]
    fn validation() {
        assert!(ViTConfig::micro(4, 8).validate().is_ok());
        let mut c = ViTConfig::micro(0, 8);
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::micro(0, 8);
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
