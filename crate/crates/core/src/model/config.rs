use serde::{Deserialize, Serialize};

use crate::boxes::{BOX_TOKENS, COORD_VOCAB};
use crate::error::{Error, Result};

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_patch_encoding: bool,
    pub fixed_grid_patches: bool,
    pub drop_base_base: bool,
    pub drop_base_obj: bool,
    pub drop_obj_time: bool,
    pub drop_obj_per_t: bool,
}

impl Ablations {
    /// Every single-flag variant, with its name.
    pub fn each() -> Vec<(&'static str, Ablations)> {
        let d = Ablations::default();
        vec![
            ("no_patch_encoding", Ablations { no_patch_encoding: true, ..d }),
            ("fixed_grid_patches", Ablations { fixed_grid_patches: true, ..d }),
            ("drop_base_base", Ablations { drop_base_base: true, ..d }),
            ("drop_base_obj", Ablations { drop_base_obj: true, ..d }),
            ("drop_obj_time", Ablations { drop_obj_time: true, ..d }),
            ("drop_obj_per_t", Ablations { drop_obj_per_t: true, ..d }),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Base-stream (latent) timesteps.
    pub w_b: usize,
    /// Object-stream timesteps.
    pub w_o: usize,
    /// Object slots.
    pub k: usize,
    /// Patch tokens per object are `patch_grid²`.
    pub patch_grid: usize,
    /// Crop resolution before patch encoding.
    pub patch_res: usize,
    pub channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub vocab_z: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    /// One set of Q/K/V/O projections per block shared by all four
    /// attention sub-operations.
    pub shared_attn: bool,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            w_b: 1,
            w_o: 8,
            k: 4,
            patch_grid: 1,
            patch_res: 8,
            channels: 3,
            latent_h: 8,
            latent_w: 8,
            vocab_z: 128,
            layers: 4,
            heads: 4,
            dim: 128,
            mlp_dim: 512,
            dropout: 0.2,
            attn_dropout: 0.3,
            shared_attn: true,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    /// Full-size settings (16×16 latents, 10 objects, 8 layers of width 512).
    pub fn full_size() -> Self {
        ModelConfig {
            w_b: 1,
            w_o: 8,
            k: 10,
            patch_grid: 1,
            patch_res: 8,
            latent_h: 16,
            latent_w: 16,
            vocab_z: 1024,
            layers: 8,
            heads: 8,
            dim: 512,
            mlp_dim: 2048,
            ..ModelConfig::default()
        }
    }

    /// Patch tokens per object.
    pub fn patch_tokens(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    /// Tokens per object per timestep.
    pub fn tokens_per_object(&self) -> usize {
        self.patch_tokens() + BOX_TOKENS
    }

    pub fn latent_tokens(&self) -> usize {
        self.latent_h * self.latent_w
    }

    /// Largest object history that still fits the positional table.
    pub fn max_history(&self) -> usize {
        self.w_o - self.w_b
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_b == 0 || self.w_o < self.w_b {
            return Err(Error::config(format!("need w_o >= w_b >= 1 (w_b={}, w_o={})", self.w_b, self.w_o)));
        }
        if self.k == 0 {
            return Err(Error::config("need at least one object slot"));
        }
        if self.patch_grid == 0 || self.patch_res % self.patch_grid != 0 {
            return Err(Error::config(format!(
                "patch_res {} not divisible by patch_grid {}",
                self.patch_res, self.patch_grid
            )));
        }
        if self.latent_h == 0 || self.latent_w == 0 || self.vocab_z < 2 || self.channels == 0 {
            return Err(Error::config("latent grid and vocabulary must be non-empty"));
        }
        if self.layers == 0 || self.dim == 0 || self.mlp_dim == 0 {
            return Err(Error::config("layers, dim and mlp_dim must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide dim {}", self.heads, self.dim)));
        }
        for (name, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name}={p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Trainable scalar count, computed from the config alone.
    pub fn param_count(&self) -> usize {
        let (d, m) = (self.dim, self.mlp_dim);
        let p = self.patch_tokens();
        let kk = self.patch_res / self.patch_grid.max(1);
        let embed = self.vocab_z * d
            + d
            + (self.w_b + self.latent_h + self.latent_w) * d
            + (d * self.channels * kk * kk + d)
            + p * d
            + 2 * d
            + 4 * 64 * d
            + (self.w_o + self.tokens_per_object()) * d;
        let attn_sets = if self.shared_attn { 1 } else { 4 };
        let block = attn_sets * 4 * (d * d + d) + 4 * 2 * d + 2 * (d * m + m + m * d + d);
        let heads = 2 * 2 * d + (d * 2 + 2) + 4 * (d * COORD_VOCAB + COORD_VOCAB) + (d * self.vocab_z + self.vocab_z);
        embed + self.layers * block + heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens_per_object(), 6);
        assert_eq!((c.dropout, c.attn_dropout), (0.2, 0.3));
        ModelConfig::full_size().validate().unwrap();
    }

    #[test]
    fn invalid_windows_rejected() {
        let c = ModelConfig { w_b: 4, w_o: 2, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }
}
