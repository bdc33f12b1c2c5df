//! Inputs of one window: quantized boxes, latent tokens and the shifted
//! patch crops feeding the object stream.

use super::config::ModelConfig;
use super::masks::WindowLayout;
use crate::boxes::{dequantize_box, extract_patch, grid_patch, QuantizedBox, BINS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Content of the patch tokens of one `(u, k)` object entry.
#[derive(Clone, Debug, PartialEq)]
pub enum PatchSlot {
    /// Learned pad token (first window timestep).
    Pad,
    /// All-zero tokens (absent or degenerate source box, or ablation).
    Zero,
    /// `C×R×R` crop to encode.
    Pixels(Tensor),
}

/// Everything the prior needs for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowInput {
    pub layout: WindowLayout,
    /// `[n_o][K]` boxes, window-local time first.
    pub boxes: Vec<Vec<QuantizedBox>>,
    /// `[n_b][h·w]` latent tokens of the modeled span (raster order). Only
    /// a prefix is needed when the base stream is truncated.
    pub z: Vec<Vec<usize>>,
    /// `[n_o·K]` patch contents, `(u, k)` row-major.
    pub patches: Vec<PatchSlot>,
}

impl WindowInput {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let lay = &self.layout;
        if self.boxes.len() != lay.n_o() || self.boxes.iter().any(|b| b.len() != cfg.k) {
            return Err(Error::contract(format!(
                "window needs {}×{} boxes",
                lay.n_o(),
                cfg.k
            )));
        }
        if self.patches.len() != lay.n_o() * cfg.k {
            return Err(Error::contract("patch slots do not match the window"));
        }
        if self.z.len() > lay.n_b || self.z.iter().any(|g| g.len() != cfg.latent_tokens()) {
            return Err(Error::contract("latent grids do not match the window"));
        }
        for g in &self.z {
            if let Some(&bad) = g.iter().find(|&&t| t >= cfg.vocab_z) {
                return Err(Error::Index(format!("latent token {bad} >= vocab {}", cfg.vocab_z)));
            }
        }
        for b in self.boxes.iter().flatten() {
            if let QuantizedBox::Present(bins) = b {
                if bins.iter().any(|&v| v as usize >= BINS) {
                    return Err(Error::Index(format!("box bin out of range: {bins:?}")));
                }
            }
        }
        Ok(())
    }

    /// Box tokens `[pres, x, y, w, h]` at `(u, k)`.
    pub fn box_tokens(&self, u: usize, k: usize) -> [usize; 5] {
        self.boxes[u][k].tokens()
    }
}

/// Patch contents for every `(u, k)` of a window. `frames[u]` is the frame
/// at window-local time `u`; the patch at `u` is cropped from `frames[u−1]`
/// under box `boxes[u−1][k]`, and `u = 0` uses the pad token.
pub fn collect_patches(
    cfg: &ModelConfig,
    frames: &[Tensor],
    boxes: &[Vec<QuantizedBox>],
) -> Result<Vec<PatchSlot>> {
    let n_o = boxes.len();
    let mut out = Vec::with_capacity(n_o * cfg.k);
    for u in 0..n_o {
        for k in 0..cfg.k {
            if cfg.ablations.no_patch_encoding {
                out.push(PatchSlot::Zero);
                continue;
            }
            if u == 0 {
                out.push(PatchSlot::Pad);
                continue;
            }
            let frame = frames.get(u - 1).ok_or_else(|| {
                Error::contract(format!("missing frame {} for the patch at window time {u}", u - 1))
            })?;
            if cfg.ablations.fixed_grid_patches {
                out.push(PatchSlot::Pixels(grid_patch(frame, k, cfg.k, cfg.patch_res)?));
                continue;
            }
            let b = boxes[u - 1][k];
            if !b.is_present() {
                out.push(PatchSlot::Zero);
                continue;
            }
            let p = extract_patch(frame, &dequantize_box(&b), cfg.patch_res)?;
            out.push(if p.degenerate {
                PatchSlot::Zero
            } else {
                PatchSlot::Pixels(p.tensor)
            });
        }
    }
    Ok(out)
}
