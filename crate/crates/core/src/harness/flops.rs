//! Analytic FLOP counts of one forward pass.
//!
//! Conventions: a `m×n · n×p` matmul costs `2mnp`; only matmul-like work
//! is counted (no norms, softmax or activations); attention is dense, so
//! masked query/key pairs are counted too. Each attention sub-operation
//! pays for its own query, key, value and output projections.

use serde::{Deserialize, Serialize};

use crate::boxes::COORD_VOCAB;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const FLOP_SCHEMA_VERSION: u32 = 1;

/// Per-bilinear-sample cost of a box crop (four weighted taps).
const CROP_FLOPS_PER_SAMPLE: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopMode {
    Povt,
    Full,
}

impl std::str::FromStr for FlopMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "povt" => Ok(FlopMode::Povt),
            "full" | "full_attention" => Ok(FlopMode::Full),
            _ => Err(Error::config(format!("unknown FLOP mode {s:?} (povt|full)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopComponents {
    /// Base self-attention (the only attention in full mode).
    pub base_base: u64,
    pub base_obj: u64,
    pub obj_time: u64,
    pub obj_per_t: u64,
    pub mlp_base: u64,
    pub mlp_obj: u64,
    /// Output heads (latent head plus box heads).
    pub heads: u64,
    /// Patch-encoder convolution.
    pub embeddings: u64,
    /// Box-guided bilinear crops.
    pub roi_crop: u64,
}

impl FlopComponents {
    pub fn total(&self) -> u64 {
        self.base_base
            + self.base_obj
            + self.obj_time
            + self.obj_per_t
            + self.mlp_base
            + self.mlp_obj
            + self.heads
            + self.embeddings
            + self.roi_crop
    }

    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> [(&'static str, u64); 9] {
        [
            ("base_base", self.base_base),
            ("base_obj", self.base_obj),
            ("obj_time", self.obj_time),
            ("obj_per_t", self.obj_per_t),
            ("mlp_base", self.mlp_base),
            ("mlp_obj", self.mlp_obj),
            ("heads", self.heads),
            ("embeddings", self.embeddings),
            ("roi_crop", self.roi_crop),
        ]
    }
}

/// Cost of generating one frame once the windows are full.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationCost {
    /// Tokens sampled per frame (`K·5` box tokens plus `h·w` latents).
    pub tokens: u64,
    /// One full window forward pass per sampled token.
    pub naive: u64,
    /// New rows only, attending to cached keys and values.
    pub cached: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub schema_version: u32,
    pub mode: FlopMode,
    pub frames: usize,
    /// Components of the requested mode.
    pub components: FlopComponents,
    pub total: u64,
    pub povt_total: u64,
    pub full_total: u64,
    /// `full_total / povt_total`.
    pub ratio: f64,
    /// Three times the forward cost when the training estimate is asked for.
    pub train_estimate: Option<u64>,
    pub generation: GenerationCost,
}

fn attention(sq: u64, sk: u64, d: u64) -> u64 {
    if sq == 0 || sk == 0 {
        return 0;
    }
    let proj = 2 * sq * d * d + 2 * 2 * sk * d * d + 2 * sq * d * d;
    proj + 2 * (2 * sq * sk * d)
}

/// Row counts of one pass: queries may be a suffix of the keys.
struct Rows {
    obj_q: u64,
    obj_k: u64,
    base_q: u64,
    base_k: u64,
    /// `(u, k)` entries whose box heads and patches are evaluated.
    entries_q: u64,
}

fn povt_components(cfg: &ModelConfig, r: &Rows) -> FlopComponents {
    let ab = cfg.ablations;
    let d = cfg.dim as u64;
    let m = cfg.mlp_dim as u64;
    let layers = cfg.layers as u64;
    let on = |off: bool, v: u64| if off { 0 } else { v };
    let p = cfg.patch_tokens() as u64;
    let kk = (cfg.patch_res / cfg.patch_grid.max(1)) as u64;
    let c = cfg.channels as u64;
    let patch_q = if ab.no_patch_encoding { 0 } else { r.entries_q };
    FlopComponents {
        base_base: layers * on(ab.drop_base_base, attention(r.base_q, r.base_k, d)),
        base_obj: layers * on(ab.drop_base_obj, attention(r.base_q, r.obj_k, d)),
        obj_time: layers * on(ab.drop_obj_time, attention(r.obj_q, r.obj_k, d)),
        obj_per_t: layers * on(ab.drop_obj_per_t, attention(r.obj_q, r.obj_k, d)),
        mlp_base: layers * 4 * r.base_q * d * m,
        mlp_obj: layers * 4 * r.obj_q * d * m,
        heads: 2 * r.base_q * d * cfg.vocab_z as u64 + 2 * r.entries_q * d * (2 + 4 * COORD_VOCAB as u64),
        embeddings: 2 * patch_q * p * (c * kk * kk) * d,
        roi_crop: if ab.fixed_grid_patches {
            0
        } else {
            patch_q * c * (cfg.patch_res * cfg.patch_res) as u64 * CROP_FLOPS_PER_SAMPLE
        },
    }
}

/// POVT forward over `frames` timesteps: the object stream spans all of
/// them, the base stream the last `min(W_b, frames)`.
fn povt_pass(cfg: &ModelConfig, frames: usize) -> FlopComponents {
    let kl = (cfg.k * cfg.tokens_per_object()) as u64;
    let hw = cfg.latent_tokens() as u64;
    let obj = frames as u64 * kl;
    let base = cfg.w_b.min(frames) as u64 * hw;
    povt_components(
        cfg,
        &Rows {
            obj_q: obj,
            obj_k: obj,
            base_q: base,
            base_k: base,
            entries_q: (frames * cfg.k) as u64,
        },
    )
}

/// Single-stream decoder over `frames·h·w` latent tokens of equal depth
/// and width.
fn full_pass(cfg: &ModelConfig, frames: usize) -> FlopComponents {
    let d = cfg.dim as u64;
    let s = (frames * cfg.latent_tokens()) as u64;
    let layers = cfg.layers as u64;
    FlopComponents {
        base_base: layers * attention(s, s, d),
        mlp_base: layers * 4 * s * d * cfg.mlp_dim as u64,
        heads: 2 * s * d * cfg.vocab_z as u64,
        ..FlopComponents::default()
    }
}

fn generation_cost(cfg: &ModelConfig) -> GenerationCost {
    let tokens = (cfg.k * 5 + cfg.latent_tokens()) as u64;
    let window = povt_pass(cfg, cfg.w_o).total();
    let kl = (cfg.k * cfg.tokens_per_object()) as u64;
    let hw = cfg.latent_tokens() as u64;
    let cached = povt_components(
        cfg,
        &Rows {
            obj_q: kl,
            obj_k: cfg.w_o as u64 * kl,
            base_q: hw,
            base_k: cfg.w_b as u64 * hw,
            entries_q: cfg.k as u64,
        },
    )
    .total();
    GenerationCost {
        tokens,
        naive: tokens * window,
        cached,
    }
}

fn check(cfg: &ModelConfig, frames: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::config("frame span must be positive"));
    }
    if cfg.w_b == 0 || cfg.layers == 0 || cfg.dim == 0 || cfg.patch_grid == 0 {
        return Err(Error::config("w_b, layers, dim and patch_grid must be positive"));
    }
    Ok(())
}

/// FLOP report of one forward pass over `frames` timesteps. `K = 0` is
/// accepted (no objects).
pub fn count_flops(cfg: &ModelConfig, mode: FlopMode, frames: usize, train_estimate: bool) -> Result<FlopReport> {
    check(cfg, frames)?;
    let povt = povt_pass(cfg, frames);
    let full = full_pass(cfg, frames);
    let components = match mode {
        FlopMode::Povt => povt,
        FlopMode::Full => full,
    };
    let total = components.total();
    Ok(FlopReport {
        schema_version: FLOP_SCHEMA_VERSION,
        mode,
        frames,
        components,
        total,
        povt_total: povt.total(),
        full_total: full.total(),
        ratio: full.total() as f64 / povt.total() as f64,
        train_estimate: train_estimate.then_some(3 * total),
        generation: generation_cost(cfg),
    })
}
