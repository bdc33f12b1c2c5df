//! Token layout of a training/inference window and the four attention
//! masks derived from it.
//!
//! Object rows are ordered `((u·K) + k)·L + l` with `u` the window-local
//! time, `k` the slot and `l` the within-object position
//! `[patch…, pres, x, y, w, h]`. Base rows are `(j·h + r)·w + c` over the
//! modeled timesteps `j`. Modeled step `j` sits at object time `τ + j`.

use std::sync::Arc;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::AttnMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowLayout {
    /// Object-history timesteps preceding the modeled span.
    pub tau: usize,
    /// Modeled timesteps (base stream length).
    pub n_b: usize,
}

impl WindowLayout {
    pub fn new(cfg: &ModelConfig, tau: usize, n_b: usize) -> Result<Self> {
        if n_b == 0 || n_b > cfg.w_b {
            return Err(Error::contract(format!("modeled span {n_b} not in 1..={}", cfg.w_b)));
        }
        if tau > cfg.max_history() {
            return Err(Error::contract(format!(
                "history {tau} exceeds w_o - w_b = {}",
                cfg.max_history()
            )));
        }
        Ok(WindowLayout { tau, n_b })
    }

    /// Object-stream timesteps.
    pub fn n_o(&self) -> usize {
        self.tau + self.n_b
    }

    pub fn obj_rows(&self, cfg: &ModelConfig) -> usize {
        self.n_o() * cfg.k * cfg.tokens_per_object()
    }

    pub fn base_rows(&self, cfg: &ModelConfig) -> usize {
        self.n_b * cfg.latent_tokens()
    }

    pub fn obj_row(&self, cfg: &ModelConfig, u: usize, k: usize, l: usize) -> usize {
        (u * cfg.k + k) * cfg.tokens_per_object() + l
    }

    /// `(u, k, l)` of an object row.
    pub fn obj_coords(&self, cfg: &ModelConfig, row: usize) -> (usize, usize, usize) {
        let l_n = cfg.tokens_per_object();
        (row / (l_n * cfg.k), (row / l_n) % cfg.k, row % l_n)
    }

    /// Positional-table index of window-local object time `u`.
    pub fn time_index(&self, cfg: &ModelConfig, u: usize) -> usize {
        cfg.w_o - cfg.w_b - self.tau + u
    }
}

#[derive(Clone, Debug)]
pub struct AttnMasks {
    pub base_base: Arc<AttnMask>,
    pub base_obj: Arc<AttnMask>,
    pub obj_time: Arc<AttnMask>,
    pub obj_per_t: Arc<AttnMask>,
}

/// Masks for a window. `base_len` limits the base stream to its first rows
/// (exact for causal prefixes); `None` means the whole modeled span.
pub fn build_masks(cfg: &ModelConfig, layout: &WindowLayout, base_len: Option<usize>) -> Result<AttnMasks> {
    let n_base = layout.base_rows(cfg);
    let nb = base_len.unwrap_or(n_base);
    if nb == 0 || nb > n_base {
        return Err(Error::contract(format!("base prefix {nb} not in 1..={n_base}")));
    }
    let l_n = cfg.tokens_per_object();
    let n_obj = layout.obj_rows(cfg);
    let hw = cfg.latent_tokens();
    let base_base: Vec<Vec<usize>> = (0..nb).map(|q| (0..=q).collect()).collect();
    let base_obj: Vec<Vec<usize>> = (0..nb)
        .map(|q| {
            let u = layout.tau + q / hw;
            let lo = layout.obj_row(cfg, u, 0, 0);
            (lo..lo + cfg.k * l_n).collect()
        })
        .collect();
    let mut obj_time = Vec::with_capacity(n_obj);
    let mut obj_per_t = Vec::with_capacity(n_obj);
    for row in 0..n_obj {
        let (u, k, l) = layout.obj_coords(cfg, row);
        let mut keys = Vec::new();
        for u2 in 0..=u {
            let last = if u2 == u { l } else { l_n - 1 };
            keys.extend((0..=last).map(|l2| layout.obj_row(cfg, u2, k, l2)));
        }
        obj_time.push(keys);
        let start = layout.obj_row(cfg, u, 0, 0);
        obj_per_t.push((start..=row).collect());
    }
    Ok(AttnMasks {
        base_base: Arc::new(AttnMask::from_rows(nb, base_base)?),
        base_obj: Arc::new(AttnMask::from_rows(n_obj, base_obj)?),
        obj_time: Arc::new(AttnMask::from_rows(n_obj, obj_time)?),
        obj_per_t: Arc::new(AttnMask::from_rows(n_obj, obj_per_t)?),
    })
}
