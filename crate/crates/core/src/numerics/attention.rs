//! Masked multi-head attention kernels over sparse allow-lists.
//!
//! Scores are only evaluated for allowed (query, key) pairs, so a block
//! structured mask over a long token matrix costs what the blocks cost.
//! Disallowed pairs carry exactly zero weight and receive exactly zero
//! gradient.

use rand::Rng;

use crate::error::{Error, Result};

/// Allowed keys per query, stored compressed by row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    n_q: usize,
    n_k: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
}

impl AttnMask {
    /// Builds a mask from per-query allow lists. Keys within a row are sorted.
    pub fn from_rows(n_k: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for mut row in rows.iter().cloned() {
            row.sort_unstable();
            row.dedup();
            if let Some(&last) = row.last() {
                if last >= n_k {
                    return Err(Error::Index(format!(
                        "mask key {last} out of range for {n_k} keys"
                    )));
                }
            }
            cols.extend(row.into_iter().map(|c| c as u32));
            offsets.push(cols.len());
        }
        Ok(AttnMask {
            n_q: rows.len(),
            n_k,
            offsets,
            cols,
        })
    }

    /// Builds a mask by evaluating `allow(q, k)` on every pair.
    pub fn from_fn(n_q: usize, n_k: usize, allow: impl Fn(usize, usize) -> bool) -> Self {
        let rows = (0..n_q)
            .map(|q| (0..n_k).filter(|&k| allow(q, k)).collect())
            .collect();
        AttnMask::from_rows(n_k, rows).expect("keys in range by construction")
    }

    /// Standard lower-triangular mask.
    pub fn causal(n: usize) -> Self {
        AttnMask::from_fn(n, n, |q, k| k <= q)
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn keys(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        self.cols[self.offsets[q]..self.offsets[q + 1]]
            .iter()
            .map(|&c| c as usize)
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.cols[self.offsets[q]..self.offsets[q + 1]]
            .binary_search(&(k as u32))
            .is_ok()
    }

    /// Number of allowed pairs.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.n_q)
            .map(|q| {
                let mut row = vec![false; self.n_k];
                for k in self.keys(q) {
                    row[k] = true;
                }
                row
            })
            .collect()
    }
}

/// Saved forward state needed by the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct AttnSaved {
    /// Softmax weights per head, laid out like `mask.cols`.
    pub probs: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers per head (empty when dropout is off).
    pub keep: Vec<Vec<f64>>,
}

pub(crate) struct AttnDims {
    pub n_q: usize,
    pub dim: usize,
    pub heads: usize,
}

pub(crate) fn forward<R: Rng + ?Sized>(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: &AttnDims,
    mask: &AttnMask,
    dropout: Option<(f64, &mut R)>,
) -> (Vec<f64>, AttnSaved) {
    let dh = d.dim / d.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d.n_q * d.dim];
    let mut probs = vec![vec![0.0; mask.nnz()]; d.heads];
    let mut keep = Vec::new();
    let mut dropout = dropout;
    if dropout.is_some() {
        keep = vec![vec![1.0; mask.nnz()]; d.heads];
    }
    for h in 0..d.heads {
        let off = h * dh;
        for i in 0..d.n_q {
            let (lo, hi) = (mask.offsets[i], mask.offsets[i + 1]);
            if lo == hi {
                continue;
            }
            let qi = &q[i * d.dim + off..i * d.dim + off + dh];
            let p = &mut probs[h][lo..hi];
            let mut max = f64::NEG_INFINITY;
            for (slot, &j) in p.iter_mut().zip(&mask.cols[lo..hi]) {
                let kj = &k[j as usize * d.dim + off..j as usize * d.dim + off + dh];
                let s = scale * dot(qi, kj);
                *slot = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for s in p.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for s in p.iter_mut() {
                *s /= z;
            }
            if let Some((rate, rng)) = dropout.as_mut() {
                for m in keep[h][lo..hi].iter_mut() {
                    *m = if rng.random::<f64>() < *rate {
                        0.0
                    } else {
                        1.0 / (1.0 - *rate)
                    };
                }
            }
            let oi = &mut out[i * d.dim + off..i * d.dim + off + dh];
            for (n, &j) in mask.cols[lo..hi].iter().enumerate() {
                let w = if keep.is_empty() {
                    p[n]
                } else {
                    p[n] * keep[h][lo + n]
                };
                if w == 0.0 {
                    continue;
                }
                let vj = &v[j as usize * d.dim + off..j as usize * d.dim + off + dh];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
    }
    (out, AttnSaved { probs, keep })
}

/// Returns gradients for (q, k, v).
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: &AttnDims,
    mask: &AttnMask,
    saved: &AttnSaved,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d.dim / d.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = Vec::new();
    for h in 0..d.heads {
        let off = h * dh;
        for i in 0..d.n_q {
            let (lo, hi) = (mask.offsets[i], mask.offsets[i + 1]);
            if lo == hi {
                continue;
            }
            let p = &saved.probs[h][lo..hi];
            let doi = &dout[i * d.dim + off..i * d.dim + off + dh];
            dp.clear();
            let mut acc = 0.0;
            for (n, &j) in mask.cols[lo..hi].iter().enumerate() {
                let j = j as usize;
                let m = if saved.keep.is_empty() {
                    1.0
                } else {
                    saved.keep[h][lo + n]
                };
                let vj = &v[j * d.dim + off..j * d.dim + off + dh];
                let g = dot(doi, vj) * m;
                let w = p[n] * m;
                if w != 0.0 {
                    let dvj = &mut dv[j * d.dim + off..j * d.dim + off + dh];
                    for (a, &b) in dvj.iter_mut().zip(doi) {
                        *a += w * b;
                    }
                }
                acc += p[n] * g;
                dp.push(g);
            }
            let qi = &q[i * d.dim + off..i * d.dim + off + dh];
            for (n, &j) in mask.cols[lo..hi].iter().enumerate() {
                let j = j as usize;
                let ds = scale * p[n] * (dp[n] - acc);
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * d.dim + off..j * d.dim + off + dh];
                let dqi = &mut dq[i * d.dim + off..i * d.dim + off + dh];
                for (a, &b) in dqi.iter_mut().zip(kj) {
                    *a += ds * b;
                }
                let dkj = &mut dk[j * d.dim + off..j * d.dim + off + dh];
                for (a, &b) in dkj.iter_mut().zip(qi) {
                    *a += ds * b;
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_lists() {
        let m = AttnMask::causal(3);
        assert_eq!(m.keys(2).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(m.allows(1, 0));
        assert!(!m.allows(0, 1));
        assert_eq!(m.nnz(), 6);
    }

    #[test]
    fn out_of_range_key_rejected() {
        assert!(AttnMask::from_rows(2, vec![vec![0, 2]]).is_err());
    }
}
