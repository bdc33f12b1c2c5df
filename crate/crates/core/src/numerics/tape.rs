//! Wengert tape: every op appends a node holding its value and enough
//! state to replay the chain rule in reverse.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttnDims, AttnMask, AttnSaved};
use super::conv::{self, ConvGeom};
use super::tensor::{gemm, strides, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttnMask>,
        saved: AttnSaved,
    },
    StraightThrough(Var),
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape created with [`Tape::training`] samples dropout masks from its own
/// seeded generator; [`Tape::new`] is evaluation mode and dropout is the
/// identity.
pub struct Tape {
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when the node did not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => {
                let n = shape.iter().product();
                Tensor::from_parts(shape, vec![0.0; n])
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            rng: None,
        }
    }

    pub fn training(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Constant copy of `v`'s value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let (n2, p) = self.value(b).dims2()?;
        if n != n2 {
            return Err(Error::shape(format!(
                "matmul: inner dimensions {m}x{n} * {n2}x{p}"
            )));
        }
        let mut out = vec![0.0; m * p];
        gemm(
            m,
            n,
            p,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, p], out), Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "bias of length {} for rows of width {n}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRowBias(a, bias), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Normalizes each row of `x` (last axis), then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm: gain/bias width mismatch"));
        }
        let vx = self.value(x);
        let rows = vx.len() / n;
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let xh = (row[i] - mu) * rs;
                xhat[r * n + i] = xh;
                out[r * n + i] = xh * g[i] + b[i];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = *va.shape().last().unwrap();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Mean negative log-softmax of the target logits over rows not ignored.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: &[bool],
    ) -> Result<Var> {
        let kept = ignore.iter().filter(|&&i| !i).count();
        if kept == 0 {
            return Err(Error::DegenerateLoss(
                "all positions ignored in cross-entropy".into(),
            ));
        }
        self.cross_entropy_weighted(logits, targets, ignore, 1.0 / kept as f64)
    }

    /// Sum (not mean) of negative log-likelihoods over rows not ignored.
    /// Returns an exact zero when every row is ignored.
    pub fn softmax_cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: &[bool],
    ) -> Result<Var> {
        self.cross_entropy_weighted(logits, targets, ignore, 1.0)
    }

    fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: &[bool],
        w: f64,
    ) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2()?;
        if targets.len() != rows || ignore.len() != rows {
            return Err(Error::shape(format!(
                "cross-entropy: {rows} rows but {} targets / {} ignore flags",
                targets.len(),
                ignore.len()
            )));
        }
        let weights: Vec<f64> = ignore.iter().map(|&i| if i { 0.0 } else { w }).collect();
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * classes..(r + 1) * classes];
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= classes {
                return Err(Error::Index(format!(
                    "target {t} outside vocabulary of {classes}"
                )));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[t]);
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            rg,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (va, vb) = (self.value(a), self.value(b));
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let t = Tensor::scalar(s / va.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mse(a, b), rg))
    }

    /// Selects rows of a 2-D tensor (embedding lookup).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(src).dims2()?;
        let vs = self.value(src).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("row {i} out of {rows}")));
            }
            data.extend_from_slice(&vs[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::from_parts(vec![idx.len(), cols], data);
        let rg = self.rg(&[src]);
        Ok(self.push(
            t,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows of nothing"));
        };
        let (_, cols) = self.value(first).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape(format!(
                    "concat_rows: width {c} vs {cols}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Multiplies each row of a 2-D tensor by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if factors.len() != rows {
            return Err(Error::shape("scale_rows: factor count"));
        }
        let mut data = self.value(x).data().to_vec();
        for (row, &f) in data.chunks_mut(cols).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ScaleRows {
                x,
                factors: factors.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("bad permutation {axes:?} for {shape:?}")));
        }
        let t = permute_tensor(self.value(x), axes);
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// 2-D cross-correlation: x `[B×C×H×W]`, w `[O×C×k×k]`, optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bs, c, h, wd) = self.value(x).dims4()?;
        let (o, c2, k, k2) = self.value(w).dims4()?;
        if c != c2 || k != k2 {
            return Err(Error::shape(format!(
                "conv2d: input channels {c} / kernel {:?}",
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(Error::shape("conv2d: bias length"));
            }
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)?;
        let (ho, wo) = (geom.out_h, geom.out_w);
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let mut out = vec![0.0; bs * o * ho * wo];
        let img = c * h * wd;
        let per = o * ho * wo;
        for bi in 0..bs {
            let cols = conv::im2col(&xv[bi * img..(bi + 1) * img], &geom);
            gemm(
                o,
                geom.col_rows(),
                ho * wo,
                1.0,
                wv,
                false,
                &cols,
                false,
                0.0,
                &mut out[bi * per..(bi + 1) * per],
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), ho * wo);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![bs, o, ho, wo], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Transposed convolution: x `[B×Cin×H×W]`, w `[Cin×Cout×k×k]`;
    /// output side `(H−1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (bs, cin, h, wd) = self.value(x).dims4()?;
        let (cin2, cout, k, k2) = self.value(w).dims4()?;
        if cin != cin2 || k != k2 || stride == 0 {
            return Err(Error::shape(format!(
                "conv_transpose2d: input channels {cin} / kernel {:?}",
                self.shape(w)
            )));
        }
        let side = |n: usize| -> Result<usize> {
            let full = (n - 1) * stride + k;
            if full <= 2 * pad {
                return Err(Error::shape("conv_transpose2d: padding exceeds output"));
            }
            Ok(full - 2 * pad)
        };
        let (ho, wo) = (side(h)?, side(wd)?);
        // The adjoint convolution reads the output image and produces `x`'s grid.
        let geom = ConvGeom::new(cout, ho, wo, k, stride, pad)?;
        if geom.out_h != h || geom.out_w != wd {
            return Err(Error::shape("conv_transpose2d: inconsistent geometry"));
        }
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let per_in = cin * h * wd;
        let per_out = cout * ho * wo;
        let mut out = vec![0.0; bs * per_out];
        let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
        for bi in 0..bs {
            gemm(
                geom.col_rows(),
                cin,
                h * wd,
                1.0,
                wv,
                true,
                &xv[bi * per_in..(bi + 1) * per_in],
                false,
                0.0,
                &mut cols,
            );
            conv::col2im(&cols, &geom, &mut out[bi * per_out..(bi + 1) * per_out]);
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape("conv_transpose2d: bias length"));
            }
            add_channel_bias(&mut out, self.value(b).data(), ho * wo);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![bs, cout, ho, wo], out),
            Op::ConvTranspose2d { x, w, b, geom },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention restricted to `mask`.
    /// q `[Sq×D]`, k and v `[Sk×D]`; output `[Sq×D]`. Queries with no
    /// allowed key produce zero rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttnMask>,
        dropout: f64,
    ) -> Result<Var> {
        let (sq, d) = self.value(q).dims2()?;
        let (sk, dk) = self.value(k).dims2()?;
        let (sv, dv) = self.value(v).dims2()?;
        if d != dk || d != dv || sk != sv {
            return Err(Error::shape("attention: q/k/v shapes disagree"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{heads} heads do not divide width {d}")));
        }
        if mask.n_q() != sq || mask.n_k() != sk {
            return Err(Error::shape(format!(
                "mask {}x{} for {sq} queries and {sk} keys",
                mask.n_q(),
                mask.n_k()
            )));
        }
        let dims = AttnDims {
            n_q: sq,
            dim: d,
            heads,
        };
        let (qv, kv, vv) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let drop = match self.rng.as_mut() {
            Some(rng) if dropout > 0.0 => Some((dropout, rng)),
            _ => None,
        };
        let (out, saved) = attention::forward(qv, kv, vv, &dims, &mask, drop);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![sq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                saved,
            },
            rg,
        ))
    }

    /// Forward value `quantized`, gradient passed to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor) -> Result<Var> {
        if self.shape(x) != quantized.shape() {
            return Err(Error::shape("straight_through: shape mismatch"));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(quantized, Op::StraightThrough(x), rg))
    }

    /// Inverted dropout; the identity on an evaluation tape or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let n = self.nodes[x.0].value.len();
        let keep: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&keep).map(|(a, m)| a * m).collect();
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, keep }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.vjp(loss, vec![1.0])
    }

    /// Vector-Jacobian product: backpropagates `seed` (shaped like `out`)
    /// from an arbitrary node.
    pub fn vjp(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(out).len() {
            return Err(Error::shape("vjp: seed length differs from output"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(&self.nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let p = self.nodes[b.0].value.shape()[1];
                if wants(*a) {
                    let bv = val(*b);
                    let ga = slot!(*a).unwrap();
                    gemm(m, p, k, 1.0, g, false, bv, true, 1.0, ga);
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = slot!(*b).unwrap();
                    gemm(k, m, p, 1.0, av, true, g, false, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = slot!(v) {
                        axpy(s, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot!(*a) {
                    axpy(s, g, 1.0);
                }
                if let Some(s) = slot!(*b) {
                    axpy(s, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).to_vec();
                    let s = slot!(*a).unwrap();
                    for ((s, &gi), &y) in s.iter_mut().zip(g).zip(&bv) {
                        *s += gi * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a).to_vec();
                    let s = slot!(*b).unwrap();
                    for ((s, &gi), &x) in s.iter_mut().zip(g).zip(&av) {
                        *s += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = slot!(*a) {
                    axpy(s, g, *c);
                }
            }
            Op::AddRowBias(a, bias) => {
                if let Some(s) = slot!(*a) {
                    axpy(s, g, 1.0);
                }
                if let Some(s) = slot!(*bias) {
                    let n = s.len();
                    for row in g.chunks(n) {
                        axpy(s, row, 1.0);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = slot!(*a) {
                    s.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = slot!(*a) {
                    let c = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|x| *x += c);
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                if let Some(s) = slot!(*a) {
                    for ((s, &gi), &x) in s.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *s += gi;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = val(*a);
                if let Some(s) = slot!(*a) {
                    for ((s, &gi), &x) in s.iter_mut().zip(g).zip(av) {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *s += gi * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let n = gv.len();
                if let Some(s) = slot!(*gain) {
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for i in 0..n {
                            s[i] += grow[i] * xrow[i];
                        }
                    }
                }
                if let Some(s) = slot!(*bias) {
                    for grow in g.chunks(n) {
                        axpy(s, grow, 1.0);
                    }
                }
                if wants(*x) {
                    let gv = gv.to_vec();
                    let s = slot!(*x).unwrap();
                    let mut dxh = vec![0.0; n];
                    for (r, (grow, xrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..n {
                            dxh[i] = grow[i] * gv[i];
                            m1 += dxh[i];
                            m2 += dxh[i] * xrow[i];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let out = &mut s[r * n..(r + 1) * n];
                        for i in 0..n {
                            out[i] += rstd[r] * (dxh[i] - m1 - xrow[i] * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                if let Some(s) = slot!(*a) {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            srow[i] += yrow[i] * (grow[i] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if let Some(s) = slot!(*logits) {
                    let classes = s.len() / targets.len();
                    for r in 0..targets.len() {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut s[r * classes..(r + 1) * classes];
                        let p = &probs[r * classes..(r + 1) * classes];
                        for c in 0..classes {
                            row[c] += g[0] * w * p[c];
                        }
                        row[targets[r]] -= g[0] * w;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                let c = 2.0 * g[0] / av.len() as f64;
                if let Some(s) = slot!(*a) {
                    for i in 0..av.len() {
                        s[i] += c * (av[i] - bv[i]);
                    }
                }
                if let Some(s) = slot!(*b) {
                    for i in 0..av.len() {
                        s[i] -= c * (av[i] - bv[i]);
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                if let Some(s) = slot!(*src) {
                    let cols = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut s[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(s) = slot!(p) {
                        axpy(s, &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::ScaleRows { x, factors } => {
                if let Some(s) = slot!(*x) {
                    let cols = s.len() / factors.len();
                    for (r, &f) in factors.iter().enumerate() {
                        if f != 0.0 {
                            axpy(&mut s[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols], f);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot!(*x) {
                    axpy(s, g, 1.0);
                }
            }
            Op::Permute { x, axes } => {
                if let Some(s) = slot!(*x) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                    axpy(s, permute_tensor(&gt, &inv).data(), 1.0);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let bs = self.nodes[x.0].value.shape()[0];
                let o = self.nodes[w.0].value.shape()[0];
                let plane = geom.col_cols();
                let per_out = o * plane;
                let img = geom.channels * geom.h * geom.w;
                let xv = val(*x);
                let wv = val(*w);
                if let Some(bvar) = b {
                    if let Some(s) = slot!(*bvar) {
                        accumulate_channel_bias(s, g, plane);
                    }
                }
                let need_w = wants(*w);
                let need_x = wants(*x);
                let mut gw = vec![0.0; if need_w { wv.len() } else { 0 }];
                let mut gx = vec![0.0; if need_x { xv.len() } else { 0 }];
                let mut dcols = vec![0.0; geom.col_rows() * plane];
                for bi in 0..bs {
                    let gb = &g[bi * per_out..(bi + 1) * per_out];
                    if need_w {
                        let cols = conv::im2col(&xv[bi * img..(bi + 1) * img], geom);
                        gemm(o, plane, geom.col_rows(), 1.0, gb, false, &cols, true, 1.0, &mut gw);
                    }
                    if need_x {
                        gemm(geom.col_rows(), o, plane, 1.0, wv, true, gb, false, 0.0, &mut dcols);
                        conv::col2im(&dcols, geom, &mut gx[bi * img..(bi + 1) * img]);
                    }
                }
                if need_w {
                    axpy(slot!(*w).unwrap(), &gw, 1.0);
                }
                if need_x {
                    axpy(slot!(*x).unwrap(), &gx, 1.0);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (bs, cin, h, wd) = self.nodes[x.0].value.dims4().unwrap();
                let per_in = cin * h * wd;
                let per_out = geom.channels * geom.h * geom.w;
                let xv = val(*x);
                let wv = val(*w);
                if let Some(bvar) = b {
                    if let Some(s) = slot!(*bvar) {
                        accumulate_channel_bias(s, g, geom.h * geom.w);
                    }
                }
                let need_w = wants(*w);
                let need_x = wants(*x);
                let mut gw = vec![0.0; if need_w { wv.len() } else { 0 }];
                let mut gx = vec![0.0; if need_x { xv.len() } else { 0 }];
                for bi in 0..bs {
                    let dcols = conv::im2col(&g[bi * per_out..(bi + 1) * per_out], geom);
                    if need_x {
                        gemm(cin, geom.col_rows(), h * wd, 1.0, wv, false, &dcols, false, 0.0, &mut gx[bi * per_in..(bi + 1) * per_in]);
                    }
                    if need_w {
                        gemm(cin, h * wd, geom.col_rows(), 1.0, &xv[bi * per_in..(bi + 1) * per_in], false, &dcols, true, 1.0, &mut gw);
                    }
                }
                if need_w {
                    axpy(slot!(*w).unwrap(), &gw, 1.0);
                }
                if need_x {
                    axpy(slot!(*x).unwrap(), &gx, 1.0);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                saved,
            } => {
                let (sq, d) = self.nodes[q.0].value.dims2().unwrap();
                let dims = AttnDims {
                    n_q: sq,
                    dim: d,
                    heads: *heads,
                };
                let (dq, dk, dv) =
                    attention::backward(val(*q), val(*k), val(*v), &dims, mask, saved, g);
                for (var, gr) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(s) = slot!(var) {
                        axpy(s, &gr, 1.0);
                    }
                }
            }
            Op::StraightThrough(x) => {
                if let Some(s) = slot!(*x) {
                    axpy(s, g, 1.0);
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(s) = slot!(*x) {
                    for ((s, &gi), &m) in s.iter_mut().zip(g).zip(keep) {
                        *s += gi * m;
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_bias(s: &mut [f64], g: &[f64], plane: usize) {
    let c = s.len();
    for (i, chunk) in g.chunks(plane).enumerate() {
        s[i % c] += chunk.iter().sum::<f64>();
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let data = t.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = tape.constant(t2(1, 1, &[2.0]));
        let b = tape.constant(t2(1, 1, &[3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_bt() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = tape.leaf(t2(3, 2, &[0.5, -1.0, 2.0, 0.0, 1.5, 3.0]), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // ones(2x2) * B^T: each row equals the row sums of B.
        let expect = [-0.5, 2.0, 4.5, -0.5, 2.0, 4.5];
        assert_eq!(g.get(a).unwrap(), &expect);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(t2(1, 2, &[0.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[0], &[false]).unwrap();
        assert!((tape.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let l = tape.constant(t2(1, 2, &[1000.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[0], &[false]).unwrap();
        assert!(tape.value(ce).data()[0].abs() < 1e-12);
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[0], &[true]),
            Err(Error::DegenerateLoss(_))
        ));
    }

    #[test]
    fn conv_identity_and_box_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn conv_non_integral_output_is_shape_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert!(matches!(tape.conv2d(x, w, None, 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[4, 4]), true);
        assert_eq!(tape.dropout(x, 0.5), x);
        let mut tape = Tape::training(1);
        let x = tape.leaf(Tensor::ones(&[64, 64]), true);
        let y = tape.dropout(x, 0.5);
        let v = tape.value(y);
        assert!(v.data().iter().all(|&a| a == 0.0 || a == 2.0));
        let mean = v.sum() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn permute_round_trip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute_tensor(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert_eq!(back, t);
    }
}
