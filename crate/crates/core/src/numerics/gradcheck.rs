//! Central finite-difference checks of the tape's reverse-mode gradients.
//!
//! Each check projects an op's output onto a fixed random direction `r`,
//! so the scalar `⟨f(x), r⟩` is differentiated both by the tape (a VJP
//! seeded with `r`) and numerically. The error of one input is
//! `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)`; a case reports the worst
//! input.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{AttnMask, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Norms below this are treated as an exact zero gradient.
const ZERO_NORM: f64 = 1e-9;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable test case: the op applied to `inputs`.
pub struct Case {
    pub inputs: Vec<Tensor>,
    /// Inputs that are differentiated (others enter as constants).
    pub diff: Vec<bool>,
    /// Seed of a training tape (for dropout); `None` builds an evaluation
    /// tape.
    pub training: Option<u64>,
    pub f: OpFn,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub worst_rel_err: f64,
    /// Input shapes of the worst case.
    pub worst_shapes: Vec<Vec<usize>>,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < FD_TOLERANCE
    }
}

fn tape_for(training: Option<u64>) -> Tape {
    match training {
        Some(s) => Tape::training(s),
        None => Tape::new(),
    }
}

fn forward(case: &Case, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = tape_for(case.training);
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.diff)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let out = (case.f)(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative gradient error over the differentiated inputs.
pub fn check_case(case: &Case, seed: u64) -> Result<f64> {
    let (tape, vars, out) = forward(case, &case.inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::randn(tape.shape(out), 1.0, &mut rng);
    let grads = tape.vjp(out, r.data().to_vec())?;
    let project = |inputs: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = forward(case, inputs)?;
        Ok(tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst: f64 = 0.0;
    for (i, &var) in vars.iter().enumerate() {
        if !case.diff[i] {
            continue;
        }
        let analytic = grads.tensor(var).data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        let mut inputs = case.inputs.clone();
        for (j, g) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + FD_STEP;
            let up = project(&inputs)?;
            inputs[i].data_mut()[j] = x0 - FD_STEP;
            let down = project(&inputs)?;
            inputs[i].data_mut()[j] = x0;
            *g = (up - down) / (2.0 * FD_STEP);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let err = if scale < ZERO_NORM { norm(&diff) } else { norm(&diff) / scale };
        worst = worst.max(err);
    }
    Ok(worst)
}

fn dim<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    randn(shape, rng).map(|v| v.signum() * (0.05 + v.abs()))
}

fn case(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    let diff = vec![true; inputs.len()];
    Case {
        inputs,
        diff,
        training: None,
        f: Box::new(f),
    }
}

/// Names of every op covered by [`make_case`].
pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row_bias",
    "sum",
    "mean",
    "relu",
    "gelu",
    "layer_norm",
    "softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_sum",
    "mse",
    "gather_rows",
    "concat_rows",
    "scale_rows",
    "reshape",
    "permute",
    "conv2d",
    "conv_transpose2d",
    "attention",
    "dropout",
];

/// A random-shaped case of `op`.
pub fn make_case<R: Rng>(op: &str, rng: &mut R) -> Case {
    let (r, c) = (dim(rng, 1, 5), dim(rng, 1, 6));
    match op {
        "matmul" => {
            let n = dim(rng, 1, 5);
            case(vec![randn(&[r, n], rng), randn(&[n, c], rng)], |t, v| t.matmul(v[0], v[1]))
        }
        "add" => case(vec![randn(&[r, c], rng), randn(&[r, c], rng)], |t, v| t.add(v[0], v[1])),
        "sub" => case(vec![randn(&[r, c], rng), randn(&[r, c], rng)], |t, v| t.sub(v[0], v[1])),
        "mul" => case(vec![randn(&[r, c], rng), randn(&[r, c], rng)], |t, v| t.mul(v[0], v[1])),
        "scale" => {
            let k = rng.random_range(-3.0..3.0);
            case(vec![randn(&[r, c], rng)], move |t, v| Ok(t.scale(v[0], k)))
        }
        "add_row_bias" => case(vec![randn(&[r, c], rng), randn(&[c], rng)], |t, v| t.add_row_bias(v[0], v[1])),
        "sum" => case(vec![randn(&[r, c], rng)], |t, v| Ok(t.sum(v[0]))),
        "mean" => case(vec![randn(&[r, c], rng)], |t, v| Ok(t.mean(v[0]))),
        "relu" => case(vec![off_zero(&[r, c], rng)], |t, v| Ok(t.relu(v[0]))),
        "gelu" => case(vec![randn(&[r, c], rng)], |t, v| Ok(t.gelu(v[0]))),
        "layer_norm" => {
            let c = dim(rng, 2, 6);
            case(
                vec![randn(&[r, c], rng), randn(&[c], rng), randn(&[c], rng)],
                |t, v| t.layer_norm(v[0], v[1], v[2]),
            )
        }
        "softmax" => case(vec![randn(&[r, c], rng)], |t, v| Ok(t.softmax(v[0]))),
        "softmax_cross_entropy" | "softmax_cross_entropy_sum" => {
            let c = dim(rng, 2, 6);
            let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            let mut ignore: Vec<bool> = (0..r).map(|_| rng.random_bool(0.3)).collect();
            ignore[0] = false;
            let mean = op == "softmax_cross_entropy";
            case(vec![randn(&[r, c], rng).map(|x| 2.0 * x)], move |t, v| {
                if mean {
                    t.softmax_cross_entropy(v[0], &targets, &ignore)
                } else {
                    t.softmax_cross_entropy_sum(v[0], &targets, &ignore)
                }
            })
        }
        "mse" => case(vec![randn(&[r, c], rng), randn(&[r, c], rng)], |t, v| t.mse(v[0], v[1])),
        "gather_rows" => {
            let n = dim(rng, 1, 7);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
            case(vec![randn(&[r, c], rng)], move |t, v| t.gather_rows(v[0], &idx))
        }
        "concat_rows" => {
            let parts = dim(rng, 1, 3);
            let inputs = (0..parts).map(|_| randn(&[dim(rng, 1, 3), c], rng)).collect();
            case(inputs, |t, v| t.concat_rows(v))
        }
        "scale_rows" => {
            let f: Vec<f64> = (0..r).map(|_| rng.random_range(-2.0..2.0)).collect();
            case(vec![randn(&[r, c], rng)], move |t, v| t.scale_rows(v[0], &f))
        }
        "reshape" => case(vec![randn(&[r, c], rng)], move |t, v| {
            let y = t.reshape(v[0], &[c, r])?;
            // A nonlinearity after the reshape so element order matters.
            let w = t.constant(Tensor::new(vec![c, r], (0..r * c).map(|i| i as f64 * 0.1 - 0.3).collect())?);
            t.mul(y, w)
        }),
        "permute" => {
            let shape = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4)];
            let mut axes = [0, 1, 2];
            for i in (1..3).rev() {
                axes.swap(i, rng.random_range(0..=i));
            }
            case(vec![randn(&shape, rng)], move |t, v| {
                let y = t.permute(v[0], &axes)?;
                let y = t.gelu(y);
                Ok(y)
            })
        }
        "conv2d" => {
            let (b, ci, o, k) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, (k - 1) / 2));
            // Sides that the kernel tiles exactly.
            let h = k + stride * dim(rng, 1, 3) - 2 * pad;
            let w = k + stride * dim(rng, 1, 3) - 2 * pad;
            let bias = rng.random_bool(0.5);
            let mut inputs = vec![randn(&[b, ci, h, w], rng), randn(&[o, ci, k, k], rng)];
            if bias {
                inputs.push(randn(&[o], rng));
            }
            case(inputs, move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad))
        }
        "conv_transpose2d" => {
            let (b, ci, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let (k, stride) = (dim(rng, 2, 4), dim(rng, 1, 2));
            let pad = dim(rng, 0, (k - 1) / 2);
            let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let bias = rng.random_bool(0.5);
            let mut inputs = vec![randn(&[b, ci, h, w], rng), randn(&[ci, o, k, k], rng)];
            if bias {
                inputs.push(randn(&[o], rng));
            }
            case(inputs, move |t, v| t.conv_transpose2d(v[0], v[1], v.get(2).copied(), stride, pad))
        }
        "attention" => {
            let heads = dim(rng, 1, 2);
            let d = heads * dim(rng, 1, 3);
            let (sq, sk) = (dim(rng, 1, 4), dim(rng, 1, 5));
            let allow: Vec<Vec<bool>> = (0..sq).map(|_| (0..sk).map(|_| rng.random_bool(0.7)).collect()).collect();
            let mask = Arc::new(AttnMask::from_fn(sq, sk, |q, k| allow[q][k]));
            let drop = if rng.random_bool(0.5) { 0.3 } else { 0.0 };
            let mut c = case(
                vec![randn(&[sq, d], rng), randn(&[sk, d], rng), randn(&[sk, d], rng)],
                move |t, v| t.attention(v[0], v[1], v[2], heads, mask.clone(), drop),
            );
            if drop > 0.0 {
                c.training = Some(rng.random());
            }
            c
        }
        "dropout" => {
            let mut c = case(vec![randn(&[r, c], rng)], |t, v| Ok(t.dropout(v[0], 0.4)));
            c.training = Some(rng.random());
            c
        }
        other => panic!("no gradient case for op {other:?}"),
    }
}

/// Runs `cases` random cases of every op in [`OPS`].
pub fn gradient_suite(cases: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(OPS.len());
    for &op in OPS {
        let mut check = OpCheck {
            op,
            cases,
            worst_rel_err: 0.0,
            worst_shapes: Vec::new(),
        };
        for _ in 0..cases {
            let c = make_case(op, &mut rng);
            let err = check_case(&c, rng.random())?;
            if err >= check.worst_rel_err {
                check.worst_rel_err = err;
                check.worst_shapes = c.inputs.iter().map(|t| t.shape().to_vec()).collect();
            }
        }
        out.push(check);
    }
    Ok(out)
}

/// The straight-through op has no finite-difference derivative (its value
/// ignores its input); its VJP must be the identity instead. Returns the
/// largest deviation over `cases` random shapes.
pub fn straight_through_identity(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let shape = [dim(&mut rng, 1, 5), dim(&mut rng, 1, 6)];
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&shape, &mut rng), true);
        let y = tape.straight_through(x, randn(&shape, &mut rng))?;
        let s = randn(&shape, &mut rng);
        let g = tape.vjp(y, s.data().to_vec())?;
        worst = worst.max(g.tensor(x).max_abs_diff(&s));
    }
    Ok(worst)
}
