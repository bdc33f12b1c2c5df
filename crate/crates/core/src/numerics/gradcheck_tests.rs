//! Independent oracles for the numerics ops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.at(&[i, k]) * b.at(&[k, j]);
            }
            assert!((tape.value(c).at(&[i, j]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_matches_direct_log_sum_exp() {
    let mut r = rng(11);
    let logits = Tensor::randn(&[4, 7], 2.0, &mut r);
    let targets = [3, 0, 6, 2];
    let ignore = [false, true, false, false];
    let mut expect = 0.0;
    let mut n = 0.0;
    for (row, (&t, &ig)) in targets.iter().zip(&ignore).enumerate() {
        if ig {
            continue;
        }
        let lse = (0..7).map(|c| logits.at(&[row, c]).exp()).sum::<f64>().ln();
        expect += lse - logits.at(&[row, t]);
        n += 1.0;
    }
    expect /= n;
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let ce = tape.softmax_cross_entropy(l, &targets, &ignore).unwrap();
    assert!((tape.value(ce).data()[0] - expect).abs() < 1e-10);
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(3);
    let (b, c, h, w, o, k, stride, pad) = (2, 3, 7, 5, 4, 3, 2, 1);
    let x = Tensor::randn(&[b, c, h, w], 1.0, &mut r);
    let wt = Tensor::randn(&[o, c, k, k], 1.0, &mut r);
    let bias = Tensor::randn(&[o], 1.0, &mut r);
    let mut tape = Tape::new();
    let (vx, vw, vb) = (
        tape.constant(x.clone()),
        tape.constant(wt.clone()),
        tape.constant(bias.clone()),
    );
    let y = tape.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
    let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    assert_eq!(tape.shape(y), &[b, o, ho, wo]);
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.at(&[bi, ic, iy as usize, ix as usize]) * wt.at(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                    assert!((tape.value(y).at(&[bi, oc, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_transpose(y)> with shared weights.
    let mut r = rng(5);
    let x = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut r);
    let w = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut r);
    let y = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let (vx, vw, vy) = (tape.constant(x.clone()), tape.constant(w), tape.constant(y.clone()));
    let cx = tape.conv2d(vx, vw, None, 2, 1).unwrap();
    let ty = tape.conv_transpose2d(vy, vw, None, 2, 1).unwrap();
    assert_eq!(tape.shape(ty), &[1, 2, 8, 8]);
    let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = tape.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(9);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[5, 9], 4.0, &mut r));
    let y = tape.softmax(x);
    for row in tape.value(y).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_dense_reference() {
    let mut r = rng(21);
    let (sq, sk, d, heads) = (4, 5, 6, 2);
    let q = Tensor::randn(&[sq, d], 1.0, &mut r);
    let k = Tensor::randn(&[sk, d], 1.0, &mut r);
    let v = Tensor::randn(&[sk, d], 1.0, &mut r);
    let allow = |i: usize, j: usize| (i + j) % 3 != 1;
    let mask = std::sync::Arc::new(AttnMask::from_fn(sq, sk, allow));
    let mut tape = Tape::new();
    let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.attention(vq, vk, vv, heads, mask, 0.0).unwrap();
    let dh = d / heads;
    for h in 0..heads {
        for i in 0..sq {
            let mut w = vec![f64::NEG_INFINITY; sk];
            for j in 0..sk {
                if allow(i, j) {
                    w[j] = (0..dh).map(|c| q.at(&[i, h * dh + c]) * k.at(&[j, h * dh + c])).sum::<f64>()
                        / (dh as f64).sqrt();
                }
            }
            let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = w.iter().map(|s| (s - m).exp()).sum();
            for c in 0..dh {
                let e: f64 = (0..sk).map(|j| (w[j] - m).exp() / z * v.at(&[j, h * dh + c])).sum();
                assert!((tape.value(out).at(&[i, h * dh + c]) - e).abs() < 1e-12);
            }
        }
    }
}
