//! Image quality metrics for frames in `[0, 1]`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("metric inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::shape("empty metric input"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio with peak 1. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region of one `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for c in 0..ow {
            rows[y * ow + c] = (0..n).map(|i| g[i] * x[y * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over every full 11×11 Gaussian window of
/// every channel of `C×H×W` frames.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    if a.ndim() != 3 {
        return Err(Error::shape(format!("ssim expects C×H×W, got {:?}", a.shape())));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("{h}×{w} frame is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let g = gaussian_taps();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x = &a.data()[ch * plane..(ch + 1) * plane];
        let y = &b.data()[ch * plane..(ch + 1) * plane];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
        let mx = filter_valid(x, h, w, &g);
        let my = filter_valid(y, h, w, &g);
        let mxx = filter_valid(&prod(&|p, _| p * p), h, w, &g);
        let myy = filter_valid(&prod(&|_, q| q * q), h, w, &g);
        let mxy = filter_valid(&prod(&|p, q| p * q), h, w, &g);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            total += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean of per-frame scores.
pub fn mean_over_frames(a: &[Tensor], b: &[Tensor], f: fn(&Tensor, &Tensor) -> Result<f64>) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("{} vs {} frames", a.len(), b.len())));
    }
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += f(x, y)?;
    }
    Ok(s / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(kind: usize) -> Tensor {
        let (c, h, w) = (3, 16, 20);
        let mut t = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (xf, yf, cf) = (x as f64, y as f64, ch as f64);
                    let v = match kind {
                        0 => ((0.3 * xf + 0.7 * yf + cf).sin() + 1.0) / 2.0,
                        1 => ((0.2 * xf * yf / 7.0 + 0.5 * cf).cos() + 1.0) / 2.0,
                        2 => ((x * 7 + y * 13 + ch * 5) % 11) as f64 / 10.0,
                        _ => f64::from(u8::from((x / 4 + y / 4) % 2 == 0)),
                    };
                    t.set(&[ch, y, x], v);
                }
            }
        }
        t
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[1, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Tensor::full(&[1, 4, 4], 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let mut se = 0.0;
        for i in 0..a.len() {
            se += (a.data()[i] - b.data()[i]).powi(2);
        }
        let want = -10.0 * (se / a.len() as f64).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_matches_reference_fixtures() {
        // Reference values from scikit-image (Gaussian weights, sigma 1.5,
        // population covariance, data range 1).
        let cases = [
            (0, 1, 0.12493045972947475),
            (0, 2, 0.004373261603520188),
            (3, 1, -0.010190698980089964),
        ];
        for (i, j, want) in cases {
            let got = ssim(&img(i), &img(j)).unwrap();
            assert!((got - want).abs() < 1e-6, "{i},{j}: {got} vs {want}");
        }
    }

    #[test]
    fn ssim_examples() {
        let a = img(0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let bin = img(3);
        let inv = bin.map(|v| 1.0 - v);
        let s = ssim(&bin, &inv).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - -0.881436928827458).abs() < 1e-6);
        assert!(ssim(&Tensor::zeros(&[1, 10, 12]), &Tensor::zeros(&[1, 10, 12])).is_err());
    }

    /// Direct windowed sums, no separable filtering.
    fn ssim_scalar(a: &Tensor, b: &Tensor) -> f64 {
        let g = gaussian_taps();
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut total = 0.0;
        let mut n = 0;
        for ch in 0..c {
            for r in 0..=h - 11 {
                for q in 0..=w - 11 {
                    let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = g[i] * g[j];
                            let x = a.at(&[ch, r + i, q + j]);
                            let y = b.at(&[ch, r + i, q + j]);
                            ux += wgt * x;
                            uy += wgt * y;
                            xx += wgt * x * x;
                            yy += wgt * y * y;
                            xy += wgt * x * y;
                        }
                    }
                    let num = (2.0 * ux * uy + C1) * (2.0 * (xy - ux * uy) + C2);
                    let den = (ux * ux + uy * uy + C1) * (xx - ux * ux + yy - uy * uy + C2);
                    total += num / den;
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn ssim_symmetric_bounded_and_matches_scalar(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::uniform(&[2, 13, 14], 0.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[2, 13, 14], 0.0, 1.0, &mut rng);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((s - ssim_scalar(&a, &b)).abs() < 1e-10);
        }
    }
}
