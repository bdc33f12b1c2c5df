//! Bounding boxes: 64-bin quantization, token layout, and crop-resampling of
//! box regions into fixed-size patches.
//!
//! Boxes are center + extent in normalized frame coordinates. A box that is
//! not present carries no coordinates; its quantized form uses the reserved
//! [`NULL_TOKEN`] in every coordinate slot.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Uniform bins per coordinate.
pub const BINS: usize = 64;
/// Reserved coordinate token for absent boxes.
pub const NULL_TOKEN: usize = BINS;
/// Coordinate vocabulary including the NULL slot.
pub const COORD_VOCAB: usize = BINS + 1;
/// Tokens per box: presence then x, y, w, h.
pub const BOX_TOKENS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub pres: bool,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const ABSENT: BBox = BBox {
        pres: false,
        x: 0.0,
        y: 0.0,
        w: 0.0,
        h: 0.0,
    };

    pub fn present(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            pres: true,
            x,
            y,
            w,
            h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pres {
            return Ok(());
        }
        for (name, v) in [("x", self.x), ("y", self.y), ("w", self.w), ("h", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "box coordinate {name}={v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// `(x0, y0, x1, y1)` in normalized coordinates.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        )
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        if !self.pres || !other.pres {
            return 0.0;
        }
        let (a0, a1, a2, a3) = self.corners();
        let (b0, b1, b2, b3) = other.corners();
        let iw = (a2.min(b2) - a0.max(b0)).max(0.0);
        let ih = (a3.min(b3) - a1.max(b1)).max(0.0);
        let inter = iw * ih;
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Per-timestep boxes of one object identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub boxes: Vec<BBox>,
}

/// Quantized box. Absent boxes have no coordinate bins by construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantizedBox {
    Absent,
    /// Bins for x, y, w, h, each in `[0, 64)`.
    Present([u8; 4]),
}

impl QuantizedBox {
    /// `[pres, x, y, w, h]` with [`NULL_TOKEN`] for missing coordinates.
    pub fn tokens(&self) -> [usize; BOX_TOKENS] {
        match *self {
            QuantizedBox::Absent => [0, NULL_TOKEN, NULL_TOKEN, NULL_TOKEN, NULL_TOKEN],
            QuantizedBox::Present(b) => [1, b[0] as usize, b[1] as usize, b[2] as usize, b[3] as usize],
        }
    }

    pub fn from_tokens(t: [usize; BOX_TOKENS]) -> Result<Self> {
        match t[0] {
            0 => {
                if t[1..].iter().all(|&c| c == NULL_TOKEN) {
                    Ok(QuantizedBox::Absent)
                } else {
                    Err(Error::Validation(format!(
                        "absent box with coordinate tokens {t:?}"
                    )))
                }
            }
            1 => {
                let mut bins = [0u8; 4];
                for (b, &c) in bins.iter_mut().zip(&t[1..]) {
                    if c == NULL_TOKEN {
                        return Err(Error::Validation(
                            "NULL coordinate on a present box".into(),
                        ));
                    }
                    if c >= BINS {
                        return Err(Error::Index(format!("coordinate token {c} >= {BINS}")));
                    }
                    *b = c as u8;
                }
                Ok(QuantizedBox::Present(bins))
            }
            p => Err(Error::Index(format!("presence token {p} not in {{0, 1}}"))),
        }
    }

    pub fn is_present(&self) -> bool {
        matches!(self, QuantizedBox::Present(_))
    }
}

pub fn quantize_coord(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Validation(format!("coordinate {v} outside [0, 1]")));
    }
    Ok(((v * BINS as f64).floor() as usize).min(BINS - 1) as u8)
}

/// Center of bin `bin`.
pub fn dequantize_coord(bin: u8) -> f64 {
    (bin as f64 + 0.5) / BINS as f64
}

pub fn quantize_box(b: &BBox) -> Result<QuantizedBox> {
    if !b.pres {
        return Ok(QuantizedBox::Absent);
    }
    b.validate()?;
    Ok(QuantizedBox::Present([
        quantize_coord(b.x)?,
        quantize_coord(b.y)?,
        quantize_coord(b.w)?,
        quantize_coord(b.h)?,
    ]))
}

pub fn dequantize_box(q: &QuantizedBox) -> BBox {
    match *q {
        QuantizedBox::Absent => BBox::ABSENT,
        QuantizedBox::Present(b) => BBox::present(
            dequantize_coord(b[0]),
            dequantize_coord(b[1]),
            dequantize_coord(b[2]),
            dequantize_coord(b[3]),
        ),
    }
}

/// Crop-resampled region of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub tensor: Tensor,
    /// Box was absent or thinner than one bin, so the patch is zero.
    pub degenerate: bool,
}

/// Bilinear value at continuous pixel coordinates (pixel centers at
/// integer + 0.5 in normalized space), zero outside the image.
pub fn sample_bilinear(frame: &Tensor, c: usize, py: f64, px: f64) -> f64 {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let (y0, x0) = (py.floor(), px.floor());
    let (fy, fx) = (py - y0, px - x0);
    let data = frame.data();
    let get = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            0.0
        } else {
            data[(c * h + y as usize) * w + x as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * get(y0, x0) + fx * get(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * get(y0 + 1.0, x0) + fx * get(y0 + 1.0, x0 + 1.0))
}

/// Resamples the region under `b` to `out_res × out_res` with a bilinear
/// sampling grid (spatial-transformer crop). Outside-image samples read zero.
pub fn extract_patch(frame: &Tensor, b: &BBox, out_res: usize) -> Result<Patch> {
    if frame.ndim() != 3 {
        return Err(Error::shape(format!("frame must be C×H×W, got {:?}", frame.shape())));
    }
    if out_res == 0 {
        return Err(Error::config("patch resolution must be >= 1"));
    }
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let zero = Tensor::zeros(&[c, out_res, out_res]);
    if !b.pres {
        return Ok(Patch {
            tensor: zero,
            degenerate: true,
        });
    }
    b.validate()?;
    let min_extent = 1.0 / BINS as f64;
    if b.w < min_extent || b.h < min_extent {
        return Ok(Patch {
            tensor: zero,
            degenerate: true,
        });
    }
    let (x0, y0, _, _) = b.corners();
    let mut out = Vec::with_capacity(c * out_res * out_res);
    for ch in 0..c {
        for i in 0..out_res {
            let v = y0 + (i as f64 + 0.5) / out_res as f64 * b.h;
            let py = v * h as f64 - 0.5;
            for j in 0..out_res {
                let u = x0 + (j as f64 + 0.5) / out_res as f64 * b.w;
                let px = u * w as f64 - 0.5;
                out.push(sample_bilinear(frame, ch, py, px));
            }
        }
    }
    Ok(Patch {
        tensor: Tensor::new(vec![c, out_res, out_res], out)?,
        degenerate: false,
    })
}

/// Patch from a static uniform grid cell (the fixed-grid ablation). Cell `k`
/// of a `g×g` grid, `g = ceil(sqrt(cells))`, area-averaged to `out_res²`.
pub fn grid_patch(frame: &Tensor, k: usize, cells: usize, out_res: usize) -> Result<Tensor> {
    if frame.ndim() != 3 || cells == 0 || k >= cells || out_res == 0 {
        return Err(Error::contract("grid_patch: bad arguments"));
    }
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let g = (cells as f64).sqrt().ceil() as usize;
    let (gr, gc) = (k / g, k % g);
    let rows = |i: usize| -> (usize, usize) {
        let lo = (gr * h) / g + (i * h) / (g * out_res);
        let hi = (gr * h) / g + ((i + 1) * h) / (g * out_res);
        (lo.min(h - 1), hi.max(lo + 1).min(h))
    };
    let cols = |j: usize| -> (usize, usize) {
        let lo = (gc * w) / g + (j * w) / (g * out_res);
        let hi = (gc * w) / g + ((j + 1) * w) / (g * out_res);
        (lo.min(w - 1), hi.max(lo + 1).min(w))
    };
    let mut out = Vec::with_capacity(c * out_res * out_res);
    for ch in 0..c {
        for i in 0..out_res {
            let (r0, r1) = rows(i);
            for j in 0..out_res {
                let (c0, c1) = cols(j);
                let mut s = 0.0;
                for y in r0..r1 {
                    for x in c0..c1 {
                        s += frame.at(&[ch, y, x]);
                    }
                }
                out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    Tensor::new(vec![c, out_res, out_res], out)
}

/// Strided convolution turning `C×R×R` patches into `grid²` tokens.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub res: usize,
    pub grid: usize,
    pub dim: usize,
}

impl PatchEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        res: usize,
        grid: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if grid == 0 || res % grid != 0 {
            return Err(Error::config(format!(
                "patch resolution {res} not divisible by token grid {grid}"
            )));
        }
        let k = res / grid;
        let fan_in = (channels * k * k) as f64;
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::randn(&[dim, channels, k, k], (1.0 / fan_in).sqrt(), rng),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
        Ok(PatchEncoder {
            weight,
            bias,
            channels,
            res,
            grid,
            dim,
        })
    }

    /// Tokens per patch.
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// `patches` is `[N×C×R×R]`; returns `[N·P × dim]`, tokens of a patch in
    /// raster order.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, patches: Var) -> Result<Var> {
        let n = tape.shape(patches)[0];
        let k = self.res / self.grid;
        let y = tape.conv2d(patches, bound[self.weight], Some(bound[self.bias]), k, 0)?;
        let y = tape.permute(y, &[0, 2, 3, 1])?;
        tape.reshape(y, &[n * self.tokens(), self.dim])
    }
}

/// Stand-alone patch encoding with the weights in `store`.
pub fn encode_patch(patch: &Tensor, enc: &PatchEncoder, store: &ParamStore) -> Result<Tensor> {
    if patch.shape() != [enc.channels, enc.res, enc.res] {
        return Err(Error::shape(format!(
            "patch shape {:?}, encoder expects [{}, {}, {}]",
            patch.shape(),
            enc.channels,
            enc.res,
            enc.res
        )));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(patch.clone().reshape(&[1, enc.channels, enc.res, enc.res])?);
    let y = enc.encode(&mut tape, &bound, x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_boundaries() {
        assert_eq!(quantize_coord(0.0).unwrap(), 0);
        assert_eq!(quantize_coord(1.0).unwrap(), 63);
        assert_eq!(quantize_coord(0.5).unwrap(), 32);
        assert!(quantize_coord(1.01).is_err());
        assert!(quantize_coord(-0.01).is_err());
    }

    #[test]
    fn absent_box_tokens() {
        let q = quantize_box(&BBox::ABSENT).unwrap();
        assert_eq!(q.tokens(), [0, NULL_TOKEN, NULL_TOKEN, NULL_TOKEN, NULL_TOKEN]);
        assert_eq!(dequantize_box(&q), BBox::ABSENT);
    }

    #[test]
    fn dequantize_bin_center() {
        assert_eq!(dequantize_coord(0), 1.0 / 128.0);
    }

    #[test]
    fn null_on_present_box_is_inconsistent() {
        assert!(QuantizedBox::from_tokens([1, NULL_TOKEN, 3, 3, 3]).is_err());
        assert!(QuantizedBox::from_tokens([0, 1, NULL_TOKEN, NULL_TOKEN, NULL_TOKEN]).is_err());
        assert_eq!(
            QuantizedBox::from_tokens([1, 1, 2, 3, 4]).unwrap(),
            QuantizedBox::Present([1, 2, 3, 4])
        );
    }

    fn test_frame(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::new();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn full_frame_box_is_identity() {
        let f = test_frame(3, 16, 16, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f64 / 10.0);
        let p = extract_patch(&f, &BBox::present(0.5, 0.5, 1.0, 1.0), 16).unwrap();
        assert!(!p.degenerate);
        assert!(p.tensor.max_abs_diff(&f) < 1e-12);
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let f = test_frame(2, 32, 32, |_, _, _| 0.375);
        let p = extract_patch(&f, &BBox::present(0.4, 0.6, 0.3, 0.2), 8).unwrap();
        assert!(p.tensor.data().iter().all(|&v| (v - 0.375).abs() < 1e-12));
    }

    #[test]
    fn linear_gradient_matches_per_pixel_oracle() {
        // Bilinear interpolation of a linear image reproduces the linear
        // function exactly wherever all four taps are inside the image.
        let (h, w) = (32usize, 32usize);
        let f = test_frame(1, h, w, |_, y, x| 0.01 * x as f64 + 0.02 * y as f64);
        let b = BBox::present(0.45, 0.55, 0.5, 0.4);
        let res = 8;
        let p = extract_patch(&f, &b, res).unwrap();
        let (x0, y0, _, _) = b.corners();
        for i in 0..res {
            for j in 0..res {
                let px = (x0 + (j as f64 + 0.5) / res as f64 * b.w) * w as f64 - 0.5;
                let py = (y0 + (i as f64 + 0.5) / res as f64 * b.h) * h as f64 - 0.5;
                let expect = 0.01 * px + 0.02 * py;
                assert!((p.tensor.at(&[0, i, j]) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_and_absent_boxes_give_zero_patches() {
        let f = test_frame(1, 8, 8, |_, _, _| 1.0);
        let p = extract_patch(&f, &BBox::present(0.5, 0.5, 0.01, 0.5), 4).unwrap();
        assert!(p.degenerate && p.tensor.sum() == 0.0);
        let p = extract_patch(&f, &BBox::ABSENT, 4).unwrap();
        assert!(p.degenerate && p.tensor.sum() == 0.0);
    }

    #[test]
    fn translation_consistency_away_from_borders() {
        let (h, w) = (32usize, 32usize);
        let pattern = |y: isize, x: isize| (((y * 13 + x * 7) % 17) as f64) / 16.0;
        let f1 = test_frame(1, h, w, |_, y, x| pattern(y as isize, x as isize));
        let (dy, dx) = (3isize, 5isize);
        let f2 = test_frame(1, h, w, |_, y, x| pattern(y as isize - dy, x as isize - dx));
        let b1 = BBox::present(0.4, 0.4, 0.25, 0.3);
        let b2 = BBox::present(0.4 + dx as f64 / w as f64, 0.4 + dy as f64 / h as f64, 0.25, 0.3);
        let p1 = extract_patch(&f1, &b1, 8).unwrap();
        let p2 = extract_patch(&f2, &b2, 8).unwrap();
        assert!(p1.tensor.max_abs_diff(&p2.tensor) < 1e-12);
    }

    #[test]
    fn patch_encoder_token_count_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = PatchEncoder::new(&mut store, "enc", 3, 8, 1, 16, &mut rng).unwrap();
        let out = encode_patch(&Tensor::zeros(&[3, 8, 8]), &enc, &store).unwrap();
        assert_eq!(out.shape(), &[1, 16]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let enc2 = PatchEncoder::new(&mut store, "enc2", 3, 8, 2, 16, &mut rng).unwrap();
        let out = encode_patch(&Tensor::ones(&[3, 8, 8]), &enc2, &store).unwrap();
        assert_eq!(out.shape(), &[4, 16]);
    }

    #[test]
    fn grid_patch_of_constant_frame() {
        let f = test_frame(3, 32, 32, |c, _, _| c as f64 * 0.25);
        for k in 0..4 {
            let p = grid_patch(&f, k, 4, 8).unwrap();
            assert_eq!(p.shape(), &[3, 8, 8]);
            assert!((p.at(&[2, 3, 3]) - 0.5).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_half_bin(v in 0.0f64..=1.0) {
            let q = quantize_coord(v).unwrap();
            prop_assert!((dequantize_coord(q) - v).abs() <= 1.0 / 128.0 + 1e-15);
        }

        #[test]
        fn quantization_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_coord(lo).unwrap() <= quantize_coord(hi).unwrap());
        }

        #[test]
        fn track_permutation_preserves_token_multiset(
            coords in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, any::<bool>()), 1..6),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let boxes: Vec<BBox> = coords.iter().map(|&(x, y, w, h, p)| {
                if p { BBox::present(x, y, w, h) } else { BBox::ABSENT }
            }).collect();
            let mut perm = boxes.clone();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut a: Vec<_> = boxes.iter().map(|b| quantize_box(b).unwrap().tokens()).collect();
            let mut b: Vec<_> = perm.iter().map(|b| quantize_box(b).unwrap().tokens()).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
