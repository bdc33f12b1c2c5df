//! Synthetic bouncing-shapes videos with ground-truth box tracks, and the
//! on-disk dataset container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, Track};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"POVTDSET";
pub const DATASET_VERSION: u32 = 1;
/// Boxes covering fewer pixels than this are marked absent.
pub const MIN_BOX_AREA: usize = 5;

/// Object colours, also used for box overlays.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 90, 235],
    [240, 210, 30],
    [220, 60, 220],
    [30, 210, 220],
    [245, 140, 20],
    [250, 250, 250],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disc,
}

/// Initial state of one object, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Side length (square) or diameter (disc).
    pub size: f64,
    pub cx: f64,
    pub cy: f64,
    pub vx: f64,
    pub vy: f64,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenOptions {
    pub height: usize,
    pub width: usize,
    pub k_max: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Walls sit this many pixels outside the frame, so objects can leave
    /// the view and come back.
    pub wall_margin: f64,
    pub bg_drift: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            height: 32,
            width: 32,
            k_max: 4,
            min_size: 6.0,
            max_size: 11.0,
            min_speed: 0.8,
            max_speed: 2.5,
            wall_margin: 0.0,
            bg_drift: false,
        }
    }
}

impl GenOptions {
    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::config("frames must be at least 4×4"));
        }
        if self.k_max == 0 || self.k_max > PALETTE.len() {
            return Err(Error::config(format!("k_max must be in 1..={}", PALETTE.len())));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::config("need 0 < min_size <= max_size"));
        }
        if !(self.min_speed >= 0.0 && self.min_speed <= self.max_speed) {
            return Err(Error::config("need 0 <= min_speed <= max_speed"));
        }
        if self.wall_margin < 0.0 {
            return Err(Error::config("wall_margin must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub bg_drift: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// One `C×H×W` tensor per frame, values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub tracks: Vec<Track>,
    pub meta: SampleMeta,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.tracks.len()
    }

    /// `(C, H, W)` of the frames.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.frames[0].shape();
        (s[0], s[1], s[2])
    }

    /// Boxes of every track at time `t`.
    pub fn boxes_at(&self, t: usize) -> Vec<BBox> {
        self.tracks.iter().map(|tr| tr.boxes[t]).collect()
    }
}

/// Random bouncing-shapes video.
pub fn gen_bounce_video(seed: u64, frames: usize, k: usize, opts: &GenOptions) -> Result<VideoSample> {
    opts.validate()?;
    if k > opts.k_max {
        return Err(Error::config(format!("K={k} exceeds k_max={}", opts.k_max)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..colors.len());
        colors.swap(i, j);
    }
    let (w, h) = (opts.width as f64, opts.height as f64);
    let specs: Vec<ObjectSpec> = (0..k)
        .map(|i| {
            let size = rng.random_range(opts.min_size..=opts.max_size);
            let shape = if rng.random::<bool>() {
                Shape::Square
            } else {
                Shape::Disc
            };
            let half = size / 2.0;
            let cx = rng.random_range(half..=(w - half).max(half));
            let cy = rng.random_range(half..=(h - half).max(half));
            let speed = rng.random_range(opts.min_speed..=opts.max_speed);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            ObjectSpec {
                shape,
                size,
                cx,
                cy,
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                color: PALETTE[colors[i]],
            }
        })
        .collect();
    let mut sample = render_video(&specs, frames, opts)?;
    sample.meta.seed = seed;
    Ok(sample)
}

/// Seed of video `i` in a generated set.
pub fn video_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` videos with object counts drawn uniformly from `objects`.
pub fn gen_dataset(
    seed: u64,
    n: usize,
    frames: usize,
    objects: std::ops::RangeInclusive<usize>,
    opts: &GenOptions,
) -> Result<Vec<VideoSample>> {
    if objects.is_empty() {
        return Err(Error::config(format!("empty object range {objects:?}")));
    }
    (0..n)
        .map(|i| {
            let s = video_seed(seed, i);
            let k = ChaCha8Rng::seed_from_u64(s ^ 0x6b).random_range(objects.clone());
            gen_bounce_video(s, frames, k, opts)
        })
        .collect()
}

/// Deterministic video from explicit initial states. Objects later in
/// `specs` are drawn on top.
pub fn render_video(specs: &[ObjectSpec], frames: usize, opts: &GenOptions) -> Result<VideoSample> {
    opts.validate()?;
    if frames < 2 {
        return Err(Error::config("videos need at least 2 frames"));
    }
    if specs.len() > opts.k_max {
        return Err(Error::config(format!(
            "{} objects exceed k_max={}",
            specs.len(),
            opts.k_max
        )));
    }
    let (hh, ww) = (opts.height, opts.width);
    let mut state: Vec<ObjectSpec> = specs.to_vec();
    let mut out_frames = Vec::with_capacity(frames);
    let mut tracks: Vec<Track> = specs.iter().map(|_| Track { boxes: Vec::with_capacity(frames) }).collect();
    for t in 0..frames {
        let mut img = vec![0u8; 3 * hh * ww];
        for y in 0..hh {
            for x in 0..ww {
                let v = background(t, y, x, opts.bg_drift);
                for c in 0..3 {
                    img[(c * hh + y) * ww + x] = v[c];
                }
            }
        }
        for (obj, track) in state.iter().zip(tracks.iter_mut()) {
            let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
            let mut area = 0usize;
            for y in 0..hh {
                for x in 0..ww {
                    if covers(obj, y, x) {
                        for c in 0..3 {
                            img[(c * hh + y) * ww + x] = obj.color[c];
                        }
                        r0 = r0.min(y);
                        r1 = r1.max(y);
                        c0 = c0.min(x);
                        c1 = c1.max(x);
                        area += 1;
                    }
                }
            }
            let b = if area == 0 {
                BBox::ABSENT
            } else {
                let bw = c1 - c0 + 1;
                let bh = r1 - r0 + 1;
                if bw * bh < MIN_BOX_AREA {
                    BBox::ABSENT
                } else {
                    BBox::present(
                        (c0 + c1 + 1) as f64 / 2.0 / ww as f64,
                        (r0 + r1 + 1) as f64 / 2.0 / hh as f64,
                        bw as f64 / ww as f64,
                        bh as f64 / hh as f64,
                    )
                }
            };
            track.boxes.push(b);
        }
        out_frames.push(Tensor::new(
            vec![3, hh, ww],
            img.iter().map(|&v| v as f64 / 255.0).collect(),
        )?);
        for obj in state.iter_mut() {
            step(obj, opts);
        }
    }
    Ok(VideoSample {
        frames: out_frames,
        tracks,
        meta: SampleMeta {
            seed: 0,
            bg_drift: opts.bg_drift,
        },
    })
}

fn background(t: usize, y: usize, x: usize, drift: bool) -> [u8; 3] {
    if !drift {
        return [20, 20, 28];
    }
    // Diagonal stripes translating one pixel per frame.
    if (x + y + t) / 4 % 2 == 0 {
        [20, 20, 28]
    } else {
        [48, 44, 60]
    }
}

fn covers(o: &ObjectSpec, y: usize, x: usize) -> bool {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let half = o.size / 2.0;
    match o.shape {
        Shape::Square => (px - o.cx).abs() <= half && (py - o.cy).abs() <= half,
        Shape::Disc => (px - o.cx).powi(2) + (py - o.cy).powi(2) <= half * half,
    }
}

fn step(o: &mut ObjectSpec, opts: &GenOptions) {
    let half = o.size / 2.0;
    let bounce = |p: &mut f64, v: &mut f64, extent: f64| {
        let lo = half - opts.wall_margin;
        let hi = extent - half + opts.wall_margin;
        *p += *v;
        if hi <= lo {
            *p = (lo + hi) / 2.0;
            return;
        }
        // Reflect until inside; velocities small relative to the box keep
        // this to a single iteration in practice.
        while *p < lo || *p > hi {
            if *p < lo {
                *p = 2.0 * lo - *p;
            } else {
                *p = 2.0 * hi - *p;
            }
            *v = -*v;
        }
    };
    bounce(&mut o.cx, &mut o.vx, opts.width as f64);
    bounce(&mut o.cy, &mut o.vy, opts.height as f64);
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k_max: usize,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn encode_sample(s: &VideoSample, k_max: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&s.meta.seed.to_le_bytes());
    buf.push(s.meta.bg_drift as u8);
    if s.tracks.len() > k_max {
        return Err(Error::Validation(format!(
            "sample has {} tracks, header k_max {k_max}",
            s.tracks.len()
        )));
    }
    buf.push(s.tracks.len() as u8);
    for f in &s.frames {
        for &v in f.data() {
            let q = (v * 255.0).round();
            if !(0.0..=255.0).contains(&q) || (q / 255.0 - v).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "frame value {v} is not a multiple of 1/255 in [0, 1]"
                )));
            }
            buf.push(q as u8);
        }
    }
    for tr in &s.tracks {
        if tr.boxes.len() != s.frames.len() {
            return Err(Error::Validation("track length differs from video length".into()));
        }
        for b in &tr.boxes {
            buf.push(b.pres as u8);
            for v in [b.x, b.y, b.w, b.h] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

pub fn write_dataset(path: &Path, samples: &[VideoSample]) -> Result<DatasetHeader> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Validation("refusing to write an empty dataset".into()))?;
    let (c, h, w) = first.frame_dims();
    let header = DatasetHeader {
        format_version: DATASET_VERSION,
        count: samples.len(),
        frames: first.len(),
        height: h,
        width: w,
        channels: c,
        k_max: samples.iter().map(|s| s.num_objects()).max().unwrap_or(0).max(1),
    };
    for (i, s) in samples.iter().enumerate() {
        if s.len() != header.frames || s.frame_dims() != (c, h, w) {
            return Err(Error::Validation(format!("sample {i} dimensions differ from sample 0")));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    let json = serde_json::to_vec(&header)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for s in samples {
        out.write_all(&encode_sample(s, header.k_max)?)?;
    }
    out.flush()?;
    Ok(header)
}

/// Reader that tracks its byte offset for error reports.
pub(crate) struct OffsetReader<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub fn new(inner: R) -> Self {
        OffsetReader { inner, offset: 0 }
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut got = 0;
        while got < n {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + got as u64,
                        format!("truncated while reading {what}"),
                    ))
                }
                Ok(k) => got += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub fn at_eof(&mut self) -> Result<bool> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<VideoSample>)> {
    let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
    let magic = r.bytes(8, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(0, "not a dataset file (bad magic)"));
    }
    let len = r.u32("header length")? as usize;
    let at = r.offset;
    let header: DatasetHeader = serde_json::from_slice(&r.bytes(len, "header")?)
        .map_err(|e| Error::format(at, format!("bad header: {e}")))?;
    if header.format_version != DATASET_VERSION {
        return Err(Error::format(
            at,
            format!(
                "dataset version {} unsupported (expected {DATASET_VERSION})",
                header.format_version
            ),
        ));
    }
    if header.count == 0 || header.k_max == 0 || header.frames == 0 {
        return Err(Error::format(at, "header declares an empty dataset"));
    }
    let (t, c, h, w) = (header.frames, header.channels, header.height, header.width);
    let mut samples = Vec::with_capacity(header.count);
    for i in 0..header.count {
        let start = r.offset;
        let mut raw = Vec::new();
        let seed_b = r.bytes(8, "sample seed")?;
        raw.extend_from_slice(&seed_b);
        let drift = r.u8("sample flags")?;
        let k = r.u8("object count")? as usize;
        raw.push(drift);
        raw.push(k as u8);
        if k > header.k_max {
            return Err(Error::format(start, format!("sample {i}: {k} objects > k_max")));
        }
        let pix = r.bytes(t * c * h * w, "frames")?;
        raw.extend_from_slice(&pix);
        let trk = r.bytes(k * t * 33, "tracks")?;
        raw.extend_from_slice(&trk);
        let sum_at = r.offset;
        let stored = r.u64("checksum")?;
        if stored != fnv1a(&raw) {
            return Err(Error::format(sum_at, format!("sample {i}: checksum mismatch")));
        }
        let frames = pix
            .chunks_exact(c * h * w)
            .map(|f| Tensor::new(vec![c, h, w], f.iter().map(|&v| v as f64 / 255.0).collect()))
            .collect::<Result<Vec<_>>>()?;
        let mut tracks = Vec::with_capacity(k);
        for rec in trk.chunks_exact(t * 33) {
            let boxes = rec
                .chunks_exact(33)
                .map(|b| {
                    let f = |j: usize| f64::from_le_bytes(b[1 + 8 * j..9 + 8 * j].try_into().unwrap());
                    BBox {
                        pres: b[0] != 0,
                        x: f(0),
                        y: f(1),
                        w: f(2),
                        h: f(3),
                    }
                })
                .collect();
            tracks.push(Track { boxes });
        }
        samples.push(VideoSample {
            frames,
            tracks,
            meta: SampleMeta {
                seed: u64::from_le_bytes(seed_b.try_into().unwrap()),
                bg_drift: drift != 0,
            },
        });
    }
    if !r.at_eof()? {
        return Err(Error::format(r.offset, "trailing bytes after last sample"));
    }
    Ok((header, samples))
}

/// Checksum of one sample's serialized payload.
pub fn sample_checksum(s: &VideoSample) -> Result<u64> {
    let bytes = encode_sample(s, usize::MAX)?;
    Ok(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()))
}
