//! Rollout artifacts: binary PPM frames and the JSON track file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use povt_core::boxes::{dequantize_box, QuantizedBox};
use povt_core::numerics::Tensor;
use povt_core::sample::{Edit, Generated};

pub const TRACKS_SCHEMA_VERSION: u32 = 1;

/// Writes a `3×H×W` frame in `[0, 1]` as a binary (P6) PPM.
pub fn write_ppm(path: &Path, frame: &Tensor) -> std::io::Result<()> {
    let s = frame.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                // Grey frames repeat their single channel.
                let v = frame.at(&[ch.min(c - 1), y, x]);
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out.write_all(&buf)?;
    out.flush()
}

#[derive(Serialize)]
pub struct BoxRecord {
    pub slot: usize,
    pub pres: bool,
    /// `[pres, x, y, w, h]` with 64 for missing coordinates.
    pub tokens: [usize; 5],
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Serialize)]
pub struct FrameRecord {
    pub t: usize,
    /// False for conditioning frames.
    pub generated: bool,
    pub boxes: Vec<BoxRecord>,
    pub z: Vec<usize>,
}

#[derive(Serialize)]
pub struct EditRecord {
    pub at: usize,
    pub object: usize,
    pub pres: bool,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Serialize)]
pub struct TrackFile {
    pub schema_version: u32,
    pub seed: u64,
    pub index: usize,
    pub cond_frames: usize,
    pub cond_boxes: usize,
    pub edits: Vec<EditRecord>,
    pub frames: Vec<FrameRecord>,
}

fn box_record(slot: usize, q: &QuantizedBox) -> BoxRecord {
    let b = dequantize_box(q);
    BoxRecord {
        slot,
        pres: b.pres,
        tokens: q.tokens(),
        x: b.x,
        y: b.y,
        w: b.w,
        h: b.h,
    }
}

impl TrackFile {
    pub fn new(g: &Generated, seed: u64, index: usize, cond_frames: usize, cond_boxes: usize, edits: &[Edit]) -> Self {
        TrackFile {
            schema_version: TRACKS_SCHEMA_VERSION,
            seed,
            index,
            cond_frames,
            cond_boxes,
            edits: edits
                .iter()
                .map(|e| EditRecord {
                    at: e.at,
                    object: e.object,
                    pres: e.bbox.pres,
                    x: e.bbox.x,
                    y: e.bbox.y,
                    w: e.bbox.w,
                    h: e.bbox.h,
                })
                .collect(),
            frames: g
                .boxes
                .iter()
                .zip(&g.z)
                .enumerate()
                .map(|(t, (row, z))| FrameRecord {
                    t,
                    generated: t >= cond_frames,
                    boxes: row.iter().enumerate().map(|(k, q)| box_record(k, q)).collect(),
                    z: z.clone(),
                })
                .collect(),
        }
    }
}
