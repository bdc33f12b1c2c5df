//! Autoregressive generation: boxes for a timestep first, then its latent
//! grid in raster order, then the decoded frame that later patches are
//! cropped from.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{dequantize_box, quantize_box, BBox, QuantizedBox, Track, BINS};
use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecConfig};
use crate::data::{SampleMeta, VideoSample, PALETTE};
use crate::error::{Error, Result};
use crate::model::{build_masks, collect_patches, ModelConfig, ObjKv, PatchSlot, Prior, WindowInput, WindowLayout};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// `0` means argmax.
    pub temperature: f64,
    pub top_k: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_k: None,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        SamplingConfig {
            temperature: 0.0,
            top_k: None,
        }
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], s: &SamplingConfig, rng: &mut R) -> usize {
    if s.temperature <= 0.0 || s.top_k == Some(1) {
        return argmax(logits);
    }
    let mut keep: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = s.top_k.filter(|&k| k > 0 && k < logits.len()) {
        keep.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        keep.truncate(k);
        keep.sort_unstable();
    }
    let max = keep.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = keep.iter().map(|&i| ((logits[i] - max) / s.temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (j, &wi) in w.iter().enumerate() {
        if r < wi {
            return keep[j];
        }
        r -= wi;
    }
    *keep.last().expect("non-empty vocabulary")
}

/// Overrides the box of `object` at time `at`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub at: usize,
    pub object: usize,
    pub bbox: BBox,
}

/// Generation state for one rollout.
pub struct GenState<'a> {
    prior: &'a Prior,
    codec: &'a Codec,
    /// Decoded frames, the source of patch crops.
    pub frames: Vec<Tensor>,
    /// Frames as returned to the caller (conditioning frames untouched,
    /// generated frames clamped to `[0, 1]`).
    pub shown: Vec<Tensor>,
    /// `[t][K]`; may run ahead of `frames` when boxes are given or sampled.
    pub boxes: Vec<Vec<QuantizedBox>>,
    pub z: Vec<Vec<usize>>,
    edits: BTreeMap<(usize, usize), QuantizedBox>,
    rng: ChaCha8Rng,
    pub sampling: SamplingConfig,
}

/// Output of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub frames: Vec<Tensor>,
    pub boxes: Vec<Vec<QuantizedBox>>,
    pub z: Vec<Vec<usize>>,
    /// Frames with box outlines drawn in each slot's colour.
    pub overlays: Vec<Tensor>,
}

impl Generated {
    pub fn to_video(&self, meta: SampleMeta) -> VideoSample {
        let k = self.boxes.first().map_or(0, Vec::len);
        let tracks = (0..k)
            .map(|s| Track {
                boxes: self.boxes.iter().map(|row| dequantize_box(&row[s])).collect(),
            })
            .collect();
        VideoSample {
            frames: self.frames.clone(),
            tracks,
            meta,
        }
    }
}

impl<'a> GenState<'a> {
    pub fn new(prior: &'a Prior, codec: &'a Codec, sampling: SamplingConfig, seed: u64) -> Result<Self> {
        check_pair(&prior.cfg, &codec.cfg)?;
        Ok(GenState {
            prior,
            codec,
            frames: Vec::new(),
            shown: Vec::new(),
            boxes: Vec::new(),
            z: Vec::new(),
            edits: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            sampling,
        })
    }

    /// Next timestep to materialize.
    pub fn t(&self) -> usize {
        self.frames.len()
    }

    /// Teacher-forces `frames` and `boxes` (`boxes` may cover more
    /// timesteps than `frames`; their frames are generated later).
    pub fn condition(&mut self, frames: &[Tensor], boxes: &[Vec<QuantizedBox>]) -> Result<()> {
        let cfg = &self.prior.cfg;
        if !self.frames.is_empty() || !self.boxes.is_empty() {
            return Err(Error::contract("conditioning must come before generation"));
        }
        if boxes.len() < frames.len() {
            return Err(Error::contract("every conditioning frame needs its boxes"));
        }
        if boxes.len() > cfg.w_o {
            return Err(Error::contract(format!(
                "{} conditioning timesteps exceed the object window of {}",
                boxes.len(),
                cfg.w_o
            )));
        }
        if boxes.iter().any(|r| r.len() != cfg.k) {
            return Err(Error::contract(format!("conditioning boxes need {} slots", cfg.k)));
        }
        if !frames.is_empty() {
            let z = self.codec.tokenize(frames)?;
            self.frames = self.codec.decode_many(&z)?;
            self.z = z;
            self.shown = frames.to_vec();
        }
        self.boxes = boxes.to_vec();
        Ok(())
    }

    /// Forces `bbox` for `object` at time `at`, before or after that
    /// timestep's boxes were sampled but before its frame exists.
    pub fn apply_edit(&mut self, edit: &Edit) -> Result<()> {
        if edit.at < self.t() {
            return Err(Error::contract(format!("timestep {} is already materialized", edit.at)));
        }
        if edit.object >= self.prior.cfg.k {
            return Err(Error::Index(format!("object {} >= K = {}", edit.object, self.prior.cfg.k)));
        }
        let q = quantize_box(&edit.bbox)?;
        if let Some(row) = self.boxes.get_mut(edit.at) {
            row[edit.object] = q;
        }
        self.edits.insert((edit.at, edit.object), q);
        Ok(())
    }

    /// Object window ending at `t`: `(layout, first absolute timestep)`.
    fn window(&self, t: usize) -> Result<(WindowLayout, usize)> {
        let cfg = &self.prior.cfg;
        let n_b = cfg.w_b.min(t + 1);
        let start = t + 1 - n_b;
        let tau = start.min(cfg.max_history());
        Ok((WindowLayout::new(cfg, tau, n_b)?, start - tau))
    }

    fn window_input(&self, t: usize, current: &[QuantizedBox], patches: &[PatchSlot], z: Vec<Vec<usize>>) -> Result<WindowInput> {
        let (layout, a) = self.window(t)?;
        let mut boxes = self.boxes[a..t].to_vec();
        boxes.push(current.to_vec());
        Ok(WindowInput {
            layout,
            boxes,
            z,
            patches: patches.to_vec(),
        })
    }

    fn patches(&self, t: usize) -> Result<Vec<PatchSlot>> {
        let (layout, a) = self.window(t)?;
        let placeholder = vec![vec![QuantizedBox::Absent; self.prior.cfg.k]];
        let boxes: Vec<Vec<QuantizedBox>> = self.boxes[a..t].iter().cloned().chain(placeholder).collect();
        debug_assert_eq!(boxes.len(), layout.n_o());
        collect_patches(&self.prior.cfg, &self.frames[a..t], &boxes)
    }

    /// Samples (or takes the given/edited) boxes of timestep `t`.
    pub fn sample_boxes_step(&mut self) -> Result<Vec<QuantizedBox>> {
        let t = self.t();
        if let Some(row) = self.boxes.get(t) {
            return Ok(row.clone());
        }
        let cfg = self.prior.cfg.clone();
        let patches = self.patches(t)?;
        let (layout, _) = self.window(t)?;
        let masks = build_masks(&cfg, &layout, None)?;
        let row = (layout.n_o() - 1) * cfg.k;
        let mut cur = vec![QuantizedBox::Absent; cfg.k];
        for k in 0..cfg.k {
            if let Some(&e) = self.edits.get(&(t, k)) {
                cur[k] = e;
                continue;
            }
            let pres = self.box_logits(t, &cur, &patches, &masks, 0, row + k)?;
            if sample_token(&pres, &self.sampling, &mut self.rng) == 0 {
                cur[k] = QuantizedBox::Absent;
                continue;
            }
            let mut bins = [0u8; 4];
            for m in 0..4 {
                cur[k] = QuantizedBox::Present(bins);
                let logits = self.box_logits(t, &cur, &patches, &masks, m + 1, row + k)?;
                // A present box cannot take the NULL coordinate.
                bins[m] = sample_token(&logits[..BINS], &self.sampling, &mut self.rng) as u8;
            }
            cur[k] = QuantizedBox::Present(bins);
        }
        self.boxes.push(cur.clone());
        Ok(cur)
    }

    /// Logits of head `kind` (0 = presence, 1..=4 = x, y, w, h) at `row`.
    fn box_logits(
        &self,
        t: usize,
        cur: &[QuantizedBox],
        patches: &[PatchSlot],
        masks: &crate::model::AttnMasks,
        kind: usize,
        row: usize,
    ) -> Result<Vec<f64>> {
        let input = self.window_input(t, cur, patches, Vec::new())?;
        let mut tape = Tape::new();
        let bd = self.prior.params.bind(&mut tape, false);
        let obj = self.prior.object_stream(&mut tape, &bd, &input, masks)?;
        let (pres, coords) = self.prior.box_logits(&mut tape, &bd, &input.layout, obj.hidden)?;
        let v = if kind == 0 { pres } else { coords[kind - 1] };
        Ok(tape.value(v).row(row).to_vec())
    }

    /// Samples the latent grid of timestep `t` (whose boxes must exist),
    /// decodes it and materializes the frame.
    pub fn sample_latents_step(&mut self) -> Result<Vec<usize>> {
        let t = self.t();
        let cfg = self.prior.cfg.clone();
        let Some(cur) = self.boxes.get(t).cloned() else {
            return Err(Error::contract(format!("boxes of timestep {t} have not been sampled")));
        };
        let patches = self.patches(t)?;
        let (layout, a) = self.window(t)?;
        let start = a + layout.tau;
        let hw = cfg.latent_tokens();
        let full = build_masks(&cfg, &layout, None)?;
        let mut z: Vec<Vec<usize>> = self.z[start..t].to_vec();
        z.push(vec![0; hw]);
        let mut input = self.window_input(t, &cur, &patches, z)?;

        // The object stream does not depend on latents: run it once.
        let kv: Vec<Option<(Tensor, Tensor)>> = {
            let mut tape = Tape::new();
            let bd = self.prior.params.bind(&mut tape, false);
            let obj = self.prior.object_stream(&mut tape, &bd, &input, &full)?;
            obj.kv
                .iter()
                .map(|o| o.map(|kv| (tape.value(kv.k).clone(), tape.value(kv.v).clone())))
                .collect()
        };
        let prefix = (layout.n_b - 1) * hw;
        for i in 0..hw {
            let rows = prefix + i + 1;
            let masks = build_masks(&cfg, &layout, Some(rows))?;
            let mut tape = Tape::new();
            let bd = self.prior.params.bind(&mut tape, false);
            let layer_kv: Vec<Option<ObjKv>> = kv
                .iter()
                .map(|o| {
                    o.as_ref().map(|(k, v)| ObjKv {
                        k: tape.constant(k.clone()),
                        v: tape.constant(v.clone()),
                    })
                })
                .collect();
            let (_, logits) = self.prior.base_stream(&mut tape, &bd, &input, rows, &layer_kv, &masks)?;
            let tok = sample_token(tape.value(logits).row(rows - 1), &self.sampling, &mut self.rng);
            input.z.last_mut().expect("current grid")[i] = tok;
        }
        let grid = input.z.pop().expect("current grid");
        let frame = self.codec.decode(&grid)?;
        self.shown.push(frame.map(|v| v.clamp(0.0, 1.0)));
        self.frames.push(frame);
        self.z.push(grid.clone());
        Ok(grid)
    }

    /// One full timestep.
    pub fn step(&mut self) -> Result<()> {
        self.sample_boxes_step()?;
        self.sample_latents_step()?;
        Ok(())
    }

    pub fn finish(self) -> Generated {
        let n = self.frames.len();
        let boxes: Vec<Vec<QuantizedBox>> = self.boxes.into_iter().take(n).collect();
        let overlays = self.shown.iter().zip(&boxes).map(|(f, b)| overlay(f, b)).collect();
        Generated {
            frames: self.shown,
            boxes,
            z: self.z,
            overlays,
        }
    }
}

/// Checks that a prior and codec were built for each other.
pub fn check_pair(model: &ModelConfig, codec: &CodecConfig) -> Result<()> {
    let l = codec.latent_size;
    if model.latent_h != l || model.latent_w != l || model.vocab_z != codec.codebook_size || model.channels != codec.channels {
        return Err(Error::config(format!(
            "prior expects {}×{} latents over {} codes and {} channels; codec gives {l}×{l} over {} and {}",
            model.latent_h, model.latent_w, model.vocab_z, model.channels, codec.codebook_size, codec.channels
        )));
    }
    Ok(())
}

/// Loads the prior and codec stored in a prior checkpoint.
pub fn load_bundle(ck: &Checkpoint) -> Result<(Prior, Codec)> {
    let prior = Prior::from_checkpoint(ck)?;
    let codec = Codec::from_checkpoint(ck)?;
    check_pair(&prior.cfg, &codec.cfg)?;
    Ok((prior, codec))
}

/// Conditions on the first `cond_frames` frames and `cond_boxes` box
/// timesteps of `video`, applies `edits`, and generates `horizon` frames.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    prior: &Prior,
    codec: &Codec,
    video: &VideoSample,
    cond_frames: usize,
    cond_boxes: usize,
    horizon: usize,
    edits: &[Edit],
    sampling: SamplingConfig,
    seed: u64,
) -> Result<Generated> {
    if cond_frames > cond_boxes || cond_boxes > video.len() {
        return Err(Error::contract(format!(
            "conditioning {cond_frames} frames / {cond_boxes} box steps from a video of {}",
            video.len()
        )));
    }
    let k = prior.cfg.k;
    if video.num_objects() > k {
        return Err(Error::contract(format!("video has {} tracks, model has {k} slots", video.num_objects())));
    }
    let mut boxes = Vec::with_capacity(cond_boxes);
    for t in 0..cond_boxes {
        let mut row = video.boxes_at(t).iter().map(quantize_box).collect::<Result<Vec<_>>>()?;
        row.resize(k, QuantizedBox::Absent);
        boxes.push(row);
    }
    let mut st = GenState::new(prior, codec, sampling, seed)?;
    st.condition(&video.frames[..cond_frames], &boxes)?;
    for e in edits {
        st.apply_edit(e)?;
    }
    for _ in 0..horizon {
        st.step()?;
    }
    Ok(st.finish())
}

/// Draws one-pixel box outlines onto a copy of `frame`.
pub fn overlay(frame: &Tensor, boxes: &[QuantizedBox]) -> Tensor {
    let mut out = frame.clone();
    let s = frame.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    for (k, q) in boxes.iter().enumerate() {
        if !q.is_present() {
            continue;
        }
        let (x0, y0, x1, y1) = dequantize_box(q).corners();
        let px = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
        let (x0, x1) = (px(x0, w), px(x1 - 1e-9, w));
        let (y0, y1) = (px(y0, h), px(y1 - 1e-9, h));
        let color = PALETTE[k % PALETTE.len()];
        let mut put = |y: usize, x: usize| {
            for ch in 0..c.min(3) {
                out.set(&[ch, y, x], color[ch] as f64 / 255.0);
            }
        };
        for x in x0..=x1 {
            put(y0, x);
            put(y1, x);
        }
        for y in y0..=y1 {
            put(y, x0);
            put(y, x1);
        }
    }
    out
}

#[cfg(test)]
mod tests;
