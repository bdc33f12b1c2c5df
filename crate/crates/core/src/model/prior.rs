//! Parameters and teacher-forced forward pass of the two-stream prior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{BlockParams, Linear, Norm, ObjKv};
use super::config::ModelConfig;
use super::masks::{AttnMasks, WindowLayout};
use super::stream::{PatchSlot, WindowInput};
use crate::boxes::{PatchEncoder, QuantizedBox, BINS, COORD_VOCAB};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Prior {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    z_emb: ParamId,
    z_start: ParamId,
    pos_t: ParamId,
    pos_h: ParamId,
    pos_w: ParamId,
    patch_enc: PatchEncoder,
    pad: ParamId,
    pres_emb: ParamId,
    coord_emb: [ParamId; 4],
    pos_time: ParamId,
    pos_slot: ParamId,
    pub blocks: Vec<BlockParams>,
    ln_f_b: Norm,
    ln_f_o: Norm,
    head_pres: Linear,
    head_coord: [Linear; 4],
    head_z: Linear,
}

/// Object-stream result of a forward pass.
#[derive(Clone, Debug)]
pub struct ObjOut {
    /// Pre-positional object token embeddings `[n_obj × D]`.
    pub obj_in: Var,
    /// Keys/values for the base stream, one entry per layer.
    pub kv: Vec<Option<ObjKv>>,
    /// Final normalized object states.
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[n_o·K × 2]`, rows `(u, k)` row-major.
    pub pres: Var,
    /// x, y, w, h logits, each `[n_o·K × 65]`.
    pub coords: [Var; 4],
    /// `[base rows × V_z]`.
    pub z: Var,
    pub obj_in: Var,
    /// Pre-positional base token embeddings.
    pub base_in: Var,
}

impl Prior {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = cfg.dim;
        let std = 0.02;
        let z_emb = p.add("z_emb", Tensor::randn(&[cfg.vocab_z, d], std, &mut rng));
        let z_start = p.add("z_start", Tensor::randn(&[1, d], std, &mut rng));
        let pos_t = p.add("pos_t", Tensor::randn(&[cfg.w_b, d], std, &mut rng));
        let pos_h = p.add("pos_h", Tensor::randn(&[cfg.latent_h, d], std, &mut rng));
        let pos_w = p.add("pos_w", Tensor::randn(&[cfg.latent_w, d], std, &mut rng));
        let patch_enc = PatchEncoder::new(&mut p, "patch_enc", cfg.channels, cfg.patch_res, cfg.patch_grid, d, &mut rng)?;
        let pad = p.add("pad", Tensor::randn(&[cfg.patch_tokens(), d], std, &mut rng));
        let pres_emb = p.add("pres_emb", Tensor::randn(&[2, d], std, &mut rng));
        let coord_emb = ["x", "y", "w", "h"].map(|n| p.add(format!("{n}_emb"), Tensor::randn(&[BINS, d], std, &mut rng)));
        let pos_time = p.add("pos_time", Tensor::randn(&[cfg.w_o, d], std, &mut rng));
        let pos_slot = p.add("pos_slot", Tensor::randn(&[cfg.tokens_per_object(), d], std, &mut rng));
        let blocks = (0..cfg.layers)
            .map(|i| BlockParams::new(&mut p, &format!("block{i}"), &cfg, &mut rng))
            .collect();
        let ln_f_b = Norm::new(&mut p, "ln_f_b", d);
        let ln_f_o = Norm::new(&mut p, "ln_f_o", d);
        let head_pres = Linear::new(&mut p, "head_pres", d, 2, std, &mut rng);
        let head_coord = ["x", "y", "w", "h"].map(|n| Linear::new(&mut p, &format!("head_{n}"), d, COORD_VOCAB, std, &mut rng));
        let head_z = Linear::new(&mut p, "head_z", d, cfg.vocab_z, std, &mut rng);
        let prior = Prior {
            cfg,
            params: p,
            z_emb,
            z_start,
            pos_t,
            pos_h,
            pos_w,
            patch_enc,
            pad,
            pres_emb,
            coord_emb,
            pos_time,
            pos_slot,
            blocks,
            ln_f_b,
            ln_f_o,
            head_pres,
            head_coord,
            head_z,
        };
        debug_assert_eq!(prior.params.num_scalars(), prior.cfg.param_count());
        Ok(prior)
    }

    pub fn patch_encoder(&self) -> &PatchEncoder {
        &self.patch_enc
    }

    /// Object tokens before positional embedding: patch tokens, then box
    /// token embeddings, with absent boxes mapped to zero rows.
    pub fn embed_objects(&self, tape: &mut Tape, bd: &Bound, input: &WindowInput) -> Result<Var> {
        let cfg = &self.cfg;
        let p = cfg.patch_tokens();
        let l_n = cfg.tokens_per_object();
        let d = cfg.dim;
        let pixels: Vec<&Tensor> = input
            .patches
            .iter()
            .filter_map(|s| match s {
                PatchSlot::Pixels(t) => Some(t),
                _ => None,
            })
            .collect();
        let mut parts = vec![tape.constant(Tensor::zeros(&[1, d])), bd[self.pad]];
        let patch_base = 1 + p;
        if !pixels.is_empty() {
            let mut data = Vec::with_capacity(pixels.len() * pixels[0].len());
            for t in &pixels {
                if t.shape() != [cfg.channels, cfg.patch_res, cfg.patch_res] {
                    return Err(Error::shape(format!("patch shape {:?}", t.shape())));
                }
                data.extend_from_slice(t.data());
            }
            let x = tape.constant(Tensor::new(
                vec![pixels.len(), cfg.channels, cfg.patch_res, cfg.patch_res],
                data,
            )?);
            parts.push(self.patch_enc.encode(tape, bd, x)?);
        }
        let pres_base = patch_base + pixels.len() * p;
        let coord_base = pres_base + 2;
        parts.push(bd[self.pres_emb]);
        parts.extend(self.coord_emb.iter().map(|&id| bd[id]));
        let table = tape.concat_rows(&parts)?;

        let lay = &input.layout;
        let mut idx = Vec::with_capacity(lay.obj_rows(cfg));
        let mut next_pixel = 0;
        for u in 0..lay.n_o() {
            for k in 0..cfg.k {
                match &input.patches[u * cfg.k + k] {
                    PatchSlot::Pad => idx.extend(1..=p),
                    PatchSlot::Zero => idx.extend(std::iter::repeat_n(0, p)),
                    PatchSlot::Pixels(_) => {
                        idx.extend((0..p).map(|l| patch_base + next_pixel * p + l));
                        next_pixel += 1;
                    }
                }
                match input.boxes[u][k] {
                    QuantizedBox::Absent => idx.extend([0; 5]),
                    QuantizedBox::Present(b) => {
                        idx.push(pres_base + 1);
                        for (m, &bin) in b.iter().enumerate() {
                            idx.push(coord_base + m * BINS + bin as usize);
                        }
                    }
                }
            }
        }
        debug_assert_eq!(idx.len(), lay.n_o() * cfg.k * l_n);
        tape.gather_rows(table, &idx)
    }

    /// Base tokens before positional embedding: start token, then the
    /// latent tokens shifted right by one.
    pub fn embed_base(&self, tape: &mut Tape, bd: &Bound, input: &WindowInput, rows: usize) -> Result<Var> {
        let flat: Vec<usize> = input.z.iter().flatten().copied().collect();
        if rows == 0 || flat.len() + 1 < rows {
            return Err(Error::contract(format!(
                "{rows} base rows need {} latent tokens, have {}",
                rows.saturating_sub(1),
                flat.len()
            )));
        }
        let table = tape.concat_rows(&[bd[self.z_start], bd[self.z_emb]])?;
        let idx: Vec<usize> = (0..rows).map(|n| if n == 0 { 0 } else { 1 + flat[n - 1] }).collect();
        tape.gather_rows(table, &idx)
    }

    fn add_obj_positions(&self, tape: &mut Tape, bd: &Bound, lay: &WindowLayout, x: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let n = lay.obj_rows(cfg);
        let time: Vec<usize> = (0..n).map(|r| lay.time_index(cfg, lay.obj_coords(cfg, r).0)).collect();
        let slot: Vec<usize> = (0..n).map(|r| lay.obj_coords(cfg, r).2).collect();
        let pt = tape.gather_rows(bd[self.pos_time], &time)?;
        let ps = tape.gather_rows(bd[self.pos_slot], &slot)?;
        let x = tape.add(x, pt)?;
        tape.add(x, ps)
    }

    fn add_base_positions(&self, tape: &mut Tape, bd: &Bound, rows: usize, x: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let hw = cfg.latent_tokens();
        let tj: Vec<usize> = (0..rows).map(|n| n / hw).collect();
        let tr: Vec<usize> = (0..rows).map(|n| (n % hw) / cfg.latent_w).collect();
        let tc: Vec<usize> = (0..rows).map(|n| n % cfg.latent_w).collect();
        let a = tape.gather_rows(bd[self.pos_t], &tj)?;
        let b = tape.gather_rows(bd[self.pos_h], &tr)?;
        let c = tape.gather_rows(bd[self.pos_w], &tc)?;
        let x = tape.add(x, a)?;
        let x = tape.add(x, b)?;
        tape.add(x, c)
    }

    /// Runs the object stream alone. Box outputs never depend on the base
    /// stream, so this is all a box-sampling step needs.
    pub fn object_stream(&self, tape: &mut Tape, bd: &Bound, input: &WindowInput, masks: &AttnMasks) -> Result<ObjOut> {
        input.validate(&self.cfg)?;
        let obj_in = self.embed_objects(tape, bd, input)?;
        let x = self.add_obj_positions(tape, bd, &input.layout, obj_in)?;
        let mut x = tape.dropout(x, self.cfg.dropout);
        let mut kv = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (nx, layer_kv) = blk.object_half(tape, bd, &self.cfg, x, masks)?;
            kv.push(layer_kv);
            x = nx;
        }
        let hidden = self.ln_f_o.apply(tape, bd, x)?;
        Ok(ObjOut { obj_in, kv, hidden })
    }

    /// Box logits from final object states: the output at within-object
    /// position `P − 1 + m` predicts token kind `m`.
    pub fn box_logits(&self, tape: &mut Tape, bd: &Bound, lay: &WindowLayout, hidden: Var) -> Result<(Var, [Var; 4])> {
        let cfg = &self.cfg;
        let p = cfg.patch_tokens();
        let rows = |m: usize| -> Vec<usize> {
            (0..lay.n_o())
                .flat_map(|u| (0..cfg.k).map(move |k| (u, k)))
                .map(|(u, k)| lay.obj_row(cfg, u, k, p - 1 + m))
                .collect()
        };
        let h = tape.gather_rows(hidden, &rows(0))?;
        let pres = self.head_pres.apply(tape, bd, h)?;
        let mut coords = [pres; 4];
        for (m, c) in coords.iter_mut().enumerate() {
            let h = tape.gather_rows(hidden, &rows(m + 1))?;
            *c = self.head_coord[m].apply(tape, bd, h)?;
        }
        Ok((pres, coords))
    }

    /// Runs the base stream over its first `rows` positions and returns
    /// `(base_in, z_logits)`.
    #[allow(clippy::too_many_arguments)]
    pub fn base_stream(
        &self,
        tape: &mut Tape,
        bd: &Bound,
        input: &WindowInput,
        rows: usize,
        kv: &[Option<ObjKv>],
        masks: &AttnMasks,
    ) -> Result<(Var, Var)> {
        let base_in = self.embed_base(tape, bd, input, rows)?;
        let x = self.add_base_positions(tape, bd, rows, base_in)?;
        let mut x = tape.dropout(x, self.cfg.dropout);
        for (blk, layer_kv) in self.blocks.iter().zip(kv) {
            x = blk.base_half(tape, bd, &self.cfg, x, *layer_kv, masks)?;
        }
        let h = self.ln_f_b.apply(tape, bd, x)?;
        let z = self.head_z.apply(tape, bd, h)?;
        Ok((base_in, z))
    }

    /// Teacher-forced logits for every position of the window.
    pub fn forward(&self, tape: &mut Tape, bd: &Bound, input: &WindowInput, masks: &AttnMasks) -> Result<ForwardOut> {
        let lay = input.layout;
        let rows = lay.base_rows(&self.cfg);
        if masks.base_base.n_q() != rows || masks.obj_time.n_q() != lay.obj_rows(&self.cfg) {
            return Err(Error::contract("masks were built for a different window"));
        }
        if input.z.len() != lay.n_b {
            return Err(Error::contract(format!(
                "teacher forcing needs {} latent grids, got {}",
                lay.n_b,
                input.z.len()
            )));
        }
        let obj = self.object_stream(tape, bd, input, masks)?;
        let (pres, coords) = self.box_logits(tape, bd, &lay, obj.hidden)?;
        let (base_in, z) = self.base_stream(tape, bd, input, rows, &obj.kv, masks)?;
        Ok(ForwardOut {
            pres,
            coords,
            z,
            obj_in: obj.obj_in,
            base_in,
        })
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    }

    /// Restores weights from a checkpoint with a `model` section and
    /// `prior.*` tensors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = ck.section("model")?;
        let mut p = Prior::new(cfg, 0)?;
        p.params.load_from(&ck.with_prefix("prior"))?;
        Ok(p)
    }
}
