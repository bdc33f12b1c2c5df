//! VQ-VAE frame codec: convolutional encoder, nearest-neighbour codebook
//! quantization with a straight-through estimator, mirrored decoder.

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub input_size: usize,
    pub latent_size: usize,
    pub channels: usize,
    pub hidden: usize,
    pub residual_hidden: usize,
    pub residual_layers: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub beta: f64,
    pub lr: f64,
    /// Seed the codebook from encoder outputs of the first batch.
    pub data_init: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            input_size: 32,
            latent_size: 8,
            channels: 3,
            hidden: 32,
            residual_hidden: 16,
            residual_layers: 2,
            codebook_size: 128,
            codebook_dim: 32,
            beta: 0.25,
            lr: 7e-4,
            data_init: true,
        }
    }
}

impl CodecConfig {
    /// 64×64 → 16×16 with a 1024-entry codebook.
    pub fn full_size() -> Self {
        CodecConfig {
            input_size: 64,
            latent_size: 16,
            hidden: 128,
            residual_hidden: 64,
            residual_layers: 2,
            codebook_size: 1024,
            codebook_dim: 256,
            ..CodecConfig::default()
        }
    }

    /// Number of stride-2 stages.
    pub fn stages(&self) -> Result<usize> {
        self.validate()?;
        Ok((self.input_size / self.latent_size).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let ratio = self.input_size.checked_div(self.latent_size).unwrap_or(0);
        if self.latent_size == 0
            || self.input_size % self.latent_size != 0
            || ratio < 2
            || !ratio.is_power_of_two()
        {
            return Err(Error::config(format!(
                "input size {} must be a power-of-two multiple (>= 2) of latent size {}",
                self.input_size, self.latent_size
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook needs at least 2 entries"));
        }
        if self.codebook_dim == 0 || self.hidden == 0 || self.channels == 0 || self.residual_hidden == 0 {
            return Err(Error::config("codec widths must be positive"));
        }
        if !(self.beta >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::config("need beta >= 0 and lr > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[V × d]`.
    pub vectors: Tensor,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Index of the nearest vector to `z` (lowest index on ties).
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.size() {
            let e = self.vectors.row(i);
            let d: f64 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

/// Nearest-codebook quantization of a `[h×w×d]` (or `[N×d]`) feature grid.
pub fn quantize(z_e: &Tensor, cb: &Codebook) -> Result<(Vec<usize>, Tensor)> {
    if cb.vectors.ndim() != 2 || cb.size() == 0 {
        return Err(Error::config("empty codebook"));
    }
    let d = cb.dim();
    if *z_e.shape().last().unwrap_or(&0) != d {
        return Err(Error::shape(format!(
            "feature dim {:?} vs codebook dim {d}",
            z_e.shape()
        )));
    }
    let idx: Vec<usize> = z_e.data().chunks_exact(d).map(|z| cb.nearest(z)).collect();
    let mut zq = Vec::with_capacity(z_e.len());
    for &i in &idx {
        zq.extend_from_slice(cb.vectors.row(i));
    }
    Ok((idx, Tensor::new(z_e.shape().to_vec(), zq)?))
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    transposed: bool,
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub params: ParamStore,
    down: Vec<Conv>,
    enc_pre: Conv,
    enc_res: Vec<ResBlock>,
    enc_out: Conv,
    dec_in: Conv,
    dec_res: Vec<ResBlock>,
    up: Vec<Conv>,
    codebook: ParamId,
}

/// Graph handles from one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CodecGraph {
    /// `[N × d]` encoder outputs, one row per latent cell.
    pub z_e: Var,
    /// Straight-through quantized features, same layout as `z_e`.
    pub z_q: Var,
    pub recon: Var,
    pub recon_loss: Var,
    pub codebook_loss: Var,
    pub commit_loss: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecLosses {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        let stages = cfg.stages()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut conv = |p: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, transposed: bool| {
            let fan_in = (cin * k * k) as f64;
            let shape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
            let w = p.add(format!("{name}.w"), Tensor::randn(&shape, (2.0 / fan_in).sqrt(), &mut rng));
            let b = p.add(format!("{name}.b"), Tensor::zeros(&[cout]));
            Conv {
                w,
                b,
                stride,
                pad,
                transposed,
            }
        };
        let (c, h, r, d) = (cfg.channels, cfg.hidden, cfg.residual_hidden, cfg.codebook_dim);
        let down = (0..stages)
            .map(|i| conv(&mut p, &format!("enc.down{i}"), if i == 0 { c } else { h }, h, 4, 2, 1, false))
            .collect();
        let enc_pre = conv(&mut p, "enc.pre", h, h, 3, 1, 1, false);
        let enc_res = (0..cfg.residual_layers)
            .map(|i| ResBlock {
                a: conv(&mut p, &format!("enc.res{i}.a"), h, r, 3, 1, 1, false),
                b: conv(&mut p, &format!("enc.res{i}.b"), r, h, 1, 1, 0, false),
            })
            .collect();
        let enc_out = conv(&mut p, "enc.out", h, d, 1, 1, 0, false);
        let dec_in = conv(&mut p, "dec.in", d, h, 3, 1, 1, false);
        let dec_res = (0..cfg.residual_layers)
            .map(|i| ResBlock {
                a: conv(&mut p, &format!("dec.res{i}.a"), h, r, 3, 1, 1, false),
                b: conv(&mut p, &format!("dec.res{i}.b"), r, h, 1, 1, 0, false),
            })
            .collect();
        let up = (0..stages)
            .map(|i| conv(&mut p, &format!("dec.up{i}"), h, if i + 1 == stages { c } else { h }, 4, 2, 1, true))
            .collect();
        let v = cfg.codebook_size as f64;
        let codebook = p.add(
            "codebook",
            Tensor::uniform(&[cfg.codebook_size, d], -1.0 / v, 1.0 / v, &mut rng),
        );
        Ok(Codec {
            cfg,
            params: p,
            down,
            enc_pre,
            enc_res,
            enc_out,
            dec_in,
            dec_res,
            up,
            codebook,
        })
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            vectors: self.params.get(self.codebook).clone(),
        }
    }

    pub fn set_codebook(&mut self, vectors: Tensor) -> Result<()> {
        if vectors.shape() != self.params.get(self.codebook).shape() {
            return Err(Error::shape("codebook shape mismatch"));
        }
        *self.params.get_mut(self.codebook) = vectors;
        Ok(())
    }

    fn apply(&self, tape: &mut Tape, bd: &Bound, c: &Conv, x: Var) -> Result<Var> {
        if c.transposed {
            tape.conv_transpose2d(x, bd[c.w], Some(bd[c.b]), c.stride, c.pad)
        } else {
            tape.conv2d(x, bd[c.w], Some(bd[c.b]), c.stride, c.pad)
        }
    }

    fn residual(&self, tape: &mut Tape, bd: &Bound, blocks: &[ResBlock], mut x: Var) -> Result<Var> {
        for blk in blocks {
            let y = tape.relu(x);
            let y = self.apply(tape, bd, &blk.a, y)?;
            let y = tape.relu(y);
            let y = self.apply(tape, bd, &blk.b, y)?;
            x = tape.add(x, y)?;
        }
        Ok(tape.relu(x))
    }

    /// `[B×C×H×W]` → `[B·h·w × d]` (cells in batch-major raster order).
    pub fn encode_graph(&self, tape: &mut Tape, bd: &Bound, x: Var) -> Result<Var> {
        let (b, c, hh, ww) = tape.value(x).dims4()?;
        let n = self.cfg.input_size;
        if c != self.cfg.channels || hh != n || ww != n {
            return Err(Error::shape(format!(
                "codec expects [B×{}×{n}×{n}], got {:?}",
                self.cfg.channels,
                tape.shape(x)
            )));
        }
        let mut y = x;
        for cv in &self.down {
            y = self.apply(tape, bd, cv, y)?;
            y = tape.relu(y);
        }
        y = self.apply(tape, bd, &self.enc_pre, y)?;
        y = self.residual(tape, bd, &self.enc_res, y)?;
        y = self.apply(tape, bd, &self.enc_out, y)?;
        let y = tape.permute(y, &[0, 2, 3, 1])?;
        let l = self.cfg.latent_size;
        tape.reshape(y, &[b * l * l, self.cfg.codebook_dim])
    }

    /// `[B·h·w × d]` → `[B×C×H×W]`.
    pub fn decode_graph(&self, tape: &mut Tape, bd: &Bound, z: Var) -> Result<Var> {
        let l = self.cfg.latent_size;
        let (n, d) = tape.value(z).dims2()?;
        if d != self.cfg.codebook_dim || n % (l * l) != 0 {
            return Err(Error::shape("decoder input does not match latent grid"));
        }
        let y = tape.reshape(z, &[n / (l * l), l, l, d])?;
        let mut y = tape.permute(y, &[0, 3, 1, 2])?;
        y = self.apply(tape, bd, &self.dec_in, y)?;
        y = self.residual(tape, bd, &self.dec_res, y)?;
        let last = self.up.len() - 1;
        for (i, cv) in self.up.iter().enumerate() {
            y = self.apply(tape, bd, cv, y)?;
            if i != last {
                y = tape.relu(y);
            }
        }
        Ok(y)
    }

    fn batch(&self, frames: &[Tensor]) -> Result<Tensor> {
        if frames.is_empty() {
            return Err(Error::Validation("empty frame batch".into()));
        }
        let n = self.cfg.input_size;
        let want = [self.cfg.channels, n, n];
        let mut data = Vec::with_capacity(frames.len() * frames[0].len());
        for f in frames {
            if f.shape() != want {
                return Err(Error::shape(format!("frame shape {:?}, codec expects {want:?}", f.shape())));
            }
            data.extend_from_slice(f.data());
        }
        Tensor::new(vec![frames.len(), want[0], n, n], data)
    }

    /// Continuous features `[h×w×d]` of one `C×H×W` frame.
    pub fn encode(&self, frame: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bd = self.params.bind(&mut tape, false);
        let x = tape.constant(self.batch(std::slice::from_ref(frame))?);
        let z = self.encode_graph(&mut tape, &bd, x)?;
        let l = self.cfg.latent_size;
        tape.value(z).clone().reshape(&[l, l, self.cfg.codebook_dim])
    }

    /// Latent index grids (raster order) for a batch of frames.
    pub fn tokenize(&self, frames: &[Tensor]) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::new();
        let bd = self.params.bind(&mut tape, false);
        let x = tape.constant(self.batch(frames)?);
        let z = self.encode_graph(&mut tape, &bd, x)?;
        let (idx, _) = quantize(tape.value(z), &self.codebook())?;
        let cells = self.cfg.latent_size * self.cfg.latent_size;
        Ok(idx.chunks(cells).map(<[usize]>::to_vec).collect())
    }

    /// Decodes index grids into `C×H×W` frames (unclamped).
    pub fn decode_many(&self, grids: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let cells = self.cfg.latent_size * self.cfg.latent_size;
        let cb = self.codebook();
        let mut zq = Vec::with_capacity(grids.len() * cells * cb.dim());
        for g in grids {
            if g.len() != cells {
                return Err(Error::shape(format!("latent grid of {} cells, expected {cells}", g.len())));
            }
            for &i in g {
                if i >= cb.size() {
                    return Err(Error::Index(format!("latent index {i} >= codebook size {}", cb.size())));
                }
                zq.extend_from_slice(cb.vectors.row(i));
            }
        }
        let mut tape = Tape::new();
        let bd = self.params.bind(&mut tape, false);
        let z = tape.constant(Tensor::new(vec![grids.len() * cells, cb.dim()], zq)?);
        let y = self.decode_graph(&mut tape, &bd, z)?;
        let per = tape.value(y).len() / grids.len();
        let n = self.cfg.input_size;
        tape.value(y)
            .data()
            .chunks(per)
            .map(|c| Tensor::new(vec![self.cfg.channels, n, n], c.to_vec()))
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Tensor> {
        Ok(self.decode_many(&[indices.to_vec()])?.remove(0))
    }

    /// Encode, quantize and decode.
    pub fn reconstruct(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        let grids = self.tokenize(frames)?;
        self.decode_many(&grids)
    }

    /// Builds the training graph for a batch `[B×C×H×W]`.
    pub fn train_graph(&self, tape: &mut Tape, bd: &Bound, x: Var) -> Result<CodecGraph> {
        let z_e = self.encode_graph(tape, bd, x)?;
        let cb = Codebook {
            vectors: tape.value(bd[self.codebook]).clone(),
        };
        let (idx, zq_val) = quantize(tape.value(z_e), &cb)?;
        let e = tape.gather_rows(bd[self.codebook], &idx)?;
        let d = self.cfg.codebook_dim as f64;
        // Squared L2 per cell, averaged over cells.
        let z_e_sg = tape.detach(z_e);
        let cbl = tape.mse(e, z_e_sg)?;
        let codebook_loss = tape.scale(cbl, d);
        let e_sg = tape.detach(e);
        let cml = tape.mse(z_e, e_sg)?;
        let commit_loss = tape.scale(cml, d);
        let z_q = tape.straight_through(z_e, zq_val)?;
        let recon = self.decode_graph(tape, bd, z_q)?;
        let recon_loss = tape.mse(recon, x)?;
        let t = tape.add(recon_loss, codebook_loss)?;
        let total = if self.cfg.beta == 0.0 {
            t
        } else {
            let c = tape.scale(commit_loss, self.cfg.beta);
            tape.add(t, c)?
        };
        Ok(CodecGraph {
            z_e,
            z_q,
            recon,
            recon_loss,
            codebook_loss,
            commit_loss,
            total,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(
            &serde_json::json!({"kind": "codec", "codec": self.cfg}),
            self.named_tensors("codec"),
        )
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    }

    /// Restores a codec from any checkpoint holding a `codec` section and
    /// `codec.*` tensors.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: CodecConfig = ck.section("codec")?;
        let mut c = Codec::new(cfg, 0)?;
        c.params.load_from(&ck.with_prefix("codec"))?;
        Ok(c)
    }
}

/// Codec plus optimizer state.
#[derive(Clone, Debug)]
pub struct CodecTrainer {
    pub codec: Codec,
    pub adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
    started: Instant,
    initialized: bool,
}

impl CodecTrainer {
    pub fn new(codec: Codec, seed: u64) -> Self {
        let adam = Adam::new(&codec.params, codec.cfg.lr, 0);
        CodecTrainer {
            initialized: !codec.cfg.data_init,
            codec,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            step: 0,
            started: Instant::now(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Batch of `batch` distinct frames (all of them if fewer), drawn
    /// with the trainer's generator.
    pub fn sample_batch(&mut self, frames: &[Tensor], batch: usize) -> Vec<Tensor> {
        let n = frames.len();
        sample_indices(&mut self.rng, n, batch.min(n))
            .into_iter()
            .map(|i| frames[i].clone())
            .collect()
    }

    /// Runs `steps` steps on random batches, writing a CSV row every
    /// `log_every` steps. The header is written only before the first step,
    /// so repeated calls extend one log.
    pub fn run(
        &mut self,
        frames: &[Tensor],
        steps: usize,
        batch: usize,
        mut log: Option<&mut dyn Write>,
        log_every: usize,
    ) -> Result<CodecLosses> {
        if batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if let Some(w) = log.as_mut().filter(|_| self.step == 0) {
            writeln!(w, "step,recon,codebook,commit,wallclock")?;
        }
        let mut last = CodecLosses::default();
        for _ in 0..steps {
            let b = self.sample_batch(frames, batch);
            last = self.train_step(&b)?;
            if let Some(w) = log.as_mut() {
                if log_every > 0 && (self.step % log_every == 0 || self.step == 1) {
                    writeln!(
                        w,
                        "{},{:.6},{:.6},{:.6},{:.3}",
                        self.step,
                        last.recon,
                        last.codebook,
                        last.commit,
                        self.started.elapsed().as_secs_f64()
                    )?;
                }
            }
        }
        Ok(last)
    }

    fn init_codebook(&mut self, frames: &[Tensor]) -> Result<()> {
        let mut tape = Tape::new();
        let bd = self.codec.params.bind(&mut tape, false);
        let x = tape.constant(self.codec.batch(frames)?);
        let z = self.codec.encode_graph(&mut tape, &bd, x)?;
        let z = tape.value(z);
        let (n, d) = z.dims2()?;
        let v = self.codec.cfg.codebook_size;
        let mut rows = Vec::with_capacity(v * d);
        if n >= v {
            for i in sample_indices(&mut self.rng, n, v) {
                rows.extend_from_slice(z.row(i));
            }
        } else {
            for i in 0..v {
                let src = z.row(i % n);
                rows.extend(src.iter().map(|&a| a + 0.01 * (self.rng.random::<f64>() - 0.5)));
            }
        }
        self.codec.set_codebook(Tensor::new(vec![v, d], rows)?)
    }

    /// One Adam step on a batch of `C×H×W` frames.
    pub fn train_step(&mut self, frames: &[Tensor]) -> Result<CodecLosses> {
        if frames.is_empty() {
            return Err(Error::Validation("empty codec batch".into()));
        }
        if !self.initialized {
            self.init_codebook(frames)?;
            self.initialized = true;
        }
        let mut tape = Tape::new();
        let bd = self.codec.params.bind(&mut tape, true);
        let x = tape.constant(self.codec.batch(frames)?);
        let g = self.codec.train_graph(&mut tape, &bd, x)?;
        let losses = CodecLosses {
            recon: tape.value(g.recon_loss).data()[0],
            codebook: tape.value(g.codebook_loss).data()[0],
            commit: tape.value(g.commit_loss).data()[0],
            total: tape.value(g.total).data()[0],
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("codec loss {losses:?}"),
                last_good: None,
            });
        }
        let grads = tape.backward(g.total)?;
        let grads = self.codec.params.collect_grads(&grads, &bd);
        self.adam.step(&mut self.codec.params, &grads);
        self.step += 1;
        Ok(losses)
    }
}
