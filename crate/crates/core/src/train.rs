//! Windowed training objective and optimization loop for the prior.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{quantize_box, QuantizedBox};
use crate::checkpoint::Checkpoint;
use crate::codec::Codec;
use crate::data::{fnv1a, VideoSample};
use crate::error::{Error, Result};
use crate::model::{build_masks, collect_patches, ModelConfig, Prior, WindowInput, WindowLayout};
use crate::numerics::{clip_global_norm, Adam, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Clip length `T`.
    pub clip_len: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip_norm: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Also score box tokens of the history prefix.
    pub loss_on_history: bool,
    /// Cosine decay of the learning rate to `min_lr_frac·lr` over this
    /// many steps; `0` keeps it constant after warmup.
    pub decay_steps: usize,
    pub min_lr_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clip_len: 8,
            lr: 1e-3,
            warmup: 500,
            clip_norm: 1.0,
            batch: 4,
            steps: 1000,
            seed: 0,
            loss_on_history: false,
            decay_steps: 0,
            min_lr_frac: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.clip_len < model.w_b {
            return Err(Error::config(format!("clip length {} < w_b {}", self.clip_len, model.w_b)));
        }
        if model.w_o > self.clip_len {
            return Err(Error::config(format!("w_o {} exceeds clip length {}", model.w_o, self.clip_len)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::config("min_lr_frac must be in [0, 1]"));
        }
        Ok(())
    }

    /// Base learning rate at `step` (before warmup scaling).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.decay_steps == 0 {
            return self.lr;
        }
        let x = (step as f64 / self.decay_steps as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * x).cos());
        self.lr * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cos)
    }
}

/// A video reduced to what the prior sees: quantized boxes padded to `K`
/// slots, codec tokens, and the codec reconstructions that patches are
/// cropped from (the only frames that exist at generation time).
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedVideo {
    /// `[T][K]`.
    pub boxes: Vec<Vec<QuantizedBox>>,
    /// `[T][h·w]`.
    pub z: Vec<Vec<usize>>,
    pub frames: Vec<crate::numerics::Tensor>,
}

impl PreparedVideo {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

pub fn prepare_video(codec: &Codec, video: &VideoSample, k: usize) -> Result<PreparedVideo> {
    if video.num_objects() > k {
        return Err(Error::contract(format!(
            "video has {} tracks but the model has {k} slots",
            video.num_objects()
        )));
    }
    let z = codec.tokenize(&video.frames)?;
    let frames = codec.decode_many(&z)?;
    let mut boxes = Vec::with_capacity(video.len());
    for t in 0..video.len() {
        let mut row = Vec::with_capacity(k);
        for b in video.boxes_at(t) {
            row.push(quantize_box(&b)?);
        }
        row.resize(k, QuantizedBox::Absent);
        boxes.push(row);
    }
    Ok(PreparedVideo { boxes, z, frames })
}

/// Placement of one training window inside a video: the modeled span
/// starts at `start`, preceded by `tau` history steps. Tokens of modeled
/// steps before `first_scored` are context only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub tau: usize,
    pub start: usize,
    pub first_scored: usize,
}

/// Draws `τ ~ U{0..min(T−W_b, W_o−W_b)}` and then a modeled start with
/// room for `τ` history steps.
pub fn sample_window<R: Rng + ?Sized>(len: usize, cfg: &ModelConfig, rng: &mut R) -> Result<WindowSpec> {
    if len < cfg.w_b {
        return Err(Error::Validation(format!("video of {len} frames is shorter than w_b {}", cfg.w_b)));
    }
    let tau_max = (len - cfg.w_b).min(cfg.max_history());
    let tau = rng.random_range(0..=tau_max);
    let start = rng.random_range(tau..=len - cfg.w_b);
    Ok(WindowSpec {
        tau,
        start,
        first_scored: 0,
    })
}

/// Next-token targets of a window and which of them are scored.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTargets {
    /// `[n_o·K]` presence targets, `(u, k)` row-major.
    pub pres: Vec<usize>,
    /// Coordinate targets per kind (NULL for absent boxes).
    pub coords: [Vec<usize>; 4],
    /// Box rows contributing to the loss.
    pub box_scored: Vec<bool>,
    pub z: Vec<usize>,
    pub z_scored: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct TrainWindow {
    pub input: WindowInput,
    pub targets: WindowTargets,
    /// Content hash; batches are reduced in key order.
    pub key: u64,
}

pub fn build_window(
    cfg: &ModelConfig,
    video: &PreparedVideo,
    spec: WindowSpec,
    loss_on_history: bool,
) -> Result<TrainWindow> {
    let end = spec.start + cfg.w_b;
    if spec.tau > spec.start || end > video.len() || spec.first_scored >= cfg.w_b {
        return Err(Error::contract(format!("window {spec:?} does not fit a video of {}", video.len())));
    }
    let layout = WindowLayout::new(cfg, spec.tau, cfg.w_b)?;
    let a = spec.start - spec.tau;
    let boxes = video.boxes[a..end].to_vec();
    let frames = &video.frames[a..end];
    let patches = collect_patches(cfg, frames, &boxes)?;
    let z: Vec<Vec<usize>> = video.z[spec.start..end].to_vec();
    let input = WindowInput {
        layout,
        boxes,
        z,
        patches,
    };
    input.validate(cfg)?;

    let first_box = spec.tau + spec.first_scored;
    let mut pres = Vec::new();
    let mut coords: [Vec<usize>; 4] = Default::default();
    let mut box_scored = Vec::new();
    for u in 0..layout.n_o() {
        for k in 0..cfg.k {
            let t = input.box_tokens(u, k);
            pres.push(t[0]);
            for m in 0..4 {
                coords[m].push(t[m + 1]);
            }
            box_scored.push(u >= first_box || (loss_on_history && spec.first_scored == 0));
        }
    }
    let hw = cfg.latent_tokens();
    let z_flat: Vec<usize> = input.z.iter().flatten().copied().collect();
    let z_scored = (0..z_flat.len()).map(|n| n / hw >= spec.first_scored).collect();

    let mut bytes = Vec::new();
    for &v in [spec.tau, spec.start, spec.first_scored].iter().chain(&z_flat) {
        bytes.extend((v as u64).to_le_bytes());
    }
    for b in input.boxes.iter().flatten() {
        bytes.extend(b.tokens().map(|t| t as u8));
    }
    Ok(TrainWindow {
        key: fnv1a(&bytes),
        targets: WindowTargets {
            pres,
            coords,
            box_scored,
            z: z_flat,
            z_scored,
        },
        input,
    })
}

/// Summed cross-entropies of one window with their token counts.
#[derive(Clone, Copy, Debug)]
pub struct LossSums {
    pub pres: Var,
    pub coord: Var,
    pub z: Var,
    pub n_pres: usize,
    pub n_coord: usize,
    pub n_z: usize,
}

/// Sums of negative log-likelihoods of the scored targets.
pub fn window_loss_sums(
    tape: &mut Tape,
    pres: Var,
    coords: &[Var; 4],
    z: Var,
    t: &WindowTargets,
) -> Result<LossSums> {
    let skip_box: Vec<bool> = t.box_scored.iter().map(|&s| !s).collect();
    let skip_coord: Vec<bool> = t
        .box_scored
        .iter()
        .zip(&t.pres)
        .map(|(&s, &p)| !(s && p == 1))
        .collect();
    let skip_z: Vec<bool> = t.z_scored.iter().map(|&s| !s).collect();
    let pres_sum = tape.softmax_cross_entropy_sum(pres, &t.pres, &skip_box)?;
    let mut coord_sum = None;
    for (m, &c) in coords.iter().enumerate() {
        let s = tape.softmax_cross_entropy_sum(c, &t.coords[m], &skip_coord)?;
        coord_sum = Some(match coord_sum {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let z_sum = tape.softmax_cross_entropy_sum(z, &t.z, &skip_z)?;
    Ok(LossSums {
        pres: pres_sum,
        coord: coord_sum.expect("four coordinate kinds"),
        z: z_sum,
        n_pres: skip_box.iter().filter(|&&s| !s).count(),
        n_coord: 4 * skip_coord.iter().filter(|&&s| !s).count(),
        n_z: skip_z.iter().filter(|&&s| !s).count(),
    })
}

/// Per-stream mean losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TrainLosses {
    pub pres: f64,
    pub coord: f64,
    pub z: f64,
    /// `pres + coord + z`.
    pub total: f64,
    /// Mean over every scored token.
    pub per_token: f64,
    pub grad_norm: f64,
}

/// Combined loss: each stream's cross-entropy averaged over its scored
/// tokens, then summed. Streams with nothing scored contribute zero.
pub fn prior_loss(tape: &mut Tape, parts: &[LossSums]) -> Result<(Var, TrainLosses)> {
    let mut out = TrainLosses::default();
    let mut total: Option<Var> = None;
    let mut nats = 0.0;
    let mut tokens = 0;
    let streams: [(fn(&LossSums) -> (Var, usize), &mut f64); 3] = [
        (|p| (p.pres, p.n_pres), &mut out.pres),
        (|p| (p.coord, p.n_coord), &mut out.coord),
        (|p| (p.z, p.n_z), &mut out.z),
    ];
    for (get, slot) in streams {
        let n: usize = parts.iter().map(|p| get(p).1).sum();
        if n == 0 {
            continue;
        }
        let mut acc = get(&parts[0]).0;
        for p in &parts[1..] {
            acc = tape.add(acc, get(p).0)?;
        }
        nats += tape.value(acc).data()[0];
        tokens += n;
        let mean = tape.scale(acc, 1.0 / n as f64);
        *slot = tape.value(mean).data()[0];
        total = Some(match total {
            None => mean,
            Some(t) => tape.add(t, mean)?,
        });
    }
    let total = total.ok_or_else(|| Error::DegenerateLoss("no scored tokens in the batch".into()))?;
    out.total = tape.value(total).data()[0];
    out.per_token = nats / tokens as f64;
    Ok((total, out))
}

/// One optimizer step on a prepared batch. The batch is reduced in key
/// order, so permuting it gives a bit-identical update.
pub fn train_prior_step(
    prior: &mut Prior,
    adam: &mut Adam,
    cfg: &TrainConfig,
    batch: &[TrainWindow],
    dropout_seed: u64,
) -> Result<TrainLosses> {
    if batch.is_empty() {
        return Err(Error::DegenerateLoss("empty batch".into()));
    }
    let mut order: Vec<&TrainWindow> = batch.iter().collect();
    order.sort_by_key(|w| w.key);
    let mut tape = Tape::training(dropout_seed);
    let bd = prior.params.bind(&mut tape, true);
    let mut parts = Vec::with_capacity(order.len());
    for w in order {
        let masks = build_masks(&prior.cfg, &w.input.layout, None)?;
        let out = prior.forward(&mut tape, &bd, &w.input, &masks)?;
        parts.push(window_loss_sums(&mut tape, out.pres, &out.coords, out.z, &w.targets)?);
    }
    let (total, mut losses) = prior_loss(&mut tape, &parts)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite {
            step: adam.steps_taken(),
            detail: format!("prior loss {losses:?}"),
            last_good: None,
        });
    }
    let grads = tape.backward(total)?;
    let mut grads = prior.params.collect_grads(&grads, &bd);
    losses.grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    if !losses.grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step: adam.steps_taken(),
            detail: "gradient norm".into(),
            last_good: None,
        });
    }
    adam.step(&mut prior.params, &grads);
    Ok(losses)
}

/// Owns the prior and optimizer during training. The codec is only ever
/// borrowed immutably for token preparation.
pub struct PriorTrainer {
    pub prior: Prior,
    pub adam: Adam,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    /// Wallclock origin of the training log.
    started: Instant,
    /// Reported when a step produces a non-finite loss.
    pub last_good: Option<PathBuf>,
}

impl PriorTrainer {
    pub fn new(prior: Prior, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(&prior.cfg)?;
        let adam = Adam::new(&prior.params, cfg.lr, cfg.warmup);
        Ok(PriorTrainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e),
            prior,
            adam,
            cfg,
            step: 0,
            started: Instant::now(),
            last_good: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Samples a batch of windows (videos drawn with replacement).
    pub fn sample_batch(&mut self, videos: &[PreparedVideo]) -> Result<Vec<TrainWindow>> {
        let usable: Vec<&PreparedVideo> = videos.iter().filter(|v| v.len() >= self.prior.cfg.w_b).collect();
        if usable.is_empty() {
            return Err(Error::Validation("no video is long enough for a window".into()));
        }
        (0..self.cfg.batch)
            .map(|_| {
                let v = usable[self.rng.random_range(0..usable.len())];
                let spec = sample_window(v.len(), &self.prior.cfg, &mut self.rng)?;
                build_window(&self.prior.cfg, v, spec, self.cfg.loss_on_history)
            })
            .collect()
    }

    pub fn step(&mut self, videos: &[PreparedVideo]) -> Result<TrainLosses> {
        let batch = self.sample_batch(videos)?;
        self.adam.lr = self.cfg.lr_at(self.step);
        let seed = self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.step as u64;
        let r = train_prior_step(&mut self.prior, &mut self.adam, &self.cfg, &batch, seed);
        let r = r.map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite {
                step: self.step,
                detail,
                last_good: self.last_good.clone(),
            },
            e => e,
        })?;
        self.step += 1;
        Ok(r)
    }

    /// Runs `steps` steps, writing a CSV row every `log_every` steps. The
    /// header is written only before the first step, so repeated calls
    /// extend one log.
    pub fn run(
        &mut self,
        videos: &[PreparedVideo],
        steps: usize,
        mut log: Option<&mut dyn Write>,
        log_every: usize,
    ) -> Result<TrainLosses> {
        if let Some(w) = log.as_mut().filter(|_| self.step == 0) {
            writeln!(w, "step,loss_z,loss_pres,loss_coord,wallclock")?;
        }
        let mut last = TrainLosses::default();
        for _ in 0..steps {
            last = self.step(videos)?;
            if let Some(w) = log.as_mut() {
                if log_every > 0 && (self.step % log_every == 0 || self.step == 1) {
                    writeln!(
                        w,
                        "{},{:.6},{:.6},{:.6},{:.3}",
                        self.step,
                        last.z,
                        last.pres,
                        last.coord,
                        self.started.elapsed().as_secs_f64()
                    )?;
                }
            }
        }
        Ok(last)
    }

    /// Checkpoint holding the prior, its training config and the frozen
    /// codec it was trained against.
    pub fn to_checkpoint(&self, codec: &Codec) -> Result<Checkpoint> {
        prior_checkpoint(&self.prior, codec, &self.cfg)
    }
}

pub fn prior_checkpoint(prior: &Prior, codec: &Codec, train: &TrainConfig) -> Result<Checkpoint> {
    let cfg = serde_json::json!({
        "kind": "prior",
        "model": prior.cfg,
        "codec": codec.cfg,
        "train": train,
    });
    let mut tensors = prior.named_tensors("prior");
    tensors.extend(codec.named_tensors("codec"));
    Checkpoint::new(&cfg, tensors)
}

/// Negative log-likelihood of whole videos under teacher forcing, each
/// step conditioned on as much history as the window allows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct NllReport {
    pub nats: f64,
    pub tokens: usize,
    pub box_tokens: usize,
    pub z_tokens: usize,
    pub box_nats: f64,
    pub z_nats: f64,
}

impl NllReport {
    pub fn per_token(&self) -> f64 {
        self.nats / self.tokens.max(1) as f64
    }

    pub fn merge(&mut self, o: &NllReport) {
        self.nats += o.nats;
        self.tokens += o.tokens;
        self.box_tokens += o.box_tokens;
        self.z_tokens += o.z_tokens;
        self.box_nats += o.box_nats;
        self.z_nats += o.z_nats;
    }
}

/// Windows covering every timestep of a `len`-frame video exactly once.
pub fn covering_windows(len: usize, cfg: &ModelConfig) -> Vec<WindowSpec> {
    let mut out = Vec::new();
    if len < cfg.w_b {
        return out;
    }
    let mut s = 0;
    while s < len {
        let start = s.min(len - cfg.w_b);
        out.push(WindowSpec {
            tau: start.min(cfg.max_history()),
            start,
            first_scored: s - start,
        });
        s += cfg.w_b;
    }
    out
}

pub fn video_nll(prior: &Prior, video: &PreparedVideo) -> Result<NllReport> {
    let mut rep = NllReport::default();
    for spec in covering_windows(video.len(), &prior.cfg) {
        let w = build_window(&prior.cfg, video, spec, false)?;
        let masks = build_masks(&prior.cfg, &w.input.layout, None)?;
        let mut tape = Tape::new();
        let bd = prior.params.bind(&mut tape, false);
        let out = prior.forward(&mut tape, &bd, &w.input, &masks)?;
        let s = window_loss_sums(&mut tape, out.pres, &out.coords, out.z, &w.targets)?;
        let b = tape.value(s.pres).data()[0] + tape.value(s.coord).data()[0];
        let z = tape.value(s.z).data()[0];
        rep.merge(&NllReport {
            nats: b + z,
            tokens: s.n_pres + s.n_coord + s.n_z,
            box_tokens: s.n_pres + s.n_coord,
            z_tokens: s.n_z,
            box_nats: b,
            z_nats: z,
        });
    }
    Ok(rep)
}

pub fn dataset_nll(prior: &Prior, videos: &[PreparedVideo]) -> Result<NllReport> {
    let mut rep = NllReport::default();
    for v in videos {
        rep.merge(&video_nll(prior, v)?);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests;
