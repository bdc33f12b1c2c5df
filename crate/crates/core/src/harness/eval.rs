//! Best-of-S evaluation: several seeded rollouts per test video, keeping
//! the best match per metric.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean_over_frames, psnr, ssim};
use crate::codec::Codec;
use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::model::Prior;
use crate::sample::{generate, SamplingConfig};
use crate::train::{prepare_video, video_nll};

pub const EVAL_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Rollouts per video.
    pub samples: usize,
    pub cond_frames: usize,
    pub cond_boxes: usize,
    /// Generated frames; `None` runs to the end of each video.
    pub horizon: Option<usize>,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 10,
            cond_frames: 1,
            cond_boxes: 1,
            horizon: None,
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub psnr: f64,
    pub ssim: f64,
    /// Teacher-forced NLL of the ground truth (nats per token); the same
    /// for every rollout.
    pub nll: f64,
    pub best_psnr_sample: usize,
    pub best_ssim_sample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub videos: usize,
    pub samples: usize,
    /// Means over videos of the best-of-S values.
    pub psnr: f64,
    pub ssim: f64,
    pub nll: f64,
    pub per_video: Vec<VideoEval>,
}

/// Seed of rollout `i` of video `v`: independent of `S`, so a larger `S`
/// evaluates a superset of rollouts.
pub fn rollout_seed(seed: u64, v: usize, i: usize) -> u64 {
    let mut h = seed ^ 0x6a09_e667_f3bc_c908;
    for x in [v as u64, i as u64] {
        h = (h ^ x).wrapping_mul(0x100_0000_01b3).rotate_left(29);
    }
    h
}

pub fn evaluate_best_of_s(prior: &Prior, codec: &Codec, videos: &[VideoSample], cfg: &EvalConfig) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    if cfg.samples == 0 {
        return Err(Error::config("need at least one sample per video"));
    }
    let jobs: Vec<(usize, usize)> = (0..videos.len())
        .flat_map(|v| (0..cfg.samples).map(move |i| (v, i)))
        .collect();
    let scores: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(v, i)| {
            let video = &videos[v];
            let horizon = cfg.horizon.unwrap_or(video.len().saturating_sub(cfg.cond_frames));
            let end = cfg.cond_frames + horizon;
            if horizon == 0 || end > video.len() {
                return Err(Error::config(format!(
                    "horizon {horizon} after {} conditioning frames does not fit a {}-frame video",
                    cfg.cond_frames,
                    video.len()
                )));
            }
            let g = generate(
                prior,
                codec,
                video,
                cfg.cond_frames,
                cfg.cond_boxes,
                horizon,
                &[],
                cfg.sampling,
                rollout_seed(cfg.seed, v, i),
            )?;
            let pred = &g.frames[cfg.cond_frames..];
            let truth = &video.frames[cfg.cond_frames..end];
            Ok((mean_over_frames(pred, truth, psnr)?, mean_over_frames(pred, truth, ssim)?))
        })
        .collect::<Result<_>>()?;
    let nlls: Vec<f64> = videos
        .par_iter()
        .map(|v| Ok(video_nll(prior, &prepare_video(codec, v, prior.cfg.k)?)?.per_token()))
        .collect::<Result<_>>()?;

    let mut per_video = Vec::with_capacity(videos.len());
    for (v, chunk) in scores.chunks(cfg.samples).enumerate() {
        let best = |f: fn(&(f64, f64)) -> f64| {
            let mut b = 0;
            for (i, s) in chunk.iter().enumerate() {
                if f(s) > f(&chunk[b]) {
                    b = i;
                }
            }
            b
        };
        let bp = best(|s| s.0);
        let bs = best(|s| s.1);
        per_video.push(VideoEval {
            psnr: chunk[bp].0,
            ssim: chunk[bs].1,
            nll: nlls[v],
            best_psnr_sample: bp,
            best_ssim_sample: bs,
        });
    }
    let n = per_video.len() as f64;
    Ok(EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        videos: videos.len(),
        samples: cfg.samples,
        psnr: per_video.iter().map(|e| e.psnr).sum::<f64>() / n,
        ssim: per_video.iter().map(|e| e.ssim).sum::<f64>() / n,
        nll: per_video.iter().map(|e| e.nll).sum::<f64>() / n,
        per_video,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::data::{gen_bounce_video, GenOptions};
    use crate::model::ModelConfig;

    fn setup() -> (Prior, Codec, Vec<VideoSample>) {
        let codec = Codec::new(
            CodecConfig {
                input_size: 16,
                latent_size: 2,
                hidden: 8,
                residual_hidden: 4,
                residual_layers: 1,
                codebook_size: 8,
                codebook_dim: 4,
                ..CodecConfig::default()
            },
            0,
        )
        .unwrap();
        let prior = Prior::new(
            ModelConfig {
                w_o: 3,
                k: 2,
                patch_res: 4,
                latent_h: 2,
                latent_w: 2,
                vocab_z: 8,
                layers: 1,
                heads: 2,
                dim: 16,
                mlp_dim: 32,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let opts = GenOptions {
            height: 16,
            width: 16,
            min_size: 3.0,
            max_size: 5.0,
            ..GenOptions::default()
        };
        let vids = (0..2).map(|s| gen_bounce_video(s, 4, 2, &opts).unwrap()).collect();
        (prior, codec, vids)
    }

    #[test]
    fn single_sample_is_plain_rollout() {
        let (prior, codec, vids) = setup();
        let cfg = EvalConfig {
            samples: 1,
            ..EvalConfig::default()
        };
        let r = evaluate_best_of_s(&prior, &codec, &vids, &cfg).unwrap();
        let g = generate(&prior, &codec, &vids[1], 1, 1, 3, &[], cfg.sampling, rollout_seed(0, 1, 0)).unwrap();
        let want = mean_over_frames(&g.frames[1..], &vids[1].frames[1..], psnr).unwrap();
        assert_eq!(r.per_video[1].psnr, want);
        assert_eq!(r.samples, 1);
        assert!(r.per_video.iter().all(|e| (-1.0..=1.0).contains(&e.ssim)));
    }

    #[test]
    fn best_of_s_grows_with_s() {
        let (prior, codec, vids) = setup();
        let mut last = f64::NEG_INFINITY;
        for s in [1, 2, 4] {
            let cfg = EvalConfig {
                samples: s,
                ..EvalConfig::default()
            };
            let r = evaluate_best_of_s(&prior, &codec, &vids, &cfg).unwrap();
            assert!(r.psnr >= last);
            last = r.psnr;
        }
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let (prior, codec, _) = setup();
        assert!(matches!(
            evaluate_best_of_s(&prior, &codec, &[], &EvalConfig::default()),
            Err(Error::Validation(_))
        ));
    }
}
