//! FLOP accounting, image metrics and best-of-S evaluation.

mod eval;
mod flops;
mod metrics;

pub use eval::{evaluate_best_of_s, rollout_seed, EvalConfig, EvalReport, VideoEval, EVAL_SCHEMA_VERSION};
pub use flops::{count_flops, FlopComponents, FlopMode, FlopReport, GenerationCost, FLOP_SCHEMA_VERSION};
pub use metrics::{mean_over_frames, psnr, ssim, SSIM_SIGMA, SSIM_WINDOW};
