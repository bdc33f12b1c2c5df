use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::codec::CodecConfig;
use crate::data::{gen_bounce_video, GenOptions};
use crate::numerics::Tensor;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        w_o: 4,
        w_b: 1,
        k: 2,
        patch_res: 4,
        latent_h: 2,
        latent_w: 2,
        vocab_z: 8,
        layers: 1,
        heads: 2,
        dim: 16,
        mlp_dim: 32,
        dropout: 0.0,
        attn_dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn codec() -> Codec {
    Codec::new(
        CodecConfig {
            input_size: 8,
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
    .unwrap()
}

fn videos(n: usize, t: usize) -> Vec<PreparedVideo> {
    let opts = GenOptions {
        height: 8,
        width: 8,
        min_size: 3.0,
        max_size: 4.0,
        ..GenOptions::default()
    };
    let c = codec();
    (0..n)
        .map(|i| prepare_video(&c, &gen_bounce_video(i as u64, t, 1 + i % 2, &opts).unwrap(), 2).unwrap())
        .collect()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        clip_len: 6,
        warmup: 0,
        batch: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn tau_range_follows_clip_and_window() {
    let cfg = ModelConfig {
        w_o: 8,
        w_b: 1,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = [false; 8];
    for _ in 0..2000 {
        let s = sample_window(8, &cfg, &mut rng).unwrap();
        assert!(s.tau <= 7 && s.start >= s.tau && s.start < 8);
        seen[s.tau] = true;
    }
    assert!(seen.iter().all(|&b| b));
    // Clip shorter than the window caps history by T − W_b.
    for _ in 0..200 {
        assert!(sample_window(3, &cfg, &mut rng).unwrap().tau <= 2);
    }
    assert!(matches!(
        sample_window(1, &ModelConfig { w_b: 2, ..cfg }, &mut rng),
        Err(Error::Validation(_))
    ));
}

#[test]
fn tau_histogram_is_uniform() {
    let cfg = ModelConfig {
        w_o: 8,
        w_b: 1,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 100_000;
    let mut counts = [0usize; 8];
    for _ in 0..n {
        counts[sample_window(8, &cfg, &mut rng).unwrap().tau] += 1;
    }
    let e = n as f64 / 8.0;
    let sd = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
    for &c in &counts {
        assert!((c as f64 - e).abs() < 3.0 * sd, "{counts:?}");
    }
    let chi: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(chi);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn zero_history_window_aligns_streams() {
    let cfg = model_cfg();
    let v = &videos(1, 6)[0];
    let w = build_window(&cfg, v, WindowSpec { tau: 0, start: 3, first_scored: 0 }, false).unwrap();
    assert_eq!(w.input.boxes, vec![v.boxes[3].clone()]);
    assert_eq!(w.input.z, vec![v.z[3].clone()]);
    assert!(w.targets.box_scored.iter().all(|&s| s));
    let w = build_window(&cfg, v, WindowSpec { tau: 3, start: 3, first_scored: 0 }, false).unwrap();
    assert_eq!(w.input.boxes.len(), 4);
    assert_eq!(w.targets.box_scored.iter().filter(|&&s| s).count(), cfg.k);
    assert!(build_window(&cfg, v, WindowSpec { tau: 4, start: 3, first_scored: 0 }, false).is_err());
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut tape = Tape::new();
    let t = WindowTargets {
        pres: vec![0, 1],
        coords: [vec![64, 3], vec![64, 4], vec![64, 5], vec![64, 6]],
        box_scored: vec![true, true],
        z: vec![5, 100, 127],
        z_scored: vec![true; 3],
    };
    let pres = tape.constant(Tensor::zeros(&[2, 2]));
    let coords = [(); 4].map(|_| tape.constant(Tensor::zeros(&[2, 65])));
    let z = tape.constant(Tensor::zeros(&[3, 128]));
    let s = window_loss_sums(&mut tape, pres, &coords, z, &t).unwrap();
    assert_eq!((s.n_pres, s.n_coord, s.n_z), (2, 4, 3));
    let (_, l) = prior_loss(&mut tape, &[s]).unwrap();
    assert!((l.z - 128f64.ln()).abs() < 1e-12);
    assert!((l.pres - 2f64.ln()).abs() < 1e-12);
    assert!((l.coord - 65f64.ln()).abs() < 1e-12);
}

#[test]
fn absent_objects_contribute_no_coordinate_loss() {
    let mut tape = Tape::new();
    let t = WindowTargets {
        pres: vec![0, 0],
        coords: [vec![64; 2], vec![64; 2], vec![64; 2], vec![64; 2]],
        box_scored: vec![true, true],
        z: vec![1],
        z_scored: vec![true],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pres = tape.constant(Tensor::randn(&[2, 2], 1.0, &mut rng));
    let coords = [(); 4].map(|_| tape.constant(Tensor::randn(&[2, 65], 1.0, &mut rng)));
    let z = tape.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
    let s = window_loss_sums(&mut tape, pres, &coords, z, &t).unwrap();
    let (_, l) = prior_loss(&mut tape, &[s]).unwrap();
    assert_eq!(l.coord, 0.0);
    assert_eq!(s.n_coord, 0);
}

#[test]
fn nothing_scored_is_degenerate() {
    let mut tape = Tape::new();
    let t = WindowTargets {
        pres: vec![1],
        coords: [vec![1], vec![1], vec![1], vec![1]],
        box_scored: vec![false],
        z: vec![0],
        z_scored: vec![false],
    };
    let pres = tape.constant(Tensor::zeros(&[1, 2]));
    let coords = [(); 4].map(|_| tape.constant(Tensor::zeros(&[1, 65])));
    let z = tape.constant(Tensor::zeros(&[1, 4]));
    let s = window_loss_sums(&mut tape, pres, &coords, z, &t).unwrap();
    assert!(matches!(prior_loss(&mut tape, &[s]), Err(Error::DegenerateLoss(_))));
}

fn neg_log_softmax(row: &[f64], t: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    -(row[t] - m - z.ln())
}

#[test]
fn batch_loss_matches_enumeration_oracle() {
    let cfg = model_cfg();
    let prior = Prior::new(cfg.clone(), 3).unwrap();
    let vids = videos(2, 6);
    let specs = [
        (0, WindowSpec { tau: 2, start: 3, first_scored: 0 }),
        (1, WindowSpec { tau: 0, start: 1, first_scored: 0 }),
    ];
    let mut tape = Tape::new();
    let bd = prior.params.bind(&mut tape, false);
    let mut parts = Vec::new();
    let (mut pres_nll, mut coord_nll, mut z_nll) = (Vec::new(), Vec::new(), Vec::new());
    for (vi, spec) in specs {
        let w = build_window(&cfg, &vids[vi], spec, false).unwrap();
        let masks = build_masks(&cfg, &w.input.layout, None).unwrap();
        let out = prior.forward(&mut tape, &bd, &w.input, &masks).unwrap();
        parts.push(window_loss_sums(&mut tape, out.pres, &out.coords, out.z, &w.targets).unwrap());
        // Oracle: walk every (u, k) and z position directly.
        let pres = tape.value(out.pres).clone();
        for u in spec.tau..w.input.layout.n_o() {
            for k in 0..cfg.k {
                let r = u * cfg.k + k;
                let toks = w.input.boxes[u][k].tokens();
                pres_nll.push(neg_log_softmax(pres.row(r), toks[0]));
                if toks[0] == 1 {
                    for m in 0..4 {
                        coord_nll.push(neg_log_softmax(tape.value(out.coords[m]).row(r), toks[m + 1]));
                    }
                }
            }
        }
        for (n, &t) in w.input.z.iter().flatten().enumerate() {
            z_nll.push(neg_log_softmax(tape.value(out.z).row(n), t));
        }
    }
    let (_, l) = prior_loss(&mut tape, &parts).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!coord_nll.is_empty());
    assert!((l.pres - mean(&pres_nll)).abs() < 1e-10);
    assert!((l.coord - mean(&coord_nll)).abs() < 1e-10);
    assert!((l.z - mean(&z_nll)).abs() < 1e-10);
    assert!((l.total - mean(&pres_nll) - mean(&coord_nll) - mean(&z_nll)).abs() < 1e-10);
}

#[test]
fn history_logits_get_no_gradient() {
    let cfg = model_cfg();
    let prior = Prior::new(cfg.clone(), 4).unwrap();
    let v = &videos(1, 6)[0];
    for on_history in [false, true] {
        let w = build_window(&cfg, v, WindowSpec { tau: 2, start: 4, first_scored: 0 }, on_history).unwrap();
        let masks = build_masks(&cfg, &w.input.layout, None).unwrap();
        let mut tape = Tape::new();
        let bd = prior.params.bind(&mut tape, true);
        let out = prior.forward(&mut tape, &bd, &w.input, &masks).unwrap();
        let s = window_loss_sums(&mut tape, out.pres, &out.coords, out.z, &w.targets).unwrap();
        let (total, _) = prior_loss(&mut tape, &[s]).unwrap();
        let g = tape.backward(total).unwrap().tensor(out.pres);
        let hist_nonzero = (0..2 * cfg.k).any(|r| g.row(r).iter().any(|&x| x != 0.0));
        assert_eq!(hist_nonzero, on_history);
        assert!(g.row(2 * cfg.k).iter().any(|&x| x != 0.0));
    }
}

#[test]
fn batch_order_does_not_change_the_update() {
    let cfg = model_cfg();
    let vids = videos(3, 6);
    let tc = train_cfg();
    let batch: Vec<TrainWindow> = (0..3)
        .map(|i| build_window(&cfg, &vids[i], WindowSpec { tau: i, start: 3, first_scored: 0 }, false).unwrap())
        .collect();
    let mut rev = batch.clone();
    rev.reverse();
    let run = |b: &[TrainWindow]| {
        let mut p = Prior::new(cfg.clone(), 5).unwrap();
        let mut adam = Adam::new(&p.params, 1e-3, 0);
        let l = train_prior_step(&mut p, &mut adam, &tc, b, 9).unwrap();
        (l, p.named_tensors("p"))
    };
    let (la, pa) = run(&batch);
    let (lb, pb) = run(&rev);
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let cfg = model_cfg();
    let vids = videos(2, 6);
    let batch: Vec<TrainWindow> = (0..2)
        .map(|i| build_window(&cfg, &vids[i], WindowSpec { tau: 1, start: 2, first_scored: 0 }, false).unwrap())
        .collect();
    let mut p = Prior::new(cfg, 6).unwrap();
    let mut adam = Adam::new(&p.params, 0.0, 0);
    let tc = train_cfg();
    let first = train_prior_step(&mut p, &mut adam, &tc, &batch, 0).unwrap();
    for s in 1..4 {
        assert_eq!(train_prior_step(&mut p, &mut adam, &tc, &batch, s).unwrap().total, first.total);
    }
}

#[test]
fn same_seed_same_curve_and_codec_untouched() {
    let c = codec();
    let before = c.to_checkpoint().unwrap().to_bytes().unwrap();
    let vids = videos(3, 6);
    let curve = || {
        let mut t = PriorTrainer::new(Prior::new(model_cfg(), 1).unwrap(), train_cfg()).unwrap();
        (0..5).map(|_| t.step(&vids).unwrap().total).collect::<Vec<_>>()
    };
    assert_eq!(curve(), curve());
    assert_eq!(c.to_checkpoint().unwrap().to_bytes().unwrap(), before);
}

#[test]
fn short_training_reduces_nll() {
    let vids = videos(2, 6);
    let mut t = PriorTrainer::new(
        Prior::new(model_cfg(), 2).unwrap(),
        TrainConfig {
            lr: 3e-3,
            ..train_cfg()
        },
    )
    .unwrap();
    let before = dataset_nll(&t.prior, &vids).unwrap().per_token();
    let mut log = Vec::new();
    t.run(&vids, 150, Some(&mut log), 50).unwrap();
    let after = dataset_nll(&t.prior, &vids).unwrap().per_token();
    assert!(after < 0.7 * before, "{before} -> {after}");
    let log = String::from_utf8(log).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss_z,loss_pres,loss_coord,wallclock"));
    assert_eq!(log.lines().count(), 1 + 1 + 3);
}

#[test]
fn covering_windows_score_each_step_once() {
    for (w_b, w_o, len) in [(1, 4, 6), (2, 4, 7), (3, 3, 8), (2, 2, 2)] {
        let cfg = ModelConfig { w_b, w_o, ..model_cfg() };
        let mut hits = vec![0; len];
        for s in covering_windows(len, &cfg) {
            assert!(s.tau <= s.start);
            for j in s.first_scored..w_b {
                hits[s.start + j] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 1), "{hits:?}");
    }
}

#[test]
fn nll_counts_all_tokens() {
    let cfg = model_cfg();
    let vids = videos(1, 6);
    let prior = Prior::new(cfg.clone(), 0).unwrap();
    let r = video_nll(&prior, &vids[0]).unwrap();
    let present: usize = vids[0].boxes.iter().flatten().filter(|b| b.is_present()).count();
    assert_eq!(r.z_tokens, 6 * cfg.latent_tokens());
    assert_eq!(r.box_tokens, 6 * cfg.k + 4 * present);
    assert!((r.nats - r.box_nats - r.z_nats).abs() < 1e-9);
}

#[test]
fn config_validation() {
    let m = model_cfg();
    assert!(train_cfg().validate(&m).is_ok());
    assert!(TrainConfig { clip_len: 3, ..train_cfg() }.validate(&m).is_err());
    assert!(TrainConfig { lr: 0.0, ..train_cfg() }.validate(&m).is_err());
    assert!(prepare_video(&codec(), &gen_bounce_video(0, 2, 3, &GenOptions { height: 8, width: 8, min_size: 2.0, max_size: 3.0, ..GenOptions::default() }).unwrap(), 2).is_err());
}
