use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::codec::CodecConfig;
use crate::data::{gen_bounce_video, GenOptions};
use crate::train::{build_window, PreparedVideo, WindowSpec};

fn setup(w_b: usize) -> (Prior, Codec, VideoSample) {
    let codec = Codec::new(
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
    .unwrap();
    let prior = Prior::new(
        ModelConfig {
            w_o: 3,
            w_b,
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
        },
        1,
    )
    .unwrap();
    let opts = GenOptions {
        height: 8,
        width: 8,
        min_size: 3.0,
        max_size: 4.0,
        ..GenOptions::default()
    };
    (prior, codec, gen_bounce_video(3, 6, 2, &opts).unwrap())
}

#[test]
fn token_sampling_controls() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = [0.0, 2.0, 2.0, -1.0];
    assert_eq!(argmax(&logits), 1);
    assert_eq!(sample_token(&logits, &SamplingConfig::greedy(), &mut rng), 1);
    let top2 = SamplingConfig {
        temperature: 1.0,
        top_k: Some(2),
    };
    let mut counts = [0; 4];
    for _ in 0..4000 {
        counts[sample_token(&logits, &top2, &mut rng)] += 1;
    }
    assert_eq!(counts[0] + counts[3], 0);
    assert!((counts[1] as f64 / 4000.0 - 0.5).abs() < 0.05);
    // Plain sampling follows the softmax.
    let mut counts = [0; 4];
    let n = 20_000;
    for _ in 0..n {
        counts[sample_token(&logits, &SamplingConfig::default(), &mut rng)] += 1;
    }
    let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
    for i in 0..4 {
        assert!((counts[i] as f64 / n as f64 - logits[i].exp() / z).abs() < 0.015);
    }
}

#[test]
fn horizon_zero_returns_conditioning() {
    let (prior, codec, v) = setup(1);
    let g = generate(&prior, &codec, &v, 2, 2, 0, &[], SamplingConfig::default(), 0).unwrap();
    assert_eq!(g.frames, v.frames[..2].to_vec());
    assert_eq!(g.boxes.len(), 2);
    assert_eq!(g.boxes[1][0], quantize_box(&v.tracks[0].boxes[1]).unwrap());
    assert_eq!(g.overlays.len(), 2);
}

#[test]
fn same_seed_same_rollout() {
    let (prior, codec, v) = setup(1);
    let run = |seed| generate(&prior, &codec, &v, 1, 2, 4, &[], SamplingConfig::default(), seed).unwrap();
    let a = run(5);
    assert_eq!(a, run(5));
    assert_eq!(a.frames.len(), 5);
    assert_ne!(a.z, run(6).z);
}

/// Replays a greedy rollout through the teacher-forced path and checks that
/// every generated token is the argmax there as well.
fn check_replay(w_b: usize) {
    let (prior, codec, v) = setup(w_b);
    let mut st = GenState::new(&prior, &codec, SamplingConfig::greedy(), 0).unwrap();
    let boxes: Vec<Vec<QuantizedBox>> = (0..1)
        .map(|t| v.boxes_at(t).iter().map(|b| quantize_box(b).unwrap()).collect())
        .collect();
    st.condition(&v.frames[..1], &boxes).unwrap();
    for _ in 0..5 {
        st.step().unwrap();
    }
    let video = PreparedVideo {
        boxes: st.boxes.clone(),
        z: st.z.clone(),
        frames: st.frames.clone(),
    };
    let cfg = &prior.cfg;
    let mut checked = 0;
    // The same sliding windows generation used: each step last in its span.
    let specs = (1usize..6).map(|t| {
        let start = (t + 1).saturating_sub(cfg.w_b);
        WindowSpec {
            tau: start.min(cfg.max_history()),
            start,
            first_scored: t - start,
        }
    });
    for spec in specs {
        let w = build_window(cfg, &video, spec, false).unwrap();
        let masks = build_masks(cfg, &w.input.layout, None).unwrap();
        let mut tape = Tape::new();
        let bd = prior.params.bind(&mut tape, false);
        let out = prior.forward(&mut tape, &bd, &w.input, &masks).unwrap();
        {
            let j = spec.first_scored;
            let t = spec.start + j;
            let u = spec.tau + j;
            for k in 0..cfg.k {
                let toks = w.input.boxes[u][k].tokens();
                let r = u * cfg.k + k;
                assert_eq!(argmax(tape.value(out.pres).row(r)), toks[0], "pres t={t} k={k}");
                if toks[0] == 1 {
                    for m in 0..4 {
                        let row = tape.value(out.coords[m]).row(r);
                        assert_eq!(argmax(&row[..BINS]), toks[m + 1]);
                    }
                }
                checked += 1;
            }
            let hw = cfg.latent_tokens();
            for i in 0..hw {
                assert_eq!(argmax(tape.value(out.z).row(j * hw + i)), w.input.z[j][i], "z t={t} i={i}");
            }
        }
    }
    assert_eq!(checked, 5 * cfg.k);
}

#[test]
fn greedy_rollout_replays_under_teacher_forcing() {
    check_replay(1);
}

#[test]
fn greedy_rollout_replays_with_multi_frame_base_window() {
    check_replay(2);
}

#[test]
fn edits_force_boxes() {
    let (prior, codec, v) = setup(1);
    let greedy = SamplingConfig::greedy();
    let plain = generate(&prior, &codec, &v, 1, 1, 3, &[], greedy, 0).unwrap();
    // Re-imposing the model's own choice changes nothing.
    let own = Edit {
        at: 2,
        object: 1,
        bbox: dequantize_box(&plain.boxes[2][1]),
    };
    assert_eq!(generate(&prior, &codec, &v, 1, 1, 3, &[own], greedy, 0).unwrap(), plain);

    let gone = Edit {
        at: 1,
        object: 0,
        bbox: BBox::ABSENT,
    };
    let g = generate(&prior, &codec, &v, 1, 1, 3, &[gone], greedy, 0).unwrap();
    assert_eq!(g.boxes[1][0], QuantizedBox::Absent);

    let moved = Edit {
        at: 1,
        object: 0,
        bbox: BBox::present(0.2, 0.7, 0.3, 0.3),
    };
    let g = generate(&prior, &codec, &v, 1, 1, 3, &[moved], greedy, 0).unwrap();
    assert_eq!(g.boxes[1][0], quantize_box(&moved.bbox).unwrap());
}

#[test]
fn edits_of_materialized_steps_are_rejected() {
    let (prior, codec, v) = setup(1);
    let mut st = GenState::new(&prior, &codec, SamplingConfig::default(), 0).unwrap();
    let boxes = vec![vec![QuantizedBox::Absent; 2]; 2];
    st.condition(&v.frames[..2], &boxes).unwrap();
    let e = Edit {
        at: 1,
        object: 0,
        bbox: BBox::present(0.5, 0.5, 0.2, 0.2),
    };
    assert!(matches!(st.apply_edit(&e), Err(Error::Contract(_))));
    assert!(st.apply_edit(&Edit { at: 2, ..e }).is_ok());
    assert!(matches!(st.apply_edit(&Edit { at: 2, object: 2, ..e }), Err(Error::Index(_))));
    assert!(st.sample_latents_step().is_err());
}

#[test]
fn latent_logits_read_current_boxes() {
    let (prior, codec, v) = setup(1);
    let c = codec.clone();
    let video = crate::train::prepare_video(&c, &v, 2).unwrap();
    let cfg = &prior.cfg;
    let spec = WindowSpec {
        tau: 2,
        start: 3,
        first_scored: 0,
    };
    let logits = |video: &PreparedVideo| {
        let w = build_window(cfg, video, spec, false).unwrap();
        let masks = build_masks(cfg, &w.input.layout, None).unwrap();
        let mut tape = Tape::new();
        let bd = prior.params.bind(&mut tape, false);
        let out = prior.forward(&mut tape, &bd, &w.input, &masks).unwrap();
        tape.value(out.z).clone()
    };
    let a = logits(&video);
    let mut moved = video.clone();
    moved.boxes[3][0] = QuantizedBox::Present([60, 60, 5, 5]);
    assert!(logits(&moved).max_abs_diff(&a) > 0.0);
    // With a one-frame base window older latents are out of reach.
    let mut older_z = video.clone();
    older_z.z[2] = vec![7; 4];
    assert_eq!(logits(&older_z), a);
}

#[test]
fn bundle_rejects_mismatched_codec() {
    let (prior, codec, _) = setup(1);
    let tc = crate::train::TrainConfig {
        clip_len: 3,
        ..Default::default()
    };
    let ck = crate::train::prior_checkpoint(&prior, &codec, &tc).unwrap();
    let (p2, c2) = load_bundle(&ck).unwrap();
    assert_eq!(p2.named_tensors("p"), prior.named_tensors("p"));
    assert_eq!(c2.codebook(), codec.codebook());
    let other = Codec::new(CodecConfig { codebook_size: 16, ..codec.cfg.clone() }, 0).unwrap();
    let ck = crate::train::prior_checkpoint(&prior, &other, &tc).unwrap();
    assert!(matches!(load_bundle(&ck), Err(Error::Config(_))));
}

#[test]
fn overlay_outlines_boxes() {
    let f = Tensor::zeros(&[3, 8, 8]);
    let o = overlay(&f, &[QuantizedBox::Absent, quantize_box(&BBox::present(0.5, 0.5, 0.5, 0.5)).unwrap()]);
    assert!((o.at(&[1, 2, 2]) - 200.0 / 255.0).abs() < 1e-12);
    assert_eq!(o.at(&[1, 4, 4]), 0.0);
    assert!((o.at(&[1, 6, 6]) - 200.0 / 255.0).abs() < 1e-12);
}
