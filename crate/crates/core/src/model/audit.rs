//! Dependency audit: backpropagates every output logit separately and
//! checks which input token embeddings receive a nonzero gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::masks::{build_masks, WindowLayout};
use super::prior::Prior;
use super::stream::{PatchSlot, WindowInput};
use crate::boxes::{QuantizedBox, BINS};
use crate::error::Result;
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Debug, Default)]
pub struct AuditReport {
    /// Output positions audited (box token positions plus latent positions).
    pub positions: usize,
    /// Single-logit backward passes run.
    pub backward_passes: usize,
    /// (output, input) pairs outside the conditioning set with a nonzero
    /// gradient.
    pub leaks: Vec<String>,
    /// Output positions with no nonzero gradient inside their set.
    pub dead: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.leaks.is_empty() && self.dead.is_empty()
    }
}

/// Audits a randomly initialized model over one full window with `tau`
/// history steps. Weights are redrawn with a large spread so no gradient
/// vanishes by accident.
pub fn causality_audit(cfg: &ModelConfig, tau: usize, seed: u64) -> Result<AuditReport> {
    let mut cfg = cfg.clone();
    cfg.dropout = 0.0;
    cfg.attn_dropout = 0.0;
    let mut prior = Prior::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in prior.params.values_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, 0.5, &mut rng);
    }
    let lay = WindowLayout::new(&cfg, tau, cfg.w_b)?;
    let n_o = lay.n_o();
    let boxes: Vec<Vec<QuantizedBox>> = (0..n_o)
        .map(|_| {
            (0..cfg.k)
                .map(|_| QuantizedBox::Present([0; 4].map(|_: u8| rng.random_range(0..BINS as u8))))
                .collect()
        })
        .collect();
    let patches = (0..n_o * cfg.k)
        .map(|i| {
            if cfg.ablations.no_patch_encoding {
                PatchSlot::Zero
            } else if i < cfg.k && !cfg.ablations.fixed_grid_patches {
                PatchSlot::Pad
            } else {
                PatchSlot::Pixels(Tensor::uniform(&[cfg.channels, cfg.patch_res, cfg.patch_res], 0.0, 1.0, &mut rng))
            }
        })
        .collect();
    let z = (0..lay.n_b)
        .map(|_| (0..cfg.latent_tokens()).map(|_| rng.random_range(0..cfg.vocab_z)).collect())
        .collect();
    let input = WindowInput {
        layout: lay,
        boxes,
        z,
        patches,
    };
    let masks = build_masks(&cfg, &lay, None)?;
    let mut tape = Tape::new();
    let bd = prior.params.bind(&mut tape, true);
    let out = prior.forward(&mut tape, &bd, &input, &masks)?;

    let p = cfg.patch_tokens();
    let n_obj = lay.obj_rows(&cfg);
    let n_base = lay.base_rows(&cfg);
    let hw = cfg.latent_tokens();
    let d = cfg.dim;
    let mut report = AuditReport::default();

    let check = |report: &mut AuditReport,
                     label: String,
                     var,
                     width: usize,
                     row: usize,
                     obj_ok: &dyn Fn(usize, usize, usize) -> bool,
                     base_ok: &dyn Fn(usize) -> bool|
     -> Result<()> {
        report.positions += 1;
        let total = tape.value(var).len();
        let mut alive = false;
        for c in 0..width {
            let mut seed = vec![0.0; total];
            seed[row * width + c] = 1.0;
            let g = tape.vjp(var, seed)?;
            report.backward_passes += 1;
            let go = g.tensor(out.obj_in);
            let gb = g.tensor(out.base_in);
            for r in 0..n_obj {
                let nz = go.data()[r * d..(r + 1) * d].iter().any(|&v| v != 0.0);
                let (u, k, l) = lay.obj_coords(&cfg, r);
                if obj_ok(u, k, l) {
                    alive |= nz;
                } else if nz {
                    report.leaks.push(format!("{label} logit {c} <- object row (u={u}, k={k}, l={l})"));
                }
            }
            for r in 0..n_base {
                let nz = gb.data()[r * d..(r + 1) * d].iter().any(|&v| v != 0.0);
                if base_ok(r) {
                    alive |= nz;
                } else if nz {
                    report.leaks.push(format!("{label} logit {c} <- base row {r}"));
                }
            }
        }
        if !alive {
            report.dead.push(label);
        }
        Ok(())
    };

    let heads = [out.pres, out.coords[0], out.coords[1], out.coords[2], out.coords[3]];
    for u in 0..n_o {
        for k in 0..cfg.k {
            for (m, &var) in heads.iter().enumerate() {
                let width = tape.shape(var)[1];
                let own = p - 1 + m;
                let obj_ok = move |u2: usize, k2: usize, l2: usize| {
                    u2 < u || (u2 == u && (k2 < k || (k2 == k && l2 <= own)))
                };
                check(
                    &mut report,
                    format!("box (u={u}, k={k}, kind={m})"),
                    var,
                    width,
                    u * cfg.k + k,
                    &obj_ok,
                    &|_| false,
                )?;
            }
        }
    }
    for n in 0..n_base {
        let j = n / hw;
        let obj_ok = move |u2: usize, _k: usize, _l: usize| u2 <= lay.tau + j;
        let base_ok = move |r: usize| r <= n;
        check(
            &mut report,
            format!("latent {n} (step {j})"),
            out.z,
            cfg.vocab_z,
            n,
            &obj_ok,
            &base_ok,
        )?;
    }
    Ok(report)
}

/// The small configuration the audit is specified on.
pub fn audit_config() -> ModelConfig {
    ModelConfig {
        w_o: 3,
        w_b: 1,
        k: 2,
        patch_grid: 1,
        patch_res: 4,
        latent_h: 2,
        latent_w: 2,
        vocab_z: 8,
        layers: 1,
        heads: 2,
        dim: 8,
        mlp_dim: 16,
        ..ModelConfig::default()
    }
}
