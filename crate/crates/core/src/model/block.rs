//! Two-stream transformer block.

use rand::Rng;

use super::config::ModelConfig;
use super::masks::AttnMasks;
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), Tensor::randn(&[din, dout], std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bd: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bd[self.w])?;
        tape.add_row_bias(y, bd[self.b])
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            g: store.add(format!("{name}.g"), Tensor::ones(&[d])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bd: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bd[self.g], bd[self.b])
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    pub fc: Linear,
    pub proj: Linear,
}

impl Mlp {
    fn apply(&self, tape: &mut Tape, bd: &Bound, x: Var) -> Result<Var> {
        let h = self.fc.apply(tape, bd, x)?;
        let h = tape.gelu(h);
        self.proj.apply(tape, bd, h)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct AttnProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// The four attention sub-operations, in parameter order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubOp {
    BaseBase = 0,
    BaseObj = 1,
    ObjTime = 2,
    ObjPerT = 3,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    attn: Vec<AttnProj>,
    ln_b1: Norm,
    ln_b2: Norm,
    ln_o1: Norm,
    ln_o2: Norm,
    mlp_b: Mlp,
    mlp_o: Mlp,
}

/// Keys and values of the object stream as seen by the base stream.
#[derive(Clone, Copy, Debug)]
pub struct ObjKv {
    pub k: Var,
    pub v: Var,
}

impl BlockParams {
    pub(crate) fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let std = 0.02;
        let out_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
        let sets = if cfg.shared_attn { 1 } else { 4 };
        let attn = (0..sets)
            .map(|i| {
                let n = if cfg.shared_attn {
                    format!("{name}.attn")
                } else {
                    format!("{name}.attn{i}")
                };
                AttnProj {
                    q: Linear::new(store, &format!("{n}.q"), d, d, std, rng),
                    k: Linear::new(store, &format!("{n}.k"), d, d, std, rng),
                    v: Linear::new(store, &format!("{n}.v"), d, d, std, rng),
                    o: Linear::new(store, &format!("{n}.o"), d, d, out_std, rng),
                }
            })
            .collect();
        let mlp = |store: &mut ParamStore, n: &str, rng: &mut R| Mlp {
            fc: Linear::new(store, &format!("{n}.fc"), d, cfg.mlp_dim, std, rng),
            proj: Linear::new(store, &format!("{n}.proj"), cfg.mlp_dim, d, out_std, rng),
        };
        BlockParams {
            attn,
            ln_b1: Norm::new(store, &format!("{name}.ln_b1"), d),
            ln_b2: Norm::new(store, &format!("{name}.ln_b2"), d),
            ln_o1: Norm::new(store, &format!("{name}.ln_o1"), d),
            ln_o2: Norm::new(store, &format!("{name}.ln_o2"), d),
            mlp_b: mlp(store, &format!("{name}.mlp_b"), rng),
            mlp_o: mlp(store, &format!("{name}.mlp_o"), rng),
        }
    }

    fn proj(&self, op: SubOp) -> &AttnProj {
        if self.attn.len() == 1 {
            &self.attn[0]
        } else {
            &self.attn[op as usize]
        }
    }

    /// Output-projection parameter ids of every attention set, and the MLP
    /// output projections (used to build identity blocks in tests).
    pub fn output_projections(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.attn.iter().flat_map(|a| [a.o.w, a.o.b]).collect();
        ids.extend([self.mlp_b.proj.w, self.mlp_b.proj.b, self.mlp_o.proj.w, self.mlp_o.proj.b]);
        ids
    }

    /// Averages the active attention terms, projects, and adds the residual.
    #[allow(clippy::too_many_arguments)]
    fn mixed_attention(
        &self,
        tape: &mut Tape,
        bd: &Bound,
        cfg: &ModelConfig,
        x: Var,
        terms: &[(SubOp, Var, Var, Var, &std::sync::Arc<crate::numerics::AttnMask>)],
    ) -> Result<Var> {
        if terms.is_empty() {
            return Ok(x);
        }
        let scale = 1.0 / terms.len() as f64;
        let mut acc: Option<Var> = None;
        if self.attn.len() == 1 {
            for &(_, q, k, v, mask) in terms {
                let a = tape.attention(q, k, v, cfg.heads, mask.clone(), cfg.attn_dropout)?;
                acc = Some(match acc {
                    None => a,
                    Some(s) => tape.add(s, a)?,
                });
            }
            let mean = tape.scale(acc.unwrap(), scale);
            let y = self.attn[0].o.apply(tape, bd, mean)?;
            let y = tape.dropout(y, cfg.dropout);
            tape.add(x, y)
        } else {
            for &(op, q, k, v, mask) in terms {
                let a = tape.attention(q, k, v, cfg.heads, mask.clone(), cfg.attn_dropout)?;
                let y = self.proj(op).o.apply(tape, bd, a)?;
                acc = Some(match acc {
                    None => y,
                    Some(s) => tape.add(s, y)?,
                });
            }
            let mean = tape.scale(acc.unwrap(), scale);
            let y = tape.dropout(mean, cfg.dropout);
            tape.add(x, y)
        }
    }

    /// Object-stream half of the block. Returns the updated stream and the
    /// keys/values the base stream reads (`None` when base→object attention
    /// is ablated).
    pub fn object_half(
        &self,
        tape: &mut Tape,
        bd: &Bound,
        cfg: &ModelConfig,
        obj: Var,
        masks: &AttnMasks,
    ) -> Result<(Var, Option<ObjKv>)> {
        let ab = cfg.ablations;
        let h = self.ln_o1.apply(tape, bd, obj)?;
        let mut terms = Vec::new();
        let mut qkv: Option<(Var, Var, Var)> = None;
        for (op, mask, off) in [
            (SubOp::ObjTime, &masks.obj_time, ab.drop_obj_time),
            (SubOp::ObjPerT, &masks.obj_per_t, ab.drop_obj_per_t),
        ] {
            if off {
                continue;
            }
            let (q, k, v) = match qkv {
                Some(t) if self.attn.len() == 1 => t,
                _ => {
                    let p = self.proj(op);
                    let t = (p.q.apply(tape, bd, h)?, p.k.apply(tape, bd, h)?, p.v.apply(tape, bd, h)?);
                    qkv = Some(t);
                    t
                }
            };
            terms.push((op, q, k, v, mask));
        }
        let kv = if ab.drop_base_obj {
            None
        } else {
            match qkv {
                Some((_, k, v)) if self.attn.len() == 1 => Some(ObjKv { k, v }),
                _ => {
                    let p = self.proj(SubOp::BaseObj);
                    Some(ObjKv {
                        k: p.k.apply(tape, bd, h)?,
                        v: p.v.apply(tape, bd, h)?,
                    })
                }
            }
        };
        let mut x = self.mixed_attention(tape, bd, cfg, obj, &terms)?;
        let h2 = self.ln_o2.apply(tape, bd, x)?;
        let m = self.mlp_o.apply(tape, bd, h2)?;
        let m = tape.dropout(m, cfg.dropout);
        x = tape.add(x, m)?;
        Ok((x, kv))
    }

    /// Base-stream half of the block, reading object keys/values `kv`.
    pub fn base_half(
        &self,
        tape: &mut Tape,
        bd: &Bound,
        cfg: &ModelConfig,
        base: Var,
        kv: Option<ObjKv>,
        masks: &AttnMasks,
    ) -> Result<Var> {
        let ab = cfg.ablations;
        let h = self.ln_b1.apply(tape, bd, base)?;
        let mut terms = Vec::new();
        let mut q_shared = None;
        if !ab.drop_base_base {
            let p = self.proj(SubOp::BaseBase);
            let q = p.q.apply(tape, bd, h)?;
            let k = p.k.apply(tape, bd, h)?;
            let v = p.v.apply(tape, bd, h)?;
            q_shared = Some(q);
            terms.push((SubOp::BaseBase, q, k, v, &masks.base_base));
        }
        if !ab.drop_base_obj {
            let kv = kv.ok_or_else(|| Error::contract("base stream needs object keys/values"))?;
            let q = match q_shared {
                Some(q) if self.attn.len() == 1 => q,
                _ => self.proj(SubOp::BaseObj).q.apply(tape, bd, h)?,
            };
            terms.push((SubOp::BaseObj, q, kv.k, kv.v, &masks.base_obj));
        }
        let mut x = self.mixed_attention(tape, bd, cfg, base, &terms)?;
        let h2 = self.ln_b2.apply(tape, bd, x)?;
        let m = self.mlp_b.apply(tape, bd, h2)?;
        let m = tape.dropout(m, cfg.dropout);
        x = tape.add(x, m)?;
        Ok(x)
    }
}

/// One full block: both streams updated from the same inputs.
#[allow(clippy::too_many_arguments)]
pub fn povt_block(
    tape: &mut Tape,
    bd: &Bound,
    block: &BlockParams,
    cfg: &ModelConfig,
    base: Var,
    obj: Var,
    masks: &AttnMasks,
) -> Result<(Var, Var)> {
    let want_b = [masks.base_base.n_q(), cfg.dim];
    let want_o = [masks.obj_time.n_q(), cfg.dim];
    if tape.shape(base) != want_b || tape.shape(obj) != want_o {
        return Err(Error::contract(format!(
            "block inputs {:?}/{:?}, masks expect {want_b:?}/{want_o:?}",
            tape.shape(base),
            tape.shape(obj)
        )));
    }
    let (obj2, kv) = block.object_half(tape, bd, cfg, obj, masks)?;
    let base2 = block.base_half(tape, bd, cfg, base, kv, masks)?;
    Ok((base2, obj2))
}
