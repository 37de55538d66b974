//! Learnable keep/prune logits over heads, FFN channels and whole blocks,
//! masked execution, and physical pruning.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gating::blend;
use crate::gumbel::gumbel_softmax;
use crate::params::{Init, ParamId, ParamKind, ParamStore, Pass};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{attn_branch, ffn_branch, AttnBlock, Backbone, EncoderLayer, FfnBlock, VitConfig};

/// Standard deviation of the noise added to the zero initial logits.
pub const ALPHA_INIT_NOISE: f64 = 1e-3;
/// Initial `keep - prune` logit gap, so search starts from the full model.
pub const KEEP_MARGIN: f64 = 10.0;

/// Logit pairs `(keep, prune)` for every prunable unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticParams {
    /// Attention blocks, `[L, 2]`.
    pub alpha_a: ParamId,
    /// FFN blocks, `[L, 2]`.
    pub alpha_m: ParamId,
    /// Heads, `[L, H, 2]`.
    pub alpha_h: ParamId,
    /// Hidden channels, `[L, N, 2]`.
    pub alpha_n: ParamId,
    pub tau: f64,
}

impl StaticParams {
    pub fn build<T: Scalar>(cfg: &VitConfig, store: &mut ParamStore<T>, rng: &mut RngState, tau: f64) -> Self {
        let mut init = Init { rng };
        let (l, h, n) = (cfg.layers, cfg.heads, cfg.ffn_hidden);
        let mut add = |name: &str, shape: &[usize]| {
            let mut a = init.normal::<T>(shape, ALPHA_INIT_NOISE);
            for (i, v) in a.data_mut().iter_mut().enumerate() {
                let half = T::lit(KEEP_MARGIN / 2.0);
                *v = if i % 2 == 0 { *v + half } else { *v - half };
            }
            store.add(name, ParamKind::Arch, a)
        };
        Self {
            alpha_a: add("static.alpha_a", &[l, 2]),
            alpha_m: add("static.alpha_m", &[l, 2]),
            alpha_h: add("static.alpha_h", &[l, h, 2]),
            alpha_n: add("static.alpha_n", &[l, n, 2]),
            tau,
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.alpha_a, self.alpha_m, self.alpha_h, self.alpha_n]
    }
}

/// Keep weights applied to one layer. Block weights are `(keep, skip)`
/// pairs of shape `[1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LayerMasks {
    pub attn: Option<(Var, Var)>,
    pub ffn: Option<(Var, Var)>,
    /// `[H]`.
    pub heads: Option<Var>,
    /// `[N]`.
    pub channels: Option<Var>,
}

/// Soft Gumbel-Softmax samples of every static logit pair, drawn once per
/// step.
#[derive(Debug, Clone, Copy)]
pub struct RelaxedStatic {
    pub a: Var,
    pub m: Var,
    pub h: Var,
    pub n: Var,
}

pub fn relax<T: Scalar>(pass: &mut Pass<'_, T>, sp: &StaticParams, rng: &mut RngState) -> Result<RelaxedStatic> {
    let mut draw = |pass: &mut Pass<'_, T>, id: ParamId| {
        let v = pass.p(id);
        gumbel_softmax(&mut pass.tape, v, sp.tau, false, rng)
    };
    Ok(RelaxedStatic {
        a: draw(pass, sp.alpha_a)?,
        m: draw(pass, sp.alpha_m)?,
        h: draw(pass, sp.alpha_h)?,
        n: draw(pass, sp.alpha_n)?,
    })
}

fn pair<T: Scalar>(tape: &mut Tape<T>, x: Var, l: usize) -> Result<(Var, Var)> {
    let row = tape.narrow(x, 0, l, 1)?;
    let row = tape.reshape(row, &[2])?;
    Ok((tape.narrow(row, 0, 0, 1)?, tape.narrow(row, 0, 1, 1)?))
}

fn keep_column<T: Scalar>(tape: &mut Tape<T>, x: Var, l: usize) -> Result<Var> {
    let units = tape.shape(x)[1];
    let row = tape.narrow(x, 0, l, 1)?;
    let k = tape.narrow(row, 2, 0, 1)?;
    tape.reshape(k, &[units])
}

impl RelaxedStatic {
    pub fn layer<T: Scalar>(&self, tape: &mut Tape<T>, l: usize) -> Result<LayerMasks> {
        Ok(LayerMasks {
            attn: Some(pair(tape, self.a, l)?),
            ffn: Some(pair(tape, self.m, l)?),
            heads: Some(keep_column(tape, self.h, l)?),
            channels: Some(keep_column(tape, self.n, l)?),
        })
    }
}

/// Which units survive pruning, indexed by original position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub kept_heads: Vec<Vec<bool>>,
    pub kept_channels: Vec<Vec<bool>>,
    pub kept_mhsa: Vec<bool>,
    pub kept_ffn: Vec<bool>,
}

impl PrunePlan {
    pub fn keep_all(cfg: &VitConfig) -> Self {
        Self {
            kept_heads: vec![vec![true; cfg.heads]; cfg.layers],
            kept_channels: vec![vec![true; cfg.ffn_hidden]; cfg.layers],
            kept_mhsa: vec![true; cfg.layers],
            kept_ffn: vec![true; cfg.layers],
        }
    }

    /// Random plan; each unit survives with probability `p_keep`.
    pub fn random(cfg: &VitConfig, p_keep: f64, rng: &mut RngState) -> Self {
        let mut flip = |n: usize| (0..n).map(|_| rng.uniform() < p_keep).collect::<Vec<_>>();
        Self {
            kept_heads: (0..cfg.layers).map(|_| flip(cfg.heads)).collect(),
            kept_channels: (0..cfg.layers).map(|_| flip(cfg.ffn_hidden)).collect(),
            kept_mhsa: flip(cfg.layers),
            kept_ffn: flip(cfg.layers),
        }
        .normalized()
    }

    /// A block without heads (channels) is pruned as a whole.
    pub fn normalized(mut self) -> Self {
        for l in 0..self.kept_mhsa.len() {
            if !self.kept_heads[l].iter().any(|&k| k) {
                self.kept_mhsa[l] = false;
            }
            if !self.kept_channels[l].iter().any(|&k| k) {
                self.kept_ffn[l] = false;
            }
        }
        self
    }

    pub fn layers(&self) -> usize {
        self.kept_mhsa.len()
    }

    pub fn heads_kept(&self, l: usize) -> usize {
        if self.kept_mhsa[l] {
            self.kept_heads[l].iter().filter(|&&k| k).count()
        } else {
            0
        }
    }

    pub fn channels_kept(&self, l: usize) -> usize {
        if self.kept_ffn[l] {
            self.kept_channels[l].iter().filter(|&&k| k).count()
        } else {
            0
        }
    }

    /// Every unit kept by `self` is kept by `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        let sub = |a: &[bool], b: &[bool]| a.iter().zip(b).all(|(&x, &y)| !x || y);
        sub(&self.kept_mhsa, &other.kept_mhsa)
            && sub(&self.kept_ffn, &other.kept_ffn)
            && self.kept_heads.iter().zip(&other.kept_heads).all(|(a, b)| sub(a, b))
            && self.kept_channels.iter().zip(&other.kept_channels).all(|(a, b)| sub(a, b))
    }

    pub fn check(&self, cfg: &VitConfig) -> Result<()> {
        let ok = self.kept_mhsa.len() == cfg.layers
            && self.kept_ffn.len() == cfg.layers
            && self.kept_heads.len() == cfg.layers
            && self.kept_channels.len() == cfg.layers
            && self.kept_heads.iter().all(|h| h.len() == cfg.heads)
            && self.kept_channels.iter().all(|c| c.len() == cfg.ffn_hidden);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("prune plan does not match the model configuration".into()))
        }
    }

    /// Hard 0/1 keep weights for layer `l`.
    pub fn layer_masks<T: Scalar>(&self, tape: &mut Tape<T>, l: usize) -> Result<LayerMasks> {
        let bit = |b: bool| if b { T::one() } else { T::zero() };
        let block = |tape: &mut Tape<T>, k: bool| {
            (
                tape.constant(Tensor::new(vec![1], vec![bit(k)]).unwrap()),
                tape.constant(Tensor::new(vec![1], vec![bit(!k)]).unwrap()),
            )
        };
        let attn = block(tape, self.kept_mhsa[l]);
        let ffn = block(tape, self.kept_ffn[l]);
        let mut vec =
            |v: &[bool]| tape.constant(Tensor::new(vec![v.len()], v.iter().map(|&b| bit(b)).collect()).unwrap());
        let heads = vec(&self.kept_heads[l]);
        let channels = vec(&self.kept_channels[l]);
        Ok(LayerMasks { attn: Some(attn), ffn: Some(ffn), heads: Some(heads), channels: Some(channels) })
    }
}

/// Overwrites the static logits so that [`derive_prune_plan`] returns
/// `plan` and relaxed samples start close to it.
pub fn impose_plan<T: Scalar>(store: &mut ParamStore<T>, sp: &StaticParams, plan: &PrunePlan) {
    let half = T::lit(KEEP_MARGIN / 2.0);
    let mut put = |id: ParamId, keep: &mut dyn Iterator<Item = bool>| {
        for (p, k) in store.get_mut(id).data_mut().chunks_mut(2).zip(keep) {
            let s = if k { half } else { -half };
            p[0] = s;
            p[1] = -s;
        }
    };
    put(sp.alpha_a, &mut plan.kept_mhsa.iter().copied());
    put(sp.alpha_m, &mut plan.kept_ffn.iter().copied());
    put(sp.alpha_h, &mut plan.kept_heads.iter().flatten().copied());
    put(sp.alpha_n, &mut plan.kept_channels.iter().flatten().copied());
}

/// Pruned iff the keep logit is strictly below the prune logit.
pub fn derive_prune_plan<T: Scalar>(store: &ParamStore<T>, sp: &StaticParams) -> PrunePlan {
    let keep = |id: ParamId| -> Vec<bool> { store.get(id).data().chunks(2).map(|p| !(p[0] < p[1])).collect() };
    let a = keep(sp.alpha_a);
    let m = keep(sp.alpha_m);
    let h = keep(sp.alpha_h);
    let n = keep(sp.alpha_n);
    let layers = a.len();
    let (heads, chans) = (h.len() / layers, n.len() / layers);
    PrunePlan {
        kept_heads: h.chunks(heads).map(<[bool]>::to_vec).collect(),
        kept_channels: n.chunks(chans).map(<[bool]>::to_vec).collect(),
        kept_mhsa: a,
        kept_ffn: m,
    }
    .normalized()
}

/// How the block weights enter the layer blend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendRule {
    /// `e = g * keep`, then `e * Z' + (1 - e) * Z`: a pruned block is the
    /// identity, matching its physical removal.
    #[default]
    Effective,
    /// `g * keep * Z' + (1 - g) * skip * Z`, taken literally.
    Literal,
}

/// Attention on normalized input with per-head keep weights.
pub fn masked_mhsa<T: Scalar>(
    pass: &mut Pass<'_, T>,
    blk: &AttnBlock,
    head_dim: usize,
    x: Var,
    keep: Var,
) -> Result<Var> {
    crate::vit::mhsa(pass, blk, head_dim, x, Some(keep))
}

/// FFN on normalized input with per-channel keep weights.
pub fn masked_ffn<T: Scalar>(pass: &mut Pass<'_, T>, blk: &FfnBlock, x: Var, keep: Var) -> Result<Var> {
    crate::vit::ffn(pass, blk, x, Some(keep))
}

fn gate_column<T: Scalar>(tape: &mut Tape<T>, g: Option<Var>, j: usize) -> Result<Option<Var>> {
    let Some(g) = g else { return Ok(None) };
    let b = tape.shape(g)[0];
    let c = tape.narrow(g, 1, j, 1)?;
    Ok(Some(tape.reshape(c, &[b, 1, 1])?))
}

fn combine<T: Scalar>(
    tape: &mut Tape<T>,
    rule: BlendRule,
    g: Option<Var>,
    weights: Option<(Var, Var)>,
    y: Var,
    z: Var,
) -> Result<Var> {
    match (rule, weights) {
        (BlendRule::Literal, Some((keep, skip))) => {
            let on = match g {
                Some(g) => tape.mul(g, keep)?,
                None => keep,
            };
            let off = match g {
                Some(g) => {
                    let og = tape.one_minus(g);
                    tape.mul(og, skip)?
                }
                None => {
                    let zero = tape.constant(Tensor::zeros(&[1]));
                    tape.mul(zero, skip)?
                }
            };
            let a = tape.mul(y, on)?;
            let b = tape.mul(z, off)?;
            tape.add(a, b)
        }
        (_, weights) => {
            let e = match (g, weights) {
                (Some(g), Some((keep, _))) => Some(tape.mul(g, keep)?),
                (Some(g), None) => Some(g),
                (None, Some((keep, _))) => Some(keep),
                (None, None) => None,
            };
            match e {
                Some(e) => blend(tape, e, y, z),
                None => Ok(y),
            }
        }
    }
}

/// One layer under static keep weights and optional dynamic gates
/// `g: [B, 2]`.
pub fn joint_block<T: Scalar>(
    pass: &mut Pass<'_, T>,
    layer: &EncoderLayer,
    head_dim: usize,
    z: Var,
    masks: &LayerMasks,
    g: Option<Var>,
    rule: BlendRule,
) -> Result<Var> {
    let mut z = z;
    if let Some(a) = &layer.attn {
        let y = attn_branch(pass, a, head_dim, z, masks.heads)?;
        let g0 = gate_column(&mut pass.tape, g, 0)?;
        z = combine(&mut pass.tape, rule, g0, masks.attn, y, z)?;
    }
    if let Some(f) = &layer.ffn {
        let y = ffn_branch(pass, f, z, masks.channels)?;
        let g1 = gate_column(&mut pass.tape, g, 1)?;
        z = combine(&mut pass.tape, rule, g1, masks.ffn, y, z)?;
    }
    Ok(z)
}

fn cols<T: Scalar>(t: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    t.select_axis(t.ndim() - 1, keep)
}

fn copy<T: Scalar>(src: &ParamStore<T>, dst: &mut ParamStore<T>, id: ParamId, value: Tensor<T>) -> ParamId {
    let e = src.entry(id);
    dst.add(e.name.clone(), e.kind, value)
}

fn copy_same<T: Scalar>(src: &ParamStore<T>, dst: &mut ParamStore<T>, id: ParamId) -> ParamId {
    copy(src, dst, id, src.get(id).clone())
}

fn prune_attn<T: Scalar>(
    src: &ParamStore<T>,
    dst: &mut ParamStore<T>,
    blk: &AttnBlock,
    keep: &[bool],
    head_dim: usize,
) -> Option<AttnBlock> {
    let pos: Vec<usize> = (0..blk.heads.len()).filter(|&j| keep[blk.heads[j]]).collect();
    if pos.is_empty() {
        return None;
    }
    let units: Vec<usize> = pos.iter().flat_map(|&j| j * head_dim..(j + 1) * head_dim).collect();
    let c = |dst: &mut ParamStore<T>, id| copy(src, dst, id, cols(src.get(id), &units));
    Some(AttnBlock {
        ln_gain: copy_same(src, dst, blk.ln_gain),
        ln_bias: copy_same(src, dst, blk.ln_bias),
        wq: c(dst, blk.wq),
        bq: c(dst, blk.bq),
        wk: c(dst, blk.wk),
        bk: c(dst, blk.bk),
        wv: c(dst, blk.wv),
        bv: c(dst, blk.bv),
        wo: copy(src, dst, blk.wo, src.get(blk.wo).select_rows(&units)),
        bo: copy_same(src, dst, blk.bo),
        heads: pos.iter().map(|&j| blk.heads[j]).collect(),
    })
}

fn prune_ffn<T: Scalar>(
    src: &ParamStore<T>,
    dst: &mut ParamStore<T>,
    blk: &FfnBlock,
    keep: &[bool],
) -> Option<FfnBlock> {
    let pos: Vec<usize> = (0..blk.channels.len()).filter(|&j| keep[blk.channels[j]]).collect();
    if pos.is_empty() {
        return None;
    }
    Some(FfnBlock {
        ln_gain: copy_same(src, dst, blk.ln_gain),
        ln_bias: copy_same(src, dst, blk.ln_bias),
        w_in: copy(src, dst, blk.w_in, cols(src.get(blk.w_in), &pos)),
        b_in: copy(src, dst, blk.b_in, cols(src.get(blk.b_in), &pos)),
        w_out: copy(src, dst, blk.w_out, src.get(blk.w_out).select_rows(&pos)),
        b_out: copy_same(src, dst, blk.b_out),
        channels: pos.iter().map(|&j| blk.channels[j]).collect(),
    })
}

/// Copies the backbone into `dst` with pruned heads, channels and blocks
/// physically removed. Layers that lose both blocks are dropped.
pub fn prune_backbone<T: Scalar>(
    cfg: &VitConfig,
    src: &ParamStore<T>,
    bb: &Backbone,
    plan: &PrunePlan,
    dst: &mut ParamStore<T>,
) -> Result<Backbone> {
    plan.check(cfg)?;
    let hd = cfg.head_dim();
    let patch_w = copy_same(src, dst, bb.patch_w);
    let patch_b = copy_same(src, dst, bb.patch_b);
    let cls = copy_same(src, dst, bb.cls);
    let pos = copy_same(src, dst, bb.pos);
    let mut layers = Vec::new();
    for layer in &bb.layers {
        let l = layer.index;
        let attn = match (&layer.attn, plan.kept_mhsa[l]) {
            (Some(a), true) => prune_attn(src, dst, a, &plan.kept_heads[l], hd),
            _ => None,
        };
        let ffn = match (&layer.ffn, plan.kept_ffn[l]) {
            (Some(f), true) => prune_ffn(src, dst, f, &plan.kept_channels[l]),
            _ => None,
        };
        if attn.is_some() || ffn.is_some() {
            layers.push(EncoderLayer { index: l, attn, ffn });
        }
    }
    Ok(Backbone {
        patch_w,
        patch_b,
        cls,
        pos,
        layers,
        norm_gain: copy_same(src, dst, bb.norm_gain),
        norm_bias: copy_same(src, dst, bb.norm_bias),
        head_w: copy_same(src, dst, bb.head_w),
        head_b: copy_same(src, dst, bb.head_b),
    })
}
