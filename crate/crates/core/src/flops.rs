//! Multiply-accumulate accounting: a primitive-walking counter over the
//! concrete compute graph, normalized per-block shares, and the
//! differentiable model cost used by the resource loss.
//!
//! Only matrix products are counted. Biases, normalization, softmax and
//! activations are free.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::compress::PrunePlan;
use crate::error::{Error, Result};
use crate::gating::{gate_hidden, GateKind, GATE_LOGITS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::VitConfig;

/// One `[m, k] x [k, n]` product for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatMul {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Counting {
    /// Visits every multiply-accumulate.
    Exhaustive,
    /// `m * k * n` per product.
    Product,
}

impl MatMul {
    fn count(self, how: Counting) -> u64 {
        match how {
            Counting::Product => (self.m * self.k * self.n) as u64,
            Counting::Exhaustive => {
                let mut c = 0u64;
                for _row in 0..self.m {
                    for _col in 0..self.n {
                        for _inner in 0..self.k {
                            c = std::hint::black_box(c + 1);
                        }
                    }
                }
                c
            }
        }
    }
}

/// One encoder layer as it is actually executed for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RealizedLayer {
    /// Heads in the attention block, 0 when the block is gone.
    pub heads: usize,
    /// Hidden channels in the FFN block, 0 when the block is gone.
    pub channels: usize,
    pub gate: Option<GateKind>,
    /// Whether the attention and FFN blocks run.
    pub exec: [bool; 2],
}

impl RealizedLayer {
    pub fn full(cfg: &VitConfig) -> Self {
        Self { heads: cfg.heads, channels: cfg.ffn_hidden, gate: None, exec: [true, true] }
    }
}

pub fn embed_prims(cfg: &VitConfig) -> Vec<MatMul> {
    vec![MatMul { m: cfg.patches(), k: cfg.patch_dim(), n: cfg.embed_dim }]
}

pub fn head_prims(cfg: &VitConfig) -> Vec<MatMul> {
    vec![MatMul { m: 1, k: cfg.embed_dim, n: cfg.num_classes }]
}

/// Q, K, V projections, per-head scores and weighted values, output
/// projection.
pub fn attn_prims(cfg: &VitConfig, heads: usize) -> Vec<MatMul> {
    if heads == 0 {
        return Vec::new();
    }
    let (t, d, dh) = (cfg.tokens(), cfg.embed_dim, cfg.head_dim());
    let inner = heads * dh;
    let mut out = vec![MatMul { m: t, k: d, n: inner }; 3];
    for _ in 0..heads {
        out.push(MatMul { m: t, k: dh, n: t });
        out.push(MatMul { m: t, k: t, n: dh });
    }
    out.push(MatMul { m: t, k: inner, n: d });
    out
}

pub fn ffn_prims(cfg: &VitConfig, channels: usize) -> Vec<MatMul> {
    if channels == 0 {
        return Vec::new();
    }
    let (t, d) = (cfg.tokens(), cfg.embed_dim);
    vec![MatMul { m: t, k: d, n: channels }, MatMul { m: t, k: channels, n: d }]
}

pub fn gate_prims(cfg: &VitConfig, kind: GateKind) -> Vec<MatMul> {
    let (t, d, h, o) = (cfg.tokens(), cfg.embed_dim, gate_hidden(cfg.embed_dim), GATE_LOGITS);
    match kind {
        GateKind::Fc2LnRelu | GateKind::Fc2BnRelu | GateKind::Fc2LnGelu => {
            vec![MatMul { m: 1, k: d, n: h }, MatMul { m: 1, k: h, n: o }]
        }
        GateKind::Fc1 => vec![MatMul { m: 1, k: d, n: o }],
        GateKind::Conv2BnRelu | GateKind::Conv2BnGelu => {
            vec![MatMul { m: h, k: d, n: t }, MatMul { m: o, k: h, n: t }]
        }
        GateKind::Conv1 => vec![MatMul { m: o, k: d, n: t }],
    }
}

pub fn count(prims: &[MatMul], how: Counting) -> u64 {
    prims.iter().map(|p| p.count(how)).sum()
}

/// Per-sample MACs of the graph described by `layers`.
pub fn count_realized(cfg: &VitConfig, layers: &[RealizedLayer], how: Counting) -> u64 {
    let mut total = count(&embed_prims(cfg), how) + count(&head_prims(cfg), how);
    for l in layers {
        if let Some(g) = l.gate {
            total += count(&gate_prims(cfg, g), how);
        }
        if l.exec[0] {
            total += count(&attn_prims(cfg, l.heads), how);
        }
        if l.exec[1] {
            total += count(&ffn_prims(cfg, l.channels), how);
        }
    }
    total
}

/// Per-sample MACs of the backbone, optionally after pruning, visiting
/// every multiply-accumulate.
pub fn count_flops_oracle(cfg: &VitConfig, plan: Option<&PrunePlan>) -> u64 {
    let layers: Vec<RealizedLayer> = (0..cfg.layers)
        .map(|l| match plan {
            None => RealizedLayer::full(cfg),
            Some(p) => {
                RealizedLayer { heads: p.heads_kept(l), channels: p.channels_kept(l), gate: None, exec: [true, true] }
            }
        })
        .collect();
    count_realized(cfg, &layers, Counting::Exhaustive)
}

/// MACs of the unpruned backbone without gates, the normalizer of every
/// share.
pub fn backbone_macs(cfg: &VitConfig) -> u64 {
    count_realized(cfg, &vec![RealizedLayer::full(cfg); cfg.layers], Counting::Product)
}

pub fn share(cfg: &VitConfig, prims: &[MatMul]) -> f64 {
    count(prims, Counting::Product) as f64 / backbone_macs(cfg) as f64
}

/// Normalized shares of the unpruned network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub total_macs: u64,
    pub f_attn: Vec<f64>,
    pub f_ffn: Vec<f64>,
    /// Per layer, one share per candidate kind in [`GateKind::ALL`] order.
    pub f_gate: Vec<Vec<f64>>,
    pub f_other: f64,
    pub model_cost: f64,
    /// Backbone parameters of the unpruned network.
    pub backbone_params: usize,
}

/// Parameter count of the unpruned backbone.
pub fn backbone_params(cfg: &VitConfig) -> usize {
    let (d, n, t) = (cfg.embed_dim, cfg.ffn_hidden, cfg.tokens());
    let embed = cfg.patch_dim() * d + d + d + t * d;
    let attn = 2 * d + 4 * (d * d + d);
    let ffn = 2 * d + d * n + n + n * d + d;
    let head = 2 * d + d * cfg.num_classes + cfg.num_classes;
    embed + cfg.layers * (attn + ffn) + head
}

impl FlopsReport {
    pub fn new(cfg: &VitConfig) -> Self {
        let f_attn = vec![share(cfg, &attn_prims(cfg, cfg.heads)); cfg.layers];
        let f_ffn = vec![share(cfg, &ffn_prims(cfg, cfg.ffn_hidden)); cfg.layers];
        let gates: Vec<f64> = GateKind::ALL.iter().map(|&k| share(cfg, &gate_prims(cfg, k))).collect();
        let mut other = embed_prims(cfg);
        other.extend(head_prims(cfg));
        let f_other = share(cfg, &other);
        let model_cost = count_realized(cfg, &vec![RealizedLayer::full(cfg); cfg.layers], Counting::Product) as f64
            / backbone_macs(cfg) as f64;
        Self {
            total_macs: backbone_macs(cfg),
            f_attn,
            f_ffn,
            f_gate: vec![gates; cfg.layers],
            f_other,
            model_cost,
            backbone_params: backbone_params(cfg),
        }
    }
}

/// Normalized cost of one executed sample.
pub fn realized_cost(cfg: &VitConfig, layers: &[RealizedLayer]) -> f64 {
    count_realized(cfg, layers, Counting::Product) as f64 / backbone_macs(cfg) as f64
}

/// MACs outside the encoder layers: patch projection and classifier.
pub fn other_macs(cfg: &VitConfig) -> u64 {
    count(&embed_prims(cfg), Counting::Product) + count(&head_prims(cfg), Counting::Product)
}

/// Differentiable cost contributions of one layer, in MACs. Absent
/// factors count as 1, an absent gate network costs nothing.
#[derive(Debug, Clone, Default)]
pub struct CostLayer {
    /// MACs of the attention block in its current shape.
    pub attn_macs: u64,
    pub ffn_macs: u64,
    /// MACs of each gate candidate.
    pub gate_macs: Vec<u64>,
    /// Block keep weights, `[1]`.
    pub attn_keep: Option<Var>,
    pub ffn_keep: Option<Var>,
    /// Head keep weights `[H]` and channel keep weights `[N]`, averaged.
    pub head_keep: Option<Var>,
    pub channel_keep: Option<Var>,
    /// Execute gates `[B, 2]`, averaged over the batch.
    pub gates: Option<Var>,
    /// Candidate mixing weights `[K]`; required with more than one
    /// candidate.
    pub mix: Option<Var>,
}

fn block_term<T: Scalar>(tape: &mut Tape<T>, macs: u64, factors: &[Option<Var>]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::from_f64(&[1], &[macs as f64])?);
    for f in factors.iter().flatten() {
        let m = tape.mean(*f);
        acc = tape.mul(acc, m)?;
    }
    Ok(acc)
}

/// `sum_l (g0 F'_attn + g1 F'_ffn + sum_k w_k F_G,k) + F_o` where each
/// `F'` is the block cost scaled by its block keep weight and mean
/// head/channel keep weight. Terms are summed in MACs and divided by
/// `total_macs` once, so the unpruned backbone costs exactly 1.
pub fn model_cost<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[CostLayer],
    other_macs: u64,
    total_macs: u64,
) -> Result<Var> {
    let mut total = tape.constant(Tensor::from_f64(&[1], &[other_macs as f64])?);
    for l in layers {
        let (g0, g1) = match l.gates {
            Some(g) => (Some(tape.narrow(g, 1, 0, 1)?), Some(tape.narrow(g, 1, 1, 1)?)),
            None => (None, None),
        };
        let a = block_term(tape, l.attn_macs, &[l.attn_keep, l.head_keep, g0])?;
        let f = block_term(tape, l.ffn_macs, &[l.ffn_keep, l.channel_keep, g1])?;
        total = tape.add(total, a)?;
        total = tape.add(total, f)?;
        let gm: Vec<f64> = l.gate_macs.iter().map(|&m| m as f64).collect();
        match (l.mix, gm.len()) {
            (_, 0) => {}
            (None, 1) => {
                let g = tape.constant(Tensor::from_f64(&[1], &gm)?);
                total = tape.add(total, g)?;
            }
            (Some(w), k) => {
                let s = tape.constant(Tensor::from_f64(&[k], &gm)?);
                let ws = tape.mul(w, s)?;
                let g = tape.sum(ws);
                let g = tape.reshape(g, &[1])?;
                total = tape.add(total, g)?;
            }
            (None, k) => {
                return Err(Error::Param(format!("{k} gate candidates need mixing weights")));
            }
        }
    }
    let total = tape.scale(total, T::lit(1.0 / total_macs as f64));
    tape.reshape(total, &[])
}

/// `(cost - f_t)^2`.
pub fn resource_loss<T: Scalar>(tape: &mut Tape<T>, cost: Var, f_t: f64) -> Result<Var> {
    if !(f_t > 0.0 && f_t <= 1.0) {
        return Err(Error::Param(format!("target ratio must lie in (0, 1], got {f_t}")));
    }
    let d = tape.add_scalar(cost, T::lit(-f_t));
    Ok(tape.square(d))
}
