//! Per-layer decision networks that choose whether the attention and FFN
//! blocks of a layer run, the candidate architectures they are searched
//! over, and gated execution of a layer.

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::gumbel::{gumbel_noise, gumbel_softmax_with_noise};
use crate::params::{Init, ParamId, ParamKind, ParamStore, Pass};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{attn_branch, ffn_branch, EncoderLayer};

/// Two binary decisions with two logits each.
pub const GATE_LOGITS: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Initial `execute - skip` logit gap of every gate network.
pub const EXEC_MARGIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    /// FC, LayerNorm, ReLU, FC.
    Fc2LnRelu,
    /// FC, BatchNorm, ReLU, FC.
    Fc2BnRelu,
    /// FC, LayerNorm, GeLU, FC.
    Fc2LnGelu,
    /// A single FC.
    Fc1,
    /// 1x1 conv, BatchNorm, ReLU, 1x1 conv.
    Conv2BnRelu,
    /// 1x1 conv, BatchNorm, GeLU, 1x1 conv.
    Conv2BnGelu,
    /// A single 1x1 conv.
    Conv1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Batch,
}

impl GateKind {
    pub const ALL: [GateKind; 7] = [
        GateKind::Fc2LnRelu,
        GateKind::Fc2BnRelu,
        GateKind::Fc2LnGelu,
        GateKind::Fc1,
        GateKind::Conv2BnRelu,
        GateKind::Conv2BnGelu,
        GateKind::Conv1,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_conv(self) -> bool {
        matches!(self, GateKind::Conv2BnRelu | GateKind::Conv2BnGelu | GateKind::Conv1)
    }

    pub fn two_layer(self) -> bool {
        !matches!(self, GateKind::Fc1 | GateKind::Conv1)
    }

    pub fn norm(self) -> Option<NormKind> {
        match self {
            GateKind::Fc2LnRelu | GateKind::Fc2LnGelu => Some(NormKind::Layer),
            GateKind::Fc2BnRelu | GateKind::Conv2BnRelu | GateKind::Conv2BnGelu => Some(NormKind::Batch),
            GateKind::Fc1 | GateKind::Conv1 => None,
        }
    }

    pub fn activation(self) -> Option<Activation> {
        match self {
            GateKind::Fc2LnRelu | GateKind::Fc2BnRelu | GateKind::Conv2BnRelu => Some(Activation::Relu),
            GateKind::Fc2LnGelu | GateKind::Conv2BnGelu => Some(Activation::Gelu),
            GateKind::Fc1 | GateKind::Conv1 => None,
        }
    }
}

/// Hidden width of two-layer candidates.
pub fn gate_hidden(embed_dim: usize) -> usize {
    (embed_dim / 4).max(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    /// Running mean and variance for BatchNorm.
    pub running: Option<(ParamId, ParamId)>,
}

/// FC weights are `[in, out]` applied on the right; conv weights are
/// `[out, in]` applied on the left of `[B, d, T]`, biases `[out, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCandidate {
    pub kind: GateKind,
    pub w1: ParamId,
    pub b1: ParamId,
    pub norm: Option<GateNorm>,
    pub out: Option<(ParamId, ParamId)>,
}

impl GateCandidate {
    pub fn build<T: Scalar>(
        kind: GateKind,
        embed_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        prefix: &str,
    ) -> Self {
        let d = embed_dim;
        let width = if kind.two_layer() { gate_hidden(d) } else { GATE_LOGITS };
        let mut init = Init { rng };
        let w = ParamKind::Weight;
        let p = |s: &str| format!("{prefix}.{s}");
        let dense = |init: &mut Init, fan_in: usize, fan_out: usize| -> Tensor<T> {
            let t = init.linear::<T>(fan_in, fan_out);
            if kind.is_conv() {
                transpose2(&t)
            } else {
                t
            }
        };
        let bias_shape = |n: usize| if kind.is_conv() { vec![n, 1] } else { vec![n] };
        let w1 = store.add(p("w1"), w, dense(&mut init, d, width));
        let b1 = store.add(
            p("b1"),
            w,
            if kind.two_layer() { Tensor::zeros(&bias_shape(width)) } else { exec_bias(&bias_shape(width)) },
        );
        let norm = kind.norm().map(|nk| GateNorm {
            gain: store.add(p("norm.gain"), w, Tensor::ones(&[width])),
            bias: store.add(p("norm.bias"), w, Tensor::zeros(&[width])),
            running: (nk == NormKind::Batch).then(|| {
                (
                    store.add(p("norm.running_mean"), ParamKind::Buffer, Tensor::zeros(&[width])),
                    store.add(p("norm.running_var"), ParamKind::Buffer, Tensor::ones(&[width])),
                )
            }),
        });
        let out = kind.two_layer().then(|| {
            (
                store.add(p("w2"), w, dense(&mut init, width, GATE_LOGITS)),
                store.add(p("b2"), w, exec_bias(&bias_shape(GATE_LOGITS))),
            )
        });
        Self { kind, w1, b1, norm, out }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w1, self.b1];
        if let Some(n) = &self.norm {
            ids.extend([n.gain, n.bias]);
            if let Some((m, v)) = n.running {
                ids.extend([m, v]);
            }
        }
        if let Some((w, b)) = self.out {
            ids.extend([w, b]);
        }
        ids
    }
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
}

/// Applies a dense layer in the candidate's layout.
fn dense<T: Scalar>(pass: &mut Pass<'_, T>, conv: bool, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (w, b) = (pass.p(w), pass.p(b));
    let y = if conv { pass.tape.matmul(w, x)? } else { pass.tape.matmul(x, w)? };
    pass.tape.add(y, b)
}

fn normalize<T: Scalar>(pass: &mut Pass<'_, T>, norm: &GateNorm, x: Var) -> Result<Var> {
    let (g, b) = (pass.p(norm.gain), pass.p(norm.bias));
    match norm.running {
        None => pass.tape.layer_norm(x, g, b, T::lit(1e-5)),
        Some((mid, vid)) => {
            let eps = T::lit(BN_EPS);
            if pass.train {
                let (y, stats) = pass.tape.batch_norm(x, g, b, eps, None)?;
                let (m, v) = stats.expect("training mode returns statistics");
                pass.bn_stats.push((mid, vid, m, v));
                Ok(y)
            } else {
                let store = pass.store();
                let (m, v) = (store.get(mid).data(), store.get(vid).data());
                Ok(pass.tape.batch_norm(x, g, b, eps, Some((m, v)))?.0)
            }
        }
    }
}

/// Four gate logits per sample from `z: [B, T, d]`. FC candidates see the
/// token mean; conv candidates run tokenwise on `[B, d, T]` and average the
/// result over tokens.
pub fn gate_features<T: Scalar>(pass: &mut Pass<'_, T>, cand: &GateCandidate, z: Var) -> Result<Var> {
    let conv = cand.kind.is_conv();
    let mut x = if conv { pass.tape.permute(z, &[0, 2, 1])? } else { pass.tape.mean_axis(z, 1)? };
    x = dense(pass, conv, x, cand.w1, cand.b1)?;
    if let Some(norm) = &cand.norm {
        x = normalize(pass, norm, x)?;
    }
    if let Some(act) = cand.kind.activation() {
        x = pass.tape.activation(x, act);
    }
    if let Some((w, b)) = cand.out {
        x = dense(pass, conv, x, w, b)?;
    }
    if conv {
        x = pass.tape.mean_axis(x, 2)?;
    }
    Ok(x)
}

/// `sum_k weights[k] * feats[k]` with `weights: [K]`.
pub fn mix_candidates<T: Scalar>(tape: &mut Tape<T>, feats: &[Var], weights: Var) -> Result<Var> {
    if feats.is_empty() {
        return Err(Error::Param("no gate candidates to mix".into()));
    }
    if tape.shape(weights) != [feats.len()] {
        return Err(Error::Shape(format!("{} candidates but mixing weights {:?}", feats.len(), tape.shape(weights))));
    }
    let mut acc: Option<Var> = None;
    for (k, &f) in feats.iter().enumerate() {
        let w = tape.narrow(weights, 0, k, 1)?;
        let term = tape.mul(f, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Output bias favouring execution by `EXEC_MARGIN`.
fn exec_bias<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let h = EXEC_MARGIN / 2.0;
    Tensor::from_fn(shape, |i| T::lit(if i % 2 == 0 { h } else { -h }))
}

/// Two 2-way Gumbel-Softmax decisions per row of `logits: [B, 4]` with the
/// given noise `[B, 4]`. Returns `[B, 2]` execute weights (index 0 of each
/// pair).
pub fn sample_gates_with_noise<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    noise: Tensor<T>,
    tau: f64,
    hard: bool,
) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[1] != GATE_LOGITS {
        return Err(Error::Shape(format!("gate logits must be [B, 4], got {:?}", s)));
    }
    let b = s[0];
    let pairs = tape.reshape(logits, &[b, 2, 2])?;
    let noise = noise.reshape(&[b, 2, 2])?;
    let y = gumbel_softmax_with_noise(tape, pairs, noise, tau, hard)?;
    let exec = tape.narrow(y, 2, 0, 1)?;
    tape.reshape(exec, &[b, 2])
}

pub fn sample_gates<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    tau: f64,
    hard: bool,
    rng: &mut RngState,
) -> Result<Var> {
    let noise = gumbel_noise(tape.shape(logits), rng);
    sample_gates_with_noise(tape, logits, noise, tau, hard)
}

/// Gumbel noise for `[B, 4]` logits drawn once per group, so every member
/// of a group receives the same gate.
pub fn grouped_noise<T: Scalar>(groups: &[Vec<usize>], rng: &mut RngState) -> Tensor<T> {
    let b: usize = groups.iter().map(Vec::len).sum();
    let mut out = Tensor::zeros(&[b, GATE_LOGITS]);
    for g in groups {
        let draw: Vec<T> = (0..GATE_LOGITS).map(|_| T::lit(rng.gumbel())).collect();
        for &r in g {
            out.data_mut()[r * GATE_LOGITS..(r + 1) * GATE_LOGITS].copy_from_slice(&draw);
        }
    }
    out
}

/// Deterministic inference decisions: a block runs when its execute logit
/// is not below its skip logit.
pub fn decide<T: Scalar>(logits: &Tensor<T>) -> Vec<[bool; 2]> {
    logits.data().chunks(GATE_LOGITS).map(|r| [r[0] >= r[1], r[2] >= r[3]]).collect()
}

/// Argmax per row of `[L, K]` architecture logits, ties to the lowest index.
pub fn select_final_gates<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn column<T: Scalar>(tape: &mut Tape<T>, g: Var, j: usize) -> Result<Var> {
    let b = tape.shape(g)[0];
    let c = tape.narrow(g, 1, j, 1)?;
    tape.reshape(c, &[b, 1, 1])
}

/// `g * a + (1 - g) * z` with `g: [B, 1, 1]`.
pub(crate) fn blend<T: Scalar>(tape: &mut Tape<T>, g: Var, a: Var, z: Var) -> Result<Var> {
    let on = tape.mul(a, g)?;
    let og = tape.one_minus(g);
    let off = tape.mul(z, og)?;
    tape.add(on, off)
}

/// Gated layer with `g: [B, 2]`: each present block's residual output is
/// blended with its input by the matching gate. Every block is computed.
pub fn gated_block<T: Scalar>(
    pass: &mut Pass<'_, T>,
    layer: &EncoderLayer,
    head_dim: usize,
    z: Var,
    g: Var,
) -> Result<Var> {
    let mut z = z;
    if let Some(a) = &layer.attn {
        let y = attn_branch(pass, a, head_dim, z, None)?;
        let g0 = column(&mut pass.tape, g, 0)?;
        z = blend(&mut pass.tape, g0, y, z)?;
    }
    if let Some(f) = &layer.ffn {
        let y = ffn_branch(pass, f, z, None)?;
        let g1 = column(&mut pass.tape, g, 1)?;
        z = blend(&mut pass.tape, g1, y, z)?;
    }
    Ok(z)
}

/// Gated layer for hard decisions that only computes blocks for the rows
/// that execute them; skipped rows pass through untouched.
pub fn gated_block_fast<T: Scalar>(
    pass: &mut Pass<'_, T>,
    layer: &EncoderLayer,
    head_dim: usize,
    z: Var,
    decisions: &[[bool; 2]],
) -> Result<Var> {
    let mut z = z;
    if let Some(a) = &layer.attn {
        z = run_rows(pass, z, decisions, 0, |p, x| attn_branch(p, a, head_dim, x, None))?;
    }
    if let Some(f) = &layer.ffn {
        z = run_rows(pass, z, decisions, 1, |p, x| ffn_branch(p, f, x, None))?;
    }
    Ok(z)
}

fn run_rows<T: Scalar>(
    pass: &mut Pass<'_, T>,
    z: Var,
    decisions: &[[bool; 2]],
    slot: usize,
    f: impl FnOnce(&mut Pass<'_, T>, Var) -> Result<Var>,
) -> Result<Var> {
    let b = pass.tape.shape(z)[0];
    if decisions.len() != b {
        return Err(Error::Shape(format!("{} gate decisions for batch {b}", decisions.len())));
    }
    let (run, skip): (Vec<usize>, Vec<usize>) = (0..b).partition(|&i| decisions[i][slot]);
    if run.is_empty() {
        return Ok(z);
    }
    if skip.is_empty() {
        return f(pass, z);
    }
    let sub = pass.tape.select_rows(z, &run)?;
    let done = f(pass, sub)?;
    let kept = pass.tape.select_rows(z, &skip)?;
    pass.tape.merge_rows(&[(done, run), (kept, skip)])
}
