//! Backward rules, one per [`Op`] variant.

use super::{MatMulMode, Op, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_offsets, gemm_nt, gemm_tn, numel, strided_offsets, strides};

fn accumulate<T: Scalar>(tape: &Tape<T>, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    if !tape.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Sums an output-shaped gradient back onto a broadcast input.
fn unbroadcast<T: Scalar>(tape: &Tape<T>, v: Var, out_shape: &[usize], g: impl Iterator<Item = T>) -> Vec<T> {
    let in_shape = tape.shape(v);
    match broadcast_offsets(out_shape, in_shape) {
        None => g.collect(),
        Some(offs) => {
            let mut acc = vec![T::zero(); numel(in_shape)];
            for (o, gv) in offs.into_iter().zip(g) {
                acc[o] += gv;
            }
            acc
        }
    }
}

fn gather_broadcast<T: Scalar>(tape: &Tape<T>, v: Var, out_shape: &[usize]) -> Vec<T> {
    let src = tape.value(v).data();
    match broadcast_offsets(out_shape, tape.shape(v)) {
        None => src.to_vec(),
        Some(offs) => offs.into_iter().map(|o| src[o]).collect(),
    }
}

pub(super) fn propagate<T: Scalar>(tape: &Tape<T>, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &tape.nodes[i];
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let ga = unbroadcast(tape, *a, out_shape, g.iter().copied());
            let gb = unbroadcast(tape, *b, out_shape, g.iter().copied());
            accumulate(tape, grads, *a, ga);
            accumulate(tape, grads, *b, gb);
        }
        Op::Sub(a, b) => {
            let ga = unbroadcast(tape, *a, out_shape, g.iter().copied());
            let gb = unbroadcast(tape, *b, out_shape, g.iter().map(|&v| -v));
            accumulate(tape, grads, *a, ga);
            accumulate(tape, grads, *b, gb);
        }
        Op::Mul(a, b) => {
            if tape.requires_grad(*a) {
                let bv = gather_broadcast(tape, *b, out_shape);
                let ga = unbroadcast(tape, *a, out_shape, g.iter().zip(bv).map(|(&x, y)| x * y));
                accumulate(tape, grads, *a, ga);
            }
            if tape.requires_grad(*b) {
                let av = gather_broadcast(tape, *a, out_shape);
                let gb = unbroadcast(tape, *b, out_shape, g.iter().zip(av).map(|(&x, y)| x * y));
                accumulate(tape, grads, *b, gb);
            }
        }
        Op::Scale(x, c) => accumulate(tape, grads, *x, g.iter().map(|&v| v * *c).collect()),
        Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => accumulate(tape, grads, *x, g.to_vec()),
        Op::MatMul { a, b, mode, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let va = tape.value(*a).data();
            let vb = tape.value(*b).data();
            let (need_a, need_b) = (tape.requires_grad(*a), tape.requires_grad(*b));
            let mut ga = need_a.then(|| vec![T::zero(); va.len()]);
            let mut gb = need_b.then(|| vec![T::zero(); vb.len()]);
            match *mode {
                MatMulMode::SharedRight { rows } => {
                    if let Some(ga) = ga.as_mut() {
                        gemm_nt(g, vb, ga, rows, n, k);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm_tn(va, g, gb, k, rows, n);
                    }
                }
                MatMulMode::SharedLeft { batch } => {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &vb[bi * k * n..(bi + 1) * k * n];
                        if let Some(ga) = ga.as_mut() {
                            gemm_nt(gs, bs, ga, m, n, k);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gemm_tn(va, gs, &mut gb[bi * k * n..(bi + 1) * k * n], k, m, n);
                        }
                    }
                }
                MatMulMode::Batched { batch } => {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        if let Some(ga) = ga.as_mut() {
                            gemm_nt(
                                gs,
                                &vb[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        if let Some(gb) = gb.as_mut() {
                            gemm_tn(
                                &va[bi * m * k..(bi + 1) * m * k],
                                gs,
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                }
            }
            if let Some(ga) = ga {
                accumulate(tape, grads, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(tape, grads, *b, gb);
            }
        }
        Op::Transpose { x, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            let mut gx = vec![T::zero(); g.len()];
            let batch = g.len() / (rows * cols).max(1);
            for bi in 0..batch {
                let base = bi * rows * cols;
                for c in 0..cols {
                    for r in 0..rows {
                        gx[base + r * cols + c] = g[base + c * rows + r];
                    }
                }
            }
            accumulate(tape, grads, *x, gx);
        }
        Op::Permute { x, perm } => {
            let in_shape = tape.shape(*x);
            let st = strides(in_shape);
            let eff: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
            let mut gx = vec![T::zero(); g.len()];
            for (o, &gv) in strided_offsets(out_shape, &eff).into_iter().zip(g) {
                gx[o] = gv;
            }
            accumulate(tape, grads, *x, gx);
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = tape.shape(*x);
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let dim = in_shape[*axis];
            let len = out_shape[*axis];
            let mut gx = vec![T::zero(); numel(in_shape)];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(tape, grads, *x, gx);
        }
        Op::Concat { xs, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0;
            for &v in xs {
                let d = tape.shape(v)[*axis];
                let mut gx = Vec::with_capacity(outer * d * inner);
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    gx.extend_from_slice(&g[src..src + d * inner]);
                }
                accumulate(tape, grads, v, gx);
                offset += d;
            }
        }
        Op::SelectRows { x, rows } => {
            let in_shape = tape.shape(*x);
            let row = numel(&in_shape[1..]);
            let mut gx = vec![T::zero(); numel(in_shape)];
            for (i, &r) in rows.iter().enumerate() {
                for (d, &s) in gx[r * row..(r + 1) * row].iter_mut().zip(&g[i * row..(i + 1) * row]) {
                    *d += s;
                }
            }
            accumulate(tape, grads, *x, gx);
        }
        Op::MergeRows { parts } => {
            let row = numel(&out_shape[1..]);
            for (v, rows) in parts {
                let mut gx = Vec::with_capacity(rows.len() * row);
                for &r in rows {
                    gx.extend_from_slice(&g[r * row..(r + 1) * row]);
                }
                accumulate(tape, grads, *v, gx);
            }
        }
        Op::Sum(x) => {
            let n = tape.value(*x).numel();
            accumulate(tape, grads, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = tape.value(*x).numel();
            accumulate(tape, grads, *x, vec![g[0] / T::from_usize(n).unwrap(); n]);
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let in_shape = tape.shape(*x);
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[*axis + 1..].iter().product();
            let dim = in_shape[*axis];
            let scale = match node.op {
                Op::MeanAxis { .. } => T::one() / T::from_usize(dim).unwrap(),
                _ => T::one(),
            };
            let mut gx = vec![T::zero(); numel(in_shape)];
            for o in 0..outer {
                for d in 0..dim {
                    for i in 0..inner {
                        gx[(o * dim + d) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate(tape, grads, *x, gx);
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let d = out_shape.last().copied().unwrap_or(1);
            let mut gx = vec![T::zero(); y.len()];
            for ((gr, yr), gxr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                for ((o, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(tape, grads, *x, gx);
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = *out_shape.last().unwrap();
            let gn = tape.value(*gain).data();
            let dn = T::from_usize(d).unwrap();
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            for (r, &rs) in rstd.iter().enumerate() {
                let gr = &g[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..d {
                    let dxh = gr[j] * gn[j];
                    m1 += dxh;
                    m2 += dxh * xr[j];
                    gg[j] += gr[j] * xr[j];
                    gb[j] += gr[j];
                }
                m1 /= dn;
                m2 /= dn;
                for j in 0..d {
                    gx[r * d + j] = rs * (gr[j] * gn[j] - m1 - xr[j] * m2);
                }
            }
            accumulate(tape, grads, *x, gx);
            accumulate(tape, grads, *gain, gg);
            accumulate(tape, grads, *bias, gb);
        }
        Op::BatchNorm { x, gain, bias, xhat, rstd, train } => {
            let (bsz, c) = (out_shape[0], out_shape[1]);
            let rest = numel(&out_shape[2..]);
            let gn = tape.value(*gain).data();
            let count = T::from_usize(bsz * rest).unwrap();
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for ch in 0..c {
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for bi in 0..bsz {
                    let base = (bi * c + ch) * rest;
                    for r in base..base + rest {
                        let dxh = g[r] * gn[ch];
                        m1 += dxh;
                        m2 += dxh * xhat[r];
                        gg[ch] += g[r] * xhat[r];
                        gb[ch] += g[r];
                    }
                }
                m1 /= count;
                m2 /= count;
                for bi in 0..bsz {
                    let base = (bi * c + ch) * rest;
                    for r in base..base + rest {
                        let dxh = g[r] * gn[ch];
                        gx[r] = if *train { rstd[ch] * (dxh - m1 - xhat[r] * m2) } else { rstd[ch] * dxh };
                    }
                }
            }
            accumulate(tape, grads, *x, gx);
            accumulate(tape, grads, *gain, gg);
            accumulate(tape, grads, *bias, gb);
        }
        Op::Act { x, kind } => {
            let xv = tape.value(*x).data();
            let gx = g.iter().zip(xv).map(|(&gv, &v)| gv * kind.derivative(v)).collect();
            accumulate(tape, grads, *x, gx);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = tape.shape(*logits)[1];
            let scale = g[0] / T::from_usize(labels.len()).unwrap();
            let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * c + l] -= scale;
            }
            accumulate(tape, grads, *logits, gx);
        }
        Op::GroupMean { x, groups } => {
            let row = numel(&out_shape[1..]);
            let mut gx = vec![T::zero(); g.len()];
            for grp in groups {
                let n = T::from_usize(grp.len()).unwrap();
                let mut acc = vec![T::zero(); row];
                for &r in grp {
                    for (a, &v) in acc.iter_mut().zip(&g[r * row..(r + 1) * row]) {
                        *a += v;
                    }
                }
                for &r in grp {
                    for (o, &a) in gx[r * row..(r + 1) * row].iter_mut().zip(&acc) {
                        *o = a / n;
                    }
                }
            }
            accumulate(tape, grads, *x, gx);
        }
    }
}
