use serde::{Deserialize, Serialize};

use super::{MatMulMode, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_offsets, broadcast_shape, gemm, numel, strided_offsets, strides, Tensor};

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    /// tanh approximation: `0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))`.
    Gelu,
    /// `0.5x(1 + erf(x/sqrt(2)))`.
    GeluErf,
}

pub(crate) const GELU_C: f64 = 0.044_715;
pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
                T::lit(0.5) * x * (T::one() + inner.tanh())
            }
            Activation::GeluErf => T::lit(0.5) * x * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf()),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let c = T::lit(GELU_C);
                let s = T::lit(SQRT_2_OVER_PI);
                let t = (s * (x + c * x * x * x)).tanh();
                T::lit(0.5) * (T::one() + t)
                    + T::lit(0.5) * x * (T::one() - t * t) * s * (T::one() + T::lit(3.0) * c * x * x)
            }
            Activation::GeluErf => {
                let cdf = T::lit(0.5) * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf());
                let pdf = (-(x * x) / T::lit(2.0)).exp() / T::lit((2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let n = numel(&out_shape);
        let data: Vec<T> = match (broadcast_offsets(&out_shape, &sa), broadcast_offsets(&out_shape, &sb)) {
            (None, None) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(ob)) => (0..n).map(|i| f(va[i], vb[ob[i]])).collect(),
            (Some(oa), None) => (0..n).map(|i| f(va[oa[i]], vb[i])).collect(),
            (Some(oa), Some(ob)) => (0..n).map(|i| f(va[oa[i]], vb[ob[i]])).collect(),
        };
        Ok((Tensor::new(out_shape, data)?, self.rg(&[a, b])))
    }

    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Broadcasting `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Broadcasting `a * b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// Matrix product over the last two axes. Either side may be a plain
    /// matrix shared across the other side's leading (batch) axes;
    /// otherwise the leading axes must match.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank >= 2, got {:?} x {:?}", sa, sb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims differ: {:?} x {:?}", sa, sb)));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let (mode, out_shape, data) = if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            let mut out = vec![T::zero(); rows * n];
            gemm(va, vb, &mut out, rows, k, n);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (MatMulMode::SharedRight { rows }, shape, out)
        } else if sa.len() == 2 {
            let batch = numel(&sb[..sb.len() - 2]);
            let mut out = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                gemm(va, &vb[bi * k * n..(bi + 1) * k * n], &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
            let mut shape = sb[..sb.len() - 2].to_vec();
            shape.extend([m, n]);
            (MatMulMode::SharedLeft { batch }, shape, out)
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::Shape(format!("matmul batch dims differ: {:?} x {:?}", sa, sb)));
            }
            let batch = numel(&sa[..sa.len() - 2]);
            let mut out = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                gemm(
                    &va[bi * m * k..(bi + 1) * m * k],
                    &vb[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = sa[..sa.len() - 2].to_vec();
            shape.extend([m, n]);
            (MatMulMode::Batched { batch }, shape, out)
        };
        let batch_rows = match mode {
            MatMulMode::SharedRight { rows } => rows as u64,
            MatMulMode::SharedLeft { batch } | MatMulMode::Batched { batch } => (batch * m) as u64,
        };
        self.add_macs(batch_rows * (k * n) as u64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::MatMul { a, b, mode, m, k, n }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {:?}", s)));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for bi in 0..batch {
            let base = bi * rows * cols;
            for c in 0..cols {
                for r in 0..rows {
                    out.push(src[base + r * cols + c]);
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { x, rows, cols }, rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("bad permutation {:?} for shape {:?}", perm, s)));
        }
        let st = strides(&s);
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let eff: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let src = self.value(x).data();
        let data = strided_offsets(&out_shape, &eff).into_iter().map(|o| src[o]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!("narrow({axis}, {start}, {len}) out of range for {:?}", s)));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {:?}", first)));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat shapes {:?} vs {:?}", first, s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Gathers rows along axis 0.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::Shape(format!("row index out of range for {:?}", s)));
        }
        let t = self.value(x).select_rows(rows);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// Inverse of a set of `select_rows`: part `i` supplies the listed
    /// output rows. Every output row must be covered exactly once.
    pub fn merge_rows(&mut self, parts: &[(Var, Vec<usize>)]) -> Result<Var> {
        let total: usize = parts.iter().map(|(_, r)| r.len()).sum();
        let tail = self.shape(parts[0].0)[1..].to_vec();
        let row = numel(&tail);
        let mut covered = vec![false; total];
        let mut data = vec![T::zero(); total * row];
        for (v, rows) in parts {
            let s = self.shape(*v);
            if s[0] != rows.len() || s[1..] != tail[..] {
                return Err(Error::Shape(format!("merge part {:?} does not match {} rows", s, rows.len())));
            }
            let src = self.value(*v).data();
            for (i, &r) in rows.iter().enumerate() {
                if r >= total || std::mem::replace(&mut covered[r], true) {
                    return Err(Error::Shape(format!("row {r} duplicated or out of range")));
                }
                data[r * row..(r + 1) * row].copy_from_slice(&src[i * row..(i + 1) * row]);
            }
        }
        let mut shape = vec![total];
        shape.extend(tail);
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::new(shape, data)?, Op::MergeRows { parts: parts.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b) / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis(&self, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<T>)> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {:?}", s)));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok((shape, out))
    }

    /// Sum over `axis`, which is removed.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis(x, axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    /// Mean over `axis`, which is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut out) = self.reduce_axis(x, axis)?;
        let dim = T::from_usize(self.shape(x)[axis]).unwrap();
        for v in &mut out {
            *v /= dim;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = softmax_last(self.value(x));
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Normalizes the last axis, then applies `gain` and `bias` (both of
    /// that axis' length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!("layer_norm affine params must be [{d}]")));
        }
        let rows = numel(&s) / d;
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Tensor::new(s, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Batch normalization of `x: [B, C, ...]` over every axis but 1.
    ///
    /// In training mode the batch statistics are used (variance floored by
    /// `eps`, so a batch of one is allowed) and returned for the caller to
    /// fold into running estimates. In eval mode `running` supplies them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("batch_norm needs [B, C, ...], got {:?}", s)));
        }
        let (bsz, c) = (s[0], s[1]);
        if bsz == 0 {
            return Err(Error::Shape("batch_norm on an empty batch".into()));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Shape(format!("batch_norm affine params must be [{c}]")));
        }
        let rest = numel(&s[2..]);
        let count = T::from_usize(bsz * rest).unwrap();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let train = running.is_none();
        let (means, vars) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut means = vec![T::zero(); c];
                let mut vars = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for bi in 0..bsz {
                        let base = (bi * c + ch) * rest;
                        acc = src[base..base + rest].iter().fold(acc, |a, &v| a + v);
                    }
                    let mean = acc / count;
                    let mut sq = T::zero();
                    for bi in 0..bsz {
                        let base = (bi * c + ch) * rest;
                        sq = src[base..base + rest].iter().fold(sq, |a, &v| a + (v - mean) * (v - mean));
                    }
                    means[ch] = mean;
                    vars[ch] = sq / count;
                }
                (means, vars)
            }
        };
        let rstd: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let base = (bi * c + ch) * rest;
                for r in 0..rest {
                    let xh = (src[base + r] - means[ch]) * rstd[ch];
                    xhat[base + r] = xh;
                    out[base + r] = xh * g[ch] + b[ch];
                }
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let v = self.push(Tensor::new(s, out)?, Op::BatchNorm { x, gain, bias, xhat, rstd, train }, rg);
        Ok((v, if train { Some((means, vars)) } else { None }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(&[x]);
        self.push(t, Op::Act { x, kind }, rg)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// `logits: [B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!("cross_entropy logits {:?} vs {} labels", s, labels.len())));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label: bad, classes });
        }
        let probs = softmax_last(self.value(logits));
        let src = self.value(logits).data();
        let mut total = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln() + m;
            total += lse - row[l];
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs: probs.into_data() },
            rg,
        ))
    }

    /// One-hot of the last-axis argmax (ties to the lowest index) in the
    /// forward pass; identity gradient in the backward pass.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let t = one_hot_argmax(self.value(soft));
        let rg = self.rg(&[soft]);
        self.push(t, Op::StraightThrough(soft), rg)
    }

    /// Replaces every row of `x` (axis 0) by the mean of its group.
    /// `groups` must partition the rows.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let bsz = s[0];
        let mut seen = vec![false; bsz];
        for &r in groups.iter().flatten() {
            if r >= bsz || std::mem::replace(&mut seen[r], true) {
                return Err(Error::Shape(format!("group plan does not partition {bsz} rows")));
            }
        }
        if seen.iter().any(|&c| !c) {
            return Err(Error::Shape(format!("group plan does not cover {bsz} rows")));
        }
        let row = numel(&s[1..]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for g in groups {
            let n = T::from_usize(g.len()).unwrap();
            let mut acc = vec![T::zero(); row];
            for &r in g {
                for (a, &v) in acc.iter_mut().zip(&src[r * row..(r + 1) * row]) {
                    *a += v;
                }
            }
            for a in &mut acc {
                *a /= n;
            }
            // constant columns keep their value bit for bit
            let first = &src[g[0] * row..(g[0] + 1) * row];
            for (j, a) in acc.iter_mut().enumerate() {
                if g.iter().all(|&r| src[r * row + j] == first[j]) {
                    *a = first[j];
                }
            }
            for &r in g {
                out[r * row..(r + 1) * row].copy_from_slice(&acc);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(s, out)?, Op::GroupMean { x, groups: groups.to_vec() }, rg))
    }
}

pub(crate) fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let d = s.last().copied().unwrap_or(1);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for (orow, row) in out.chunks_mut(d).zip(src.chunks(d)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut z = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

pub(crate) fn one_hot_argmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.shape().last().copied().unwrap_or(1);
    let mut out = vec![T::zero(); x.numel()];
    for (orow, row) in out.chunks_mut(d).zip(x.data().chunks(d)) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        orow[best] = T::one();
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
