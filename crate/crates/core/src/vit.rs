//! Miniature Vision Transformer: patch embedding, class token, learnable
//! positional embedding, pre-norm encoder layers and a linear head.
//!
//! Encoder blocks record which original heads and hidden channels they
//! still hold, so a physically pruned block and its masked counterpart
//! can be related.

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamKind, ParamStore, Pass};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

/// Activation between the two FFN projections.
pub const FFN_ACT: Activation = Activation::Gelu;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_hidden: usize,
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub num_classes: usize,
}

fn one() -> usize {
    1
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            embed_dim: 32,
            ffn_hidden: 64,
            image_size: 16,
            patch_size: 4,
            channels: 1,
            num_classes: 10,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads)));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnBlock {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    /// `[d, h*dh]` each.
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    /// `[h*dh, d]`.
    pub wo: ParamId,
    pub bo: ParamId,
    /// Original indices of the heads still present.
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnBlock {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    /// `[d, n]`.
    pub w_in: ParamId,
    pub b_in: ParamId,
    /// `[n, d]`.
    pub w_out: ParamId,
    pub b_out: ParamId,
    /// Original indices of the hidden channels still present.
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    /// Position in the unpruned network.
    pub index: usize,
    pub attn: Option<AttnBlock>,
    pub ffn: Option<FfnBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Backbone {
    pub fn build<T: Scalar>(cfg: &VitConfig, store: &mut ParamStore<T>, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut init = Init { rng };
        let w = ParamKind::Weight;
        let patch_w = store.add("embed.patch.w", w, init.linear(cfg.patch_dim(), d));
        let patch_b = store.add("embed.patch.b", w, Tensor::zeros(&[d]));
        let cls = store.add("embed.cls", w, Tensor::zeros(&[1, 1, d]));
        let pos = store.add("embed.pos", w, init.normal(&[1, cfg.tokens(), d], 0.02));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let attn = AttnBlock {
                ln_gain: store.add(p("attn.ln.gain"), w, Tensor::ones(&[d])),
                ln_bias: store.add(p("attn.ln.bias"), w, Tensor::zeros(&[d])),
                wq: store.add(p("attn.wq"), w, init.linear(d, d)),
                bq: store.add(p("attn.bq"), w, Tensor::zeros(&[d])),
                wk: store.add(p("attn.wk"), w, init.linear(d, d)),
                bk: store.add(p("attn.bk"), w, Tensor::zeros(&[d])),
                wv: store.add(p("attn.wv"), w, init.linear(d, d)),
                bv: store.add(p("attn.bv"), w, Tensor::zeros(&[d])),
                wo: store.add(p("attn.wo"), w, init.linear(d, d)),
                bo: store.add(p("attn.bo"), w, Tensor::zeros(&[d])),
                heads: (0..cfg.heads).collect(),
            };
            let n = cfg.ffn_hidden;
            let ffn = FfnBlock {
                ln_gain: store.add(p("ffn.ln.gain"), w, Tensor::ones(&[d])),
                ln_bias: store.add(p("ffn.ln.bias"), w, Tensor::zeros(&[d])),
                w_in: store.add(p("ffn.w_in"), w, init.linear(d, n)),
                b_in: store.add(p("ffn.b_in"), w, Tensor::zeros(&[n])),
                w_out: store.add(p("ffn.w_out"), w, init.linear(n, d)),
                b_out: store.add(p("ffn.b_out"), w, Tensor::zeros(&[d])),
                channels: (0..n).collect(),
            };
            layers.push(EncoderLayer { index: l, attn: Some(attn), ffn: Some(ffn) });
        }
        let norm_gain = store.add("head.ln.gain", w, Tensor::ones(&[d]));
        let norm_bias = store.add("head.ln.bias", w, Tensor::zeros(&[d]));
        let head_w = store.add("head.w", w, init.linear(d, cfg.num_classes));
        let head_b = store.add("head.b", w, Tensor::zeros(&[cfg.num_classes]));
        Ok(Self { patch_w, patch_b, cls, pos, layers, norm_gain, norm_bias, head_w, head_b })
    }
}

/// `[B, ch, S, S]` images to `[B, P, ch*p*p]` patch rows (row-major patch
/// order, channel-major inside a patch).
pub fn patchify<T: Scalar>(cfg: &VitConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let s = images.shape();
    let (ch, size, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if s.len() != 4 || s[1] != ch || s[2] != size || s[3] != size {
        return Err(Error::Shape(format!("images must be [B, {ch}, {size}, {size}], got {:?}", s)));
    }
    let b = s[0];
    let grid = size / p;
    let pd = cfg.patch_dim();
    let src = images.data();
    let mut out = vec![T::zero(); b * grid * grid * pd];
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = (bi * grid * grid + gy * grid + gx) * pd;
                let mut k = 0;
                for c in 0..ch {
                    for py in 0..p {
                        for px in 0..p {
                            let (y, x) = (gy * p + py, gx * p + px);
                            out[row + k] = src[((bi * ch + c) * size + y) * size + x];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, grid * grid, pd], out)
}

pub fn linear<T: Scalar>(pass: &mut Pass<'_, T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (w, b) = (pass.p(w), pass.p(b));
    let y = pass.tape.matmul(x, w)?;
    pass.tape.add(y, b)
}

/// Patch projection, class token prepended, positional embedding added:
/// `[B, T, d]`.
pub fn patch_embed<T: Scalar>(
    pass: &mut Pass<'_, T>,
    bb: &Backbone,
    cfg: &VitConfig,
    images: &Tensor<T>,
) -> Result<Var> {
    let patches = patchify(cfg, images)?;
    let b = patches.shape()[0];
    let x = pass.tape.constant(patches);
    let emb = linear(pass, x, bb.patch_w, bb.patch_b)?;
    let cls = pass.p(bb.cls);
    let d = cfg.embed_dim;
    let zeros = pass.tape.constant(Tensor::zeros(&[b, 1, d]));
    let cls = pass.tape.add(zeros, cls)?;
    let z = pass.tape.concat(&[cls, emb], 1)?;
    let pos = pass.p(bb.pos);
    pass.tape.add(z, pos)
}

/// Multi-head self-attention on already normalized `x: [B, T, d]`.
/// `keep: [h]` scales each head's output before the output projection.
pub fn mhsa<T: Scalar>(
    pass: &mut Pass<'_, T>,
    blk: &AttnBlock,
    head_dim: usize,
    x: Var,
    keep: Option<Var>,
) -> Result<Var> {
    let s = pass.tape.shape(x).to_vec();
    let (b, t) = (s[0], s[1]);
    let h = blk.heads.len();
    if h == 0 {
        return Err(Error::Shape("attention block without heads".into()));
    }
    let split = |pass: &mut Pass<'_, T>, w: ParamId, bias: ParamId| -> Result<Var> {
        let y = linear(pass, x, w, bias)?;
        let y = pass.tape.reshape(y, &[b, t, h, head_dim])?;
        let y = pass.tape.permute(y, &[0, 2, 1, 3])?;
        pass.tape.reshape(y, &[b * h, t, head_dim])
    };
    let q = split(pass, blk.wq, blk.bq)?;
    let k = split(pass, blk.wk, blk.bk)?;
    let v = split(pass, blk.wv, blk.bv)?;
    let kt = pass.tape.transpose(k)?;
    let scores = pass.tape.matmul(q, kt)?;
    let scores = pass.tape.scale(scores, T::lit(1.0 / (head_dim as f64).sqrt()));
    let attn = pass.tape.softmax(scores);
    let o = pass.tape.matmul(attn, v)?;
    let mut o = pass.tape.reshape(o, &[b, h, t, head_dim])?;
    if let Some(keep) = keep {
        let kr = pass.tape.reshape(keep, &[1, h, 1, 1])?;
        o = pass.tape.mul(o, kr)?;
    }
    let o = pass.tape.permute(o, &[0, 2, 1, 3])?;
    let o = pass.tape.reshape(o, &[b, t, h * head_dim])?;
    linear(pass, o, blk.wo, blk.bo)
}

/// Two projections with GeLU between; `keep: [n]` scales hidden channels.
pub fn ffn<T: Scalar>(pass: &mut Pass<'_, T>, blk: &FfnBlock, x: Var, keep: Option<Var>) -> Result<Var> {
    let hdn = linear(pass, x, blk.w_in, blk.b_in)?;
    let mut hdn = pass.tape.activation(hdn, FFN_ACT);
    if let Some(keep) = keep {
        hdn = pass.tape.mul(hdn, keep)?;
    }
    linear(pass, hdn, blk.w_out, blk.b_out)
}

fn layer_norm<T: Scalar>(pass: &mut Pass<'_, T>, z: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
    let (g, b) = (pass.p(gain), pass.p(bias));
    pass.tape.layer_norm(z, g, b, T::lit(LN_EPS))
}

/// `MHSA(LN(z)) + z`.
pub fn attn_branch<T: Scalar>(
    pass: &mut Pass<'_, T>,
    blk: &AttnBlock,
    head_dim: usize,
    z: Var,
    keep: Option<Var>,
) -> Result<Var> {
    let x = layer_norm(pass, z, blk.ln_gain, blk.ln_bias)?;
    let y = mhsa(pass, blk, head_dim, x, keep)?;
    pass.tape.add(y, z)
}

/// `FFN(LN(z)) + z`.
pub fn ffn_branch<T: Scalar>(pass: &mut Pass<'_, T>, blk: &FfnBlock, z: Var, keep: Option<Var>) -> Result<Var> {
    let x = layer_norm(pass, z, blk.ln_gain, blk.ln_bias)?;
    let y = ffn(pass, blk, x, keep)?;
    pass.tape.add(y, z)
}

/// Plain pre-norm layer; an absent block is the identity.
pub fn encoder_block<T: Scalar>(pass: &mut Pass<'_, T>, layer: &EncoderLayer, head_dim: usize, z: Var) -> Result<Var> {
    let mut z = z;
    if let Some(a) = &layer.attn {
        z = attn_branch(pass, a, head_dim, z, None)?;
    }
    if let Some(f) = &layer.ffn {
        z = ffn_branch(pass, f, z, None)?;
    }
    Ok(z)
}

/// Class token through the final LayerNorm and the linear head: `[B, C]`.
pub fn classify<T: Scalar>(pass: &mut Pass<'_, T>, bb: &Backbone, z: Var) -> Result<Var> {
    let s = pass.tape.shape(z).to_vec();
    let c = pass.tape.narrow(z, 1, 0, 1)?;
    let c = pass.tape.reshape(c, &[s[0], s[2]])?;
    let c = layer_norm(pass, c, bb.norm_gain, bb.norm_bias)?;
    linear(pass, c, bb.head_w, bb.head_b)
}

/// Uncompressed forward pass to logits.
pub fn forward<T: Scalar>(pass: &mut Pass<'_, T>, bb: &Backbone, cfg: &VitConfig, images: &Tensor<T>) -> Result<Var> {
    let mut z = patch_embed(pass, bb, cfg, images)?;
    for layer in &bb.layers {
        z = encoder_block(pass, layer, cfg.head_dim(), z)?;
    }
    classify(pass, bb, z)
}

impl AttnBlock {
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.ln_gain, self.ln_bias, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
    }
}

impl FfnBlock {
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.ln_gain, self.ln_bias, self.w_in, self.b_in, self.w_out, self.b_out]
    }
}

impl Backbone {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for l in &self.layers {
            if let Some(a) = &l.attn {
                ids.extend(a.param_ids());
            }
            if let Some(f) = &l.ffn {
                ids.extend(f.param_ids());
            }
        }
        ids.extend([self.norm_gain, self.norm_bias, self.head_w, self.head_b]);
        ids
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).numel()).sum()
    }
}
