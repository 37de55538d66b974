#![allow(dead_code)]

use gatevit::model::{Control, Network};
use gatevit::params::{ParamKind, ParamStore, Pass};
use gatevit::vit::{Backbone, VitConfig};
use gatevit::{RngState, Tensor};

pub fn small_config(layers: usize, heads: usize, head_dim: usize, ffn: usize, image: usize, patch: usize) -> VitConfig {
    VitConfig {
        layers,
        heads,
        embed_dim: heads * head_dim,
        ffn_hidden: ffn,
        image_size: image,
        patch_size: patch,
        channels: 1,
        num_classes: 5,
    }
}

/// Overwrites every weight with N(0, std^2) noise (LayerNorm gains around 1).
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut RngState, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.kind(id) != ParamKind::Weight {
            continue;
        }
        let gain = store.name(id).ends_with("gain");
        for v in store.get_mut(id).data_mut() {
            *v = if gain { 1.0 + std * rng.normal() } else { std * rng.normal() };
        }
    }
}

pub fn images(rng: &mut RngState, b: usize, cfg: &VitConfig) -> Tensor<f64> {
    Tensor::from_fn(&[b, cfg.channels, cfg.image_size, cfg.image_size], |_| rng.normal())
}

pub fn logits(net: &Network<f64>, images: &Tensor<f64>, ctl: &Control<'_>, rng: &mut RngState) -> Tensor<f64> {
    let mut pass = Pass::new(&net.store, false, false);
    let out = net.forward(&mut pass, images, ctl, rng).unwrap();
    pass.tape.value(out.logits).clone()
}

pub fn tensors_equal(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x == y)
}

// ---- literal reference implementation, one sample at a time ----

fn mat(store: &ParamStore<f64>, id: gatevit::params::ParamId) -> (&[f64], usize) {
    let t = store.get(id);
    let cols = *t.shape().last().unwrap();
    (t.data(), cols)
}

/// `x[rows][k] * W[k][n] + b[n]`.
fn affine(x: &[Vec<f64>], w: &[f64], n: usize, b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = b[j];
                    for (k, &xv) in row.iter().enumerate() {
                        s += xv * w[k * n + j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn ln(x: &[Vec<f64>], g: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// One attention block on normalized tokens, heads laid out as contiguous
/// column groups.
pub fn naive_mhsa(store: &ParamStore<f64>, blk: &gatevit::vit::AttnBlock, dh: usize, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (wq, n) = mat(store, blk.wq);
    let q = affine(x, wq, n, store.get(blk.bq).data());
    let (wk, _) = mat(store, blk.wk);
    let k = affine(x, wk, n, store.get(blk.bk).data());
    let (wv, _) = mat(store, blk.wv);
    let v = affine(x, wv, n, store.get(blk.bv).data());
    let t = x.len();
    let mut cat = vec![vec![0.0; n]; t];
    for h in 0..blk.heads.len() {
        for i in 0..t {
            let mut s: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for v in s.iter_mut() {
                *v = (*v - m).exp() / z;
            }
            for c in 0..dh {
                cat[i][h * dh + c] = (0..t).map(|j| s[j] * v[j][h * dh + c]).sum();
            }
        }
    }
    let (wo, d) = mat(store, blk.wo);
    affine(&cat, wo, d, store.get(blk.bo).data())
}

pub fn naive_ffn(store: &ParamStore<f64>, blk: &gatevit::vit::FfnBlock, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (wi, n) = mat(store, blk.w_in);
    let hdn: Vec<Vec<f64>> =
        affine(x, wi, n, store.get(blk.b_in).data()).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    let (wo, d) = mat(store, blk.w_out);
    affine(&hdn, wo, d, store.get(blk.b_out).data())
}

/// Logits of one image `[ch*S*S]` through the uncompressed backbone.
pub fn naive_logits(cfg: &VitConfig, store: &ParamStore<f64>, bb: &Backbone, img: &[f64]) -> Vec<f64> {
    let (s, p, ch, d) = (cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim);
    let g = s / p;
    let mut patches = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut row = Vec::new();
            for c in 0..ch {
                for py in 0..p {
                    for px in 0..p {
                        row.push(img[(c * s + gy * p + py) * s + gx * p + px]);
                    }
                }
            }
            patches.push(row);
        }
    }
    let (pw, _) = mat(store, bb.patch_w);
    let emb = affine(&patches, pw, d, store.get(bb.patch_b).data());
    let cls = store.get(bb.cls).data().to_vec();
    let pos = store.get(bb.pos).data();
    let mut z: Vec<Vec<f64>> = std::iter::once(cls).chain(emb).collect();
    for (t, row) in z.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += pos[t * d + j];
        }
    }
    let dh = cfg.head_dim();
    for layer in &bb.layers {
        if let Some(a) = &layer.attn {
            let x = ln(&z, store.get(a.ln_gain).data(), store.get(a.ln_bias).data());
            z = add(&naive_mhsa(store, a, dh, &x), &z);
        }
        if let Some(f) = &layer.ffn {
            let x = ln(&z, store.get(f.ln_gain).data(), store.get(f.ln_bias).data());
            z = add(&naive_ffn(store, f, &x), &z);
        }
    }
    let c = ln(&z[..1], store.get(bb.norm_gain).data(), store.get(bb.norm_bias).data());
    let (hw, nc) = mat(store, bb.head_w);
    affine(&c, hw, nc, store.get(bb.head_b).data()).remove(0)
}
