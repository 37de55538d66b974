//! The compressible network: backbone, per-layer gate candidates, static
//! keep logits and gate-architecture logits, with one forward pass
//! parameterized by how each of them is used.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_plan, build_plan, GroupPlan, GroupStrategy};
use crate::autograd::Var;
use crate::compress::{
    derive_prune_plan, joint_block, prune_backbone, relax, BlendRule, LayerMasks, PrunePlan, StaticParams,
};
use crate::error::{Error, Result};
use crate::flops::{
    attn_prims, backbone_macs, count, ffn_prims, gate_prims, model_cost, other_macs, CostLayer, Counting, FlopsReport,
    RealizedLayer,
};
use crate::gating::{
    decide, gate_features, gated_block, gated_block_fast, grouped_noise, mix_candidates, sample_gates_with_noise,
    select_final_gates, GateCandidate, GateKind,
};
use crate::gumbel::gumbel_softmax;
use crate::params::{Init, ParamId, ParamKind, ParamStore, Pass};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{classify, patch_embed, Backbone, VitConfig};

/// Which compression mechanisms a network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Compression {
    /// Static pruning and dynamic skipping.
    Joint,
    Static,
    Dynamic,
    None,
}

impl Compression {
    pub fn has_static(self) -> bool {
        matches!(self, Compression::Joint | Compression::Static)
    }

    pub fn has_dynamic(self) -> bool {
        matches!(self, Compression::Joint | Compression::Dynamic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Joint search and compression, nothing removed yet.
    Search,
    /// Pruned, one gate network per layer.
    Finetune,
}

/// Everything about a network except tensor values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub config: VitConfig,
    pub compression: Compression,
    pub stage: Stage,
    pub backbone: Backbone,
    /// Candidates per backbone layer (same order); empty without dynamic
    /// gating, one after selection.
    pub gates: Vec<Vec<GateCandidate>>,
    pub statics: Option<StaticParams>,
    /// `[L, K]` candidate logits during the search.
    pub gate_arch: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub layout: Layout,
    pub store: ParamStore<T>,
}

/// Source of static keep weights.
#[derive(Debug, Clone, Copy)]
pub enum StaticMode<'a> {
    /// Soft Gumbel-Softmax samples of the logits.
    Relaxed,
    /// Hard 0/1 weights from a plan.
    Hard(&'a PrunePlan),
    Off,
}

/// Source of dynamic gates.
#[derive(Debug, Clone, Copy)]
pub enum GateMode<'a> {
    /// Gumbel-Softmax over group-averaged logits, noise shared per group.
    Sample { tau: f64, hard: bool, strategy: GroupStrategy },
    /// Deterministic decisions on logits averaged over the whole batch.
    Infer,
    /// Given decisions, indexed by original layer then row.
    Fixed(&'a [Vec<[bool; 2]>]),
    /// All blocks run, gate networks are not evaluated.
    Off,
}

#[derive(Debug, Clone, Copy)]
pub enum CandidateMode {
    /// Soft Gumbel-Softmax weights over the architecture logits.
    Mix { tau: f64 },
    /// Only the highest-scoring candidate.
    Argmax,
}

#[derive(Debug, Clone, Copy)]
pub struct Control<'a> {
    pub statics: StaticMode<'a>,
    pub gates: GateMode<'a>,
    pub candidates: CandidateMode,
    pub blend: BlendRule,
    /// Skip the computation of blocks whose hard gate is 0.
    pub fast: bool,
    /// Let gate-network gradients flow back into the backbone.
    pub gate_grad: bool,
}

impl Control<'_> {
    /// Deterministic batch-level inference on a finalized network.
    pub fn inference() -> Self {
        Self {
            statics: StaticMode::Off,
            gates: GateMode::Infer,
            candidates: CandidateMode::Argmax,
            blend: BlendRule::Effective,
            fast: true,
            gate_grad: false,
        }
    }
}

pub struct Output {
    pub logits: Var,
    /// Normalized model cost, scalar.
    pub cost: Var,
    /// Execute weights `[B, 2]` per backbone layer that has a gate.
    pub gates: Vec<Option<Var>>,
    /// Hard decisions per backbone layer when they are known.
    pub decisions: Vec<Option<Vec<[bool; 2]>>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(cfg: &VitConfig, compression: Compression, tau_static: f64, rng: &mut RngState) -> Result<Self> {
        Self::with_candidates(cfg, compression, tau_static, &GateKind::ALL, rng)
    }

    /// Searches gates among `candidates` only; a single candidate is used
    /// as is, with no architecture logits.
    pub fn with_candidates(
        cfg: &VitConfig,
        compression: Compression,
        tau_static: f64,
        candidates: &[GateKind],
        rng: &mut RngState,
    ) -> Result<Self> {
        if compression.has_dynamic() && candidates.is_empty() {
            return Err(Error::Param("dynamic compression needs at least one gate candidate".into()));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::build(cfg, &mut store, rng)?;
        let mut gates = vec![Vec::new(); cfg.layers];
        let mut gate_arch = None;
        if compression.has_dynamic() {
            for (l, slot) in gates.iter_mut().enumerate() {
                *slot = candidates
                    .iter()
                    .map(|&k| {
                        let name = serde_json::to_value(k).unwrap();
                        let prefix = format!("gates.{l}.{}", name.as_str().unwrap());
                        GateCandidate::build(k, cfg.embed_dim, &mut store, rng, &prefix)
                    })
                    .collect();
            }
            if candidates.len() > 1 {
                let mut init = Init { rng };
                let logits = init.normal(&[cfg.layers, candidates.len()], crate::compress::ALPHA_INIT_NOISE);
                gate_arch = Some(store.add("gates.arch", ParamKind::Arch, logits));
            }
        }
        let statics = compression.has_static().then(|| StaticParams::build(cfg, &mut store, rng, tau_static));
        Ok(Self {
            layout: Layout {
                config: cfg.clone(),
                compression,
                stage: Stage::Search,
                backbone,
                gates,
                statics,
                gate_arch,
            },
            store,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.layout.config
    }

    pub fn report(&self) -> FlopsReport {
        FlopsReport::new(self.config())
    }

    /// Argmax candidate per original layer, if gates are searched.
    pub fn selected_gates(&self) -> Option<Vec<usize>> {
        self.layout.gate_arch.map(|id| select_final_gates(self.store.get(id)))
    }

    pub fn prune_plan(&self) -> PrunePlan {
        match &self.layout.statics {
            Some(sp) => derive_prune_plan(&self.store, sp),
            None => PrunePlan::keep_all(self.config()),
        }
    }

    pub fn backbone_params(&self) -> usize {
        self.layout.backbone.param_count(&self.store)
    }

    pub fn gate_params(&self) -> usize {
        self.layout.gates.iter().flatten().flat_map(|c| c.param_ids()).map(|id| self.store.get(id).numel()).sum()
    }

    /// Images must be `[B, ch, S, S]`.
    pub fn forward(
        &self,
        pass: &mut Pass<'_, T>,
        images: &Tensor<T>,
        ctl: &Control<'_>,
        rng: &mut RngState,
    ) -> Result<Output> {
        let cfg = &self.layout.config;
        let hd = cfg.head_dim();
        let mut z = patch_embed(pass, &self.layout.backbone, cfg, images)?;
        let b = images.shape()[0];

        let plan: GroupPlan = match ctl.gates {
            GateMode::Sample { strategy, .. } => build_plan(b, strategy, rng)?,
            _ => build_plan(b, GroupStrategy::Batch, rng)?,
        };
        let relaxed = match (ctl.statics, &self.layout.statics) {
            (StaticMode::Relaxed, Some(sp)) => Some(relax(pass, sp, rng)?),
            (StaticMode::Relaxed, None) => {
                return Err(Error::Param("relaxed static masks need static logits".into()));
            }
            _ => None,
        };
        let arch_scores = self.layout.gate_arch.map(|id| select_final_gates(self.store.get(id)));
        let mix = match (ctl.candidates, self.layout.gate_arch, &ctl.gates) {
            (_, _, GateMode::Off) => None,
            (CandidateMode::Mix { tau }, Some(id), _) => {
                let v = pass.p(id);
                Some(gumbel_softmax(&mut pass.tape, v, tau, false, rng)?)
            }
            _ => None,
        };

        let mut costs = Vec::new();
        let mut gate_vars = Vec::new();
        let mut all_decisions = Vec::new();
        for (i, layer) in self.layout.backbone.layers.iter().enumerate() {
            let l = layer.index;
            let masks = match ctl.statics {
                StaticMode::Relaxed => relaxed.unwrap().layer(&mut pass.tape, l)?,
                StaticMode::Hard(p) => p.layer_masks(&mut pass.tape, l)?,
                StaticMode::Off => LayerMasks::default(),
            };
            let cands = &self.layout.gates[i];
            let mut g = None;
            let mut decisions = None;
            let mut gate_macs = Vec::new();
            let mut mix_row = None;
            if !cands.is_empty() && !matches!(ctl.gates, GateMode::Off) {
                let z = if ctl.gate_grad { z } else { pass.tape.detach(z) };
                let logits = match (mix, cands.len()) {
                    (Some(w), k) if k > 1 => {
                        let feats = cands.iter().map(|c| gate_features(pass, c, z)).collect::<Result<Vec<_>>>()?;
                        let row = pass.tape.narrow(w, 0, l, 1)?;
                        let row = pass.tape.reshape(row, &[k])?;
                        mix_row = Some(row);
                        gate_macs = cands.iter().map(|c| count(&gate_prims(cfg, c.kind), Counting::Product)).collect();
                        mix_candidates(&mut pass.tape, &feats, row)?
                    }
                    (_, 1) => {
                        gate_macs = vec![count(&gate_prims(cfg, cands[0].kind), Counting::Product)];
                        gate_features(pass, &cands[0], z)?
                    }
                    _ => {
                        let k = arch_scores.as_ref().map_or(0, |s| s[l]);
                        gate_macs = vec![count(&gate_prims(cfg, cands[k].kind), Counting::Product)];
                        gate_features(pass, &cands[k], z)?
                    }
                };
                let logits = apply_plan(&mut pass.tape, logits, &plan)?;
                match ctl.gates {
                    GateMode::Sample { tau, hard, .. } => {
                        let noise = grouped_noise(&plan.groups(), rng);
                        g = Some(sample_gates_with_noise(&mut pass.tape, logits, noise, tau, hard)?);
                    }
                    GateMode::Infer => decisions = Some(decide(pass.tape.value(logits))),
                    GateMode::Fixed(d) => {
                        let d = d.get(l).ok_or_else(|| Error::Shape(format!("no fixed gates for layer {l}")))?;
                        if d.len() != b {
                            return Err(Error::Shape(format!("{} fixed gates for batch {b}", d.len())));
                        }
                        decisions = Some(d.clone());
                    }
                    GateMode::Off => unreachable!(),
                }
                if let Some(d) = &decisions {
                    let bits: Vec<T> =
                        d.iter().flat_map(|r| r.iter().map(|&x| if x { T::one() } else { T::zero() })).collect();
                    g = Some(pass.tape.constant(Tensor::new(vec![b, 2], bits)?));
                }
            }

            let plain = matches!(ctl.statics, StaticMode::Off);
            z = match (&decisions, plain, ctl.fast) {
                (Some(d), true, true) => gated_block_fast(pass, layer, hd, z, d)?,
                (_, true, _) if g.is_some() => gated_block(pass, layer, hd, z, g.unwrap())?,
                _ => joint_block(pass, layer, hd, z, &masks, g, ctl.blend)?,
            };

            costs.push(CostLayer {
                attn_macs: layer.attn.as_ref().map_or(0, |a| count(&attn_prims(cfg, a.heads.len()), Counting::Product)),
                ffn_macs: layer.ffn.as_ref().map_or(0, |f| count(&ffn_prims(cfg, f.channels.len()), Counting::Product)),
                gate_macs,
                attn_keep: masks.attn.map(|p| p.0),
                ffn_keep: masks.ffn.map(|p| p.0),
                head_keep: masks.heads,
                channel_keep: masks.channels,
                gates: g,
                mix: mix_row,
            });
            gate_vars.push(g);
            all_decisions.push(decisions);
        }
        let logits = classify(pass, &self.layout.backbone, z)?;
        let cost = model_cost(&mut pass.tape, &costs, other_macs(cfg), backbone_macs(cfg))?;
        Ok(Output { logits, cost, gates: gate_vars, decisions: all_decisions })
    }

    /// Per-sample executed structure given hard decisions per backbone
    /// layer (absent decisions mean both blocks run).
    pub fn realized_layers(&self, decisions: &[Option<Vec<[bool; 2]>>], row: usize) -> Vec<RealizedLayer> {
        self.layout
            .backbone
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let cands = &self.layout.gates[i];
                let gate = match cands.len() {
                    0 => None,
                    1 => Some(cands[0].kind),
                    _ => self.selected_gates().map(|s| cands[s[layer.index]].kind),
                };
                let exec = decisions.get(i).and_then(|d| d.as_ref()).map_or([true, true], |d| d[row]);
                RealizedLayer {
                    heads: layer.attn.as_ref().map_or(0, |a| a.heads.len()),
                    channels: layer.ffn.as_ref().map_or(0, |f| f.channels.len()),
                    gate: if decisions.get(i).is_some_and(|d| d.is_some()) { gate } else { None },
                    exec,
                }
            })
            .collect()
    }

    /// Prunes by the static logits, keeps the highest-scoring gate
    /// candidate per surviving layer, and drops all search parameters.
    pub fn finalize(&self) -> Result<Network<T>> {
        let cfg = self.config();
        let plan = self.prune_plan();
        let mut store = ParamStore::new();
        let backbone = prune_backbone(cfg, &self.store, &self.layout.backbone, &plan, &mut store)?;
        let selected = self.selected_gates();
        let mut gates = Vec::with_capacity(backbone.layers.len());
        for layer in &backbone.layers {
            let pos = self.layout.backbone.layers.iter().position(|x| x.index == layer.index).unwrap();
            let cands = &self.layout.gates[pos];
            if cands.is_empty() {
                gates.push(Vec::new());
                continue;
            }
            let k = if cands.len() == 1 { 0 } else { selected.as_ref().unwrap()[layer.index] };
            gates.push(vec![copy_candidate(&self.store, &mut store, &cands[k])]);
        }
        Ok(Network {
            layout: Layout {
                config: cfg.clone(),
                compression: self.layout.compression,
                stage: Stage::Finetune,
                backbone,
                gates,
                statics: None,
                gate_arch: None,
            },
            store,
        })
    }
}

fn copy_candidate<T: Scalar>(src: &ParamStore<T>, dst: &mut ParamStore<T>, c: &GateCandidate) -> GateCandidate {
    let mut cp = |id: ParamId| {
        let e = src.entry(id);
        dst.add(e.name.clone(), e.kind, e.value.clone())
    };
    GateCandidate {
        kind: c.kind,
        w1: cp(c.w1),
        b1: cp(c.b1),
        norm: c.norm.as_ref().map(|n| crate::gating::GateNorm {
            gain: cp(n.gain),
            bias: cp(n.bias),
            running: n.running.map(|(m, v)| (cp(m), cp(v))),
        }),
        out: c.out.map(|(w, b)| (cp(w), cp(b))),
    }
}
