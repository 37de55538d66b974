//! Two-stage optimization: joint search and compression, explicit pruning
//! with gate selection, then fine-tuning under dynamic gating.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::compress::BlendRule;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::{realized_cost, resource_loss};
use crate::gating::BN_MOMENTUM;
use crate::model::{CandidateMode, Compression, Control, GateMode, Network, Stage, StaticMode};
use crate::optim::{cosine_lr, AdamW};
use crate::params::{update_running_stats, Pass};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_res: f64,
    pub l_total: f64,
    pub model_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    /// Mean of the step costs of this epoch.
    pub train_cost: f64,
    pub eval: Option<EvalResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Mean relaxed cost over the last epoch of `stage`.
    pub fn final_cost(&self, stage: u8) -> Option<f64> {
        self.epochs.iter().rev().find(|e| e.stage == stage).map(|e| e.train_cost)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean realized cost per sample.
    pub model_cost: f64,
    /// Per backbone layer, fraction of samples running the attention and
    /// FFN blocks.
    pub exec_rates: Vec<[f64; 2]>,
}

/// Receives every log record as it is produced.
pub trait LogSink {
    fn step(&mut self, _s: &StepLog) {}
    fn epoch(&mut self, _e: &EpochLog) {}
}

pub struct NoLog;
impl LogSink for NoLog {}

/// Writes records as line-delimited JSON.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write> LogSink for JsonLines<W> {
    fn step(&mut self, s: &StepLog) {
        let _ = writeln!(self.0, "{}", serde_json::json!({ "kind": "step", "record": s }));
    }

    fn epoch(&mut self, e: &EpochLog) {
        let _ = writeln!(self.0, "{}", serde_json::json!({ "kind": "epoch", "record": e }));
    }
}

pub fn stage_control(net_stage: Stage, compression: Compression, cfg: &TrainConfig) -> Control<'static> {
    let gates = if compression.has_dynamic() {
        GateMode::Sample { tau: cfg.tau_skip, hard: true, strategy: cfg.gate_strategy }
    } else {
        GateMode::Off
    };
    let statics =
        if net_stage == Stage::Search && compression.has_static() { StaticMode::Relaxed } else { StaticMode::Off };
    Control {
        statics,
        gates,
        candidates: CandidateMode::Mix { tau: cfg.tau_search },
        blend: cfg.blend,
        fast: false,
        gate_grad: cfg.gate_grad,
    }
}

/// Scalar losses of one step.
pub struct Losses {
    pub l_cls: f64,
    pub l_res: f64,
    pub l_total: f64,
    pub model_cost: f64,
}

/// `L_cls + gamma * L_res` for one batch; `backward` also leaves gradients
/// in the returned pass.
pub fn step_loss<'s, T: Scalar>(
    net: &'s Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    ctl: &Control<'_>,
    cfg: &TrainConfig,
    rng: &mut RngState,
    backward: bool,
) -> Result<(Pass<'s, T>, Losses)> {
    let mut pass = Pass::new(&net.store, backward, true);
    let out = net.forward(&mut pass, images, ctl, rng)?;
    let tape = &mut pass.tape;
    let l_cls = tape.cross_entropy(out.logits, labels)?;
    let l_res = resource_loss(tape, out.cost, cfg.f_t)?;
    let weighted = tape.scale(l_res, T::lit(cfg.gamma));
    let total = tape.add(l_cls, weighted)?;
    let losses = Losses {
        l_cls: tape.value(l_cls).item().to_f64_lossless(),
        l_res: tape.value(l_res).item().to_f64_lossless(),
        l_total: tape.value(total).item().to_f64_lossless(),
        model_cost: tape.value(out.cost).item().to_f64_lossless(),
    };
    if backward {
        tape.backward(total)?;
    }
    Ok((pass, losses))
}

/// Trains `net` in its current stage for `epochs`.
pub fn train_stage<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut RngState,
    sink: &mut dyn LogSink,
) -> Result<TrainLog> {
    let stage_no = match net.layout.stage {
        Stage::Search => 1,
        Stage::Finetune => 2,
    };
    let ctl = stage_control(net.layout.stage, net.layout.compression, cfg);
    let mut opt = AdamW::new(cfg.weight_decay, cfg.arch_lr_scale);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * epochs;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..epochs {
        let order = rng.permutation(train.len());
        let mut cost_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (images, labels) = train.batch::<T>(idx);
            let lr = cosine_lr(cfg.lr, step, total);
            let (pass, losses) = step_loss(net, &images, &labels, &ctl, cfg, rng, true)?;
            if !losses.l_total.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("l_cls {} l_res {} cost {}", losses.l_cls, losses.l_res, losses.model_cost),
                });
            }
            let grads = pass.grads();
            let stats = pass.bn_stats;
            opt.step(&mut net.store, &grads, lr);
            update_running_stats(&mut net.store, &stats, BN_MOMENTUM);
            let rec = StepLog {
                stage: stage_no,
                epoch,
                step,
                lr,
                l_cls: losses.l_cls,
                l_res: losses.l_res,
                l_total: losses.l_total,
                model_cost: losses.model_cost,
            };
            sink.step(&rec);
            log.steps.push(rec);
            cost_sum += losses.model_cost;
            step += 1;
        }
        if !net.store.all_finite() {
            return Err(Error::NonFinite { step, detail: "parameters left the finite range".into() });
        }
        let last = epoch + 1 == epochs;
        let eval = match test {
            Some(t) if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) => {
                Some(evaluate(net, t, cfg.eval_batch_size)?)
            }
            _ => None,
        };
        let rec = EpochLog { stage: stage_no, epoch, train_cost: cost_sum / per_epoch as f64, eval };
        sink.epoch(&rec);
        log.epochs.push(rec);
    }
    Ok(log)
}

/// Top-1 accuracy and mean realized cost under batch-level deterministic
/// gating. A search-stage network is finalized first.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    let finalized;
    let net = if net.layout.stage == Stage::Search {
        finalized = net.finalize()?;
        &finalized
    } else {
        net
    };
    let ctl = Control::inference();
    let mut rng = RngState::new(0);
    let mut correct = 0usize;
    let mut cost = 0.0;
    let layers = net.layout.backbone.layers.len();
    let mut exec = vec![[0.0f64; 2]; layers];
    let order: Vec<usize> = (0..data.len()).collect();
    for idx in order.chunks(batch_size) {
        let (images, labels) = data.batch::<T>(idx);
        let mut pass = Pass::new(&net.store, false, false);
        let out = net.forward(&mut pass, &images, &ctl, &mut rng)?;
        let logits = pass.tape.value(out.logits);
        let c = logits.shape()[1];
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits.data()[r * c..(r + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
            cost += realized_cost(net.config(), &net.realized_layers(&out.decisions, r));
            for (i, d) in out.decisions.iter().enumerate() {
                let run = d.as_ref().map_or([true, true], |d| d[r]);
                exec[i][0] += f64::from(u8::from(run[0]));
                exec[i][1] += f64::from(u8::from(run[1]));
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        model_cost: cost / n,
        exec_rates: exec.into_iter().map(|[a, f]| [a / n, f / n]).collect(),
    })
}

/// Largest relative output difference between the physically pruned
/// network and the masked search network, over random inputs and random
/// hard gate patterns.
pub fn equivalence_error<T: Scalar>(
    search: &Network<T>,
    pruned: &Network<T>,
    inputs: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let cfg = search.config();
    let plan = search.prune_plan();
    let mut worst = 0.0f64;
    let chunk = 25usize;
    let mut done = 0;
    while done < inputs {
        let b = chunk.min(inputs - done);
        let images = Tensor::from_fn(&[b, cfg.channels, cfg.image_size, cfg.image_size], |_| T::lit(rng.normal()));
        let gates: Vec<Vec<[bool; 2]>> =
            (0..cfg.layers).map(|_| (0..b).map(|_| [rng.uniform() < 0.7, rng.uniform() < 0.7]).collect()).collect();
        let masked = Control {
            statics: if search.layout.statics.is_some() { StaticMode::Hard(&plan) } else { StaticMode::Off },
            gates: GateMode::Fixed(&gates),
            candidates: CandidateMode::Argmax,
            blend: BlendRule::Effective,
            fast: false,
            gate_grad: false,
        };
        let direct = Control { statics: StaticMode::Off, fast: true, ..masked };
        let mut p1 = Pass::new(&search.store, false, false);
        let a = search.forward(&mut p1, &images, &masked, rng)?;
        let mut p2 = Pass::new(&pruned.store, false, false);
        let bo = pruned.forward(&mut p2, &images, &direct, rng)?;
        let (va, vb) = (p1.tape.value(a.logits), p2.tape.value(bo.logits));
        worst = worst.max(vb.rel_err(va));
        done += b;
    }
    Ok(worst)
}

pub const EQUIVALENCE_TOL: f64 = 1e-4;

/// Prunes, selects one gate per layer and verifies the pruned network
/// against the masked one.
pub fn transition<T: Scalar>(net: &Network<T>, inputs: usize, rng: &mut RngState) -> Result<Network<T>> {
    let pruned = net.finalize()?;
    if inputs > 0 {
        let err = equivalence_error(net, &pruned, inputs, rng)?;
        if !(err <= EQUIVALENCE_TOL) {
            return Err(Error::Equivalence { rel_err: err, tol: EQUIVALENCE_TOL });
        }
    }
    Ok(pruned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub model_cost: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub stage1_cost: Option<f64>,
    pub stage1_eval: Option<EvalResult>,
    pub eval: EvalResult,
}

pub struct PipelineResult<T> {
    pub search: Network<T>,
    pub finetuned: Network<T>,
    pub log: TrainLog,
    pub summary: Summary,
    pub rng: RngState,
}

/// Builds the train and test sets for a data configuration.
pub fn datasets(cfg: &crate::config::DataConfig, image_size: usize) -> Result<(Dataset, Dataset)> {
    if cfg.source == "shapes10" {
        let train = Dataset::shapes10(cfg.train_size, image_size, cfg.seed);
        let test = Dataset::shapes10(cfg.test_size, image_size, cfg.seed.wrapping_add(0x5eed));
        return Ok((train, test));
    }
    let all = Dataset::load_dir(std::path::Path::new(&cfg.source), image_size)?;
    let every = cfg.test_every.max(2);
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for i in 0..all.len() {
        if i % every == every - 1 {
            te.push(i);
        } else {
            tr.push(i);
        }
    }
    let pick = |idx: &[usize]| {
        let px = all.channels * all.size * all.size;
        Dataset {
            channels: all.channels,
            size: all.size,
            classes: all.classes,
            images: idx.iter().flat_map(|&i| all.images[i * px..(i + 1) * px].iter().copied()).collect(),
            labels: idx.iter().map(|&i| all.labels[i]).collect(),
        }
    };
    Ok((pick(&tr), pick(&te)))
}

/// Stage 1, transition, stage 2 and a final evaluation.
pub fn run_pipeline<T: Scalar>(
    model: &crate::vit::VitConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    sink: &mut dyn LogSink,
) -> Result<PipelineResult<T>> {
    cfg.validate()?;
    let mut rng = RngState::new(cfg.seed);
    let mut init_rng = rng.fork(1);
    let mut net =
        Network::<T>::with_candidates(model, cfg.compression, cfg.tau_static, &cfg.gate_candidates, &mut init_rng)?;
    let params_before = net.backbone_params();
    let mut log = train_stage(&mut net, train, Some(test), cfg, cfg.epochs_stage1, &mut rng, sink)?;
    let stage1_cost = log.final_cost(1);
    let stage1_eval = log.epochs.last().and_then(|e| e.eval.clone());
    let mut eq_rng = rng.fork(2);
    let mut tuned = transition(&net, cfg.equivalence_inputs, &mut eq_rng)?;
    let log2 = train_stage(&mut tuned, train, Some(test), cfg, cfg.epochs_stage2, &mut rng, sink)?;
    log.steps.extend(log2.steps);
    log.epochs.extend(log2.epochs);
    let eval = match log.epochs.last().and_then(|e| e.eval.clone()) {
        Some(e) if cfg.epochs_stage2 > 0 => e,
        _ => evaluate(&tuned, test, cfg.eval_batch_size)?,
    };
    let summary = Summary {
        accuracy: eval.accuracy,
        model_cost: eval.model_cost,
        params_before,
        params_after: tuned.backbone_params(),
        stage1_cost,
        stage1_eval,
        eval,
    };
    Ok(PipelineResult { search: net, finetuned: tuned, log, summary, rng })
}
