//! Toy-scale ablations and the per-layer architecture report.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::GroupStrategy;
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::{count_realized, realized_cost, Counting, RealizedLayer};
use crate::gating::GateKind;
use crate::model::{Compression, Network, Stage};
use crate::scalar::Scalar;
use crate::train::{datasets, evaluate, run_pipeline, LogSink, NoLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    BatchSize,
    GateArch,
    PruneOptions,
    GroupSplit,
}

impl Ablation {
    pub const ALL: [Ablation; 4] =
        [Ablation::BatchSize, Ablation::GateArch, Ablation::PruneOptions, Ablation::GroupSplit];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::BatchSize => "batch-size",
            Ablation::GateArch => "gate-arch",
            Ablation::PruneOptions => "prune-options",
            Ablation::GroupSplit => "group-split",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Largest minus smallest.
pub fn spread(values: &[f64]) -> f64 {
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo
}

/// Outcome of one trained variant under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub variant: String,
    pub seed: u64,
    /// `(inference batch, accuracy, mean realized cost)`.
    pub evals: Vec<(usize, f64, f64)>,
    /// MACs of the selected gate networks, summed over layers.
    pub gate_macs: u64,
}

impl Trial {
    pub fn accuracies(&self) -> Vec<f64> {
        self.evals.iter().map(|e| e.1).collect()
    }

    pub fn accuracy_at(&self, batch: usize) -> f64 {
        self.evals.iter().find(|e| e.0 == batch).map_or(f64::NAN, |e| e.1)
    }

    pub fn cost_at(&self, batch: usize) -> f64 {
        self.evals.iter().find(|e| e.0 == batch).map_or(f64::NAN, |e| e.2)
    }
}

/// MACs spent in the gate networks of a finalized network.
pub fn gate_macs<T: Scalar>(net: &Network<T>) -> u64 {
    let cfg = net.config();
    let with: Vec<RealizedLayer> = net.realized_layers(&all_exec(net), 0);
    let without: Vec<RealizedLayer> = with.iter().map(|l| RealizedLayer { gate: None, ..*l }).collect();
    count_realized(cfg, &with, Counting::Product) - count_realized(cfg, &without, Counting::Product)
}

fn all_exec<T>(net: &Network<T>) -> Vec<Option<Vec<[bool; 2]>>> {
    net.layout.gates.iter().map(|g| (!g.is_empty()).then(|| vec![[true, true]])).collect()
}

/// Trains one variant per seed and evaluates it at every inference batch.
pub fn run_variant(
    exp: &ExperimentConfig,
    variant: &str,
    seeds: &[u64],
    data: &(Dataset, Dataset),
    sink: &mut dyn LogSink,
) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut train = exp.train.clone();
        train.seed = seed;
        let res = run_pipeline::<f32>(&exp.model, &train, &data.0, &data.1, sink)?;
        let evals = exp
            .ablation
            .inference_batches
            .iter()
            .map(|&b| evaluate(&res.finetuned, &data.1, b).map(|e| (b, e.accuracy, e.model_cost)))
            .collect::<Result<Vec<_>>>()?;
        out.push(Trial { variant: variant.to_string(), seed, evals, gate_macs: gate_macs(&res.finetuned) });
    }
    Ok(out)
}

pub fn batch_size_trials(
    exp: &ExperimentConfig,
    data: &(Dataset, Dataset),
    sink: &mut dyn LogSink,
) -> Result<Vec<Trial>> {
    let mut all = Vec::new();
    for &s in &exp.ablation.strategies {
        let mut e = exp.clone();
        e.train.gate_strategy = s;
        all.extend(run_variant(&e, &s.to_string(), &exp.ablation.seeds, data, sink)?);
    }
    Ok(all)
}

pub const GATE_ARCH_VARIANTS: [&str; 3] = ["manual-g0", "manual-g2", "search"];

pub fn gate_arch_trials(
    exp: &ExperimentConfig,
    data: &(Dataset, Dataset),
    sink: &mut dyn LogSink,
) -> Result<Vec<Trial>> {
    let mut all = Vec::new();
    for v in GATE_ARCH_VARIANTS {
        let mut e = exp.clone();
        e.train.gate_candidates = match v {
            "manual-g0" => vec![GateKind::ALL[0]],
            "manual-g2" => vec![GateKind::ALL[2]],
            _ => GateKind::ALL.to_vec(),
        };
        all.extend(run_variant(&e, v, &exp.ablation.seeds, data, sink)?);
    }
    Ok(all)
}

pub const PRUNE_OPTIONS: [(&str, Compression); 3] =
    [("static", Compression::Static), ("dynamic", Compression::Dynamic), ("static&dynamic", Compression::Joint)];

pub fn prune_option_trials(
    exp: &ExperimentConfig,
    data: &(Dataset, Dataset),
    sink: &mut dyn LogSink,
) -> Result<Vec<Trial>> {
    let mut all = Vec::new();
    for (name, c) in PRUNE_OPTIONS {
        let mut e = exp.clone();
        e.train.compression = c;
        all.extend(run_variant(&e, name, &exp.ablation.seeds, data, sink)?);
    }
    Ok(all)
}

pub fn group_split_strategies() -> [(&'static str, GroupStrategy); 4] {
    [
        ("avg-32", GroupStrategy::Avg(32)),
        ("avg-8", GroupStrategy::Avg(8)),
        ("random", GroupStrategy::Random),
        ("recursive", GroupStrategy::Recursive),
    ]
}

pub fn group_split_trials(
    exp: &ExperimentConfig,
    data: &(Dataset, Dataset),
    sink: &mut dyn LogSink,
) -> Result<Vec<Trial>> {
    let mut all = Vec::new();
    for (name, s) in group_split_strategies() {
        let mut e = exp.clone();
        e.train.gate_strategy = s;
        all.extend(run_variant(&e, name, &exp.ablation.seeds, data, sink)?);
    }
    Ok(all)
}

fn of<'a>(trials: &'a [Trial], variant: &'a str) -> impl Iterator<Item = &'a Trial> + 'a {
    trials.iter().filter(move |t| t.variant == variant)
}

/// Long format: one row per strategy, seed and inference batch.
pub fn batch_size_table(trials: &[Trial]) -> Table {
    let mut t = Table::new(&["strategy", "seed", "inference_batch", "accuracy", "flops"]);
    for tr in trials {
        for &(b, acc, cost) in &tr.evals {
            t.push(vec![tr.variant.clone(), tr.seed.to_string(), b.to_string(), num(acc), num(cost)]);
        }
    }
    t
}

/// One column per variant, median over seeds; accuracy rows per inference
/// batch, then FLOPs rows.
fn wide_table(first: &str, variants: &[&str], trials: &[Trial], batches: &[usize], gate_row: bool) -> Table {
    let mut header = vec![first];
    header.extend_from_slice(variants);
    let mut t = Table::new(&header);
    for &b in batches {
        let mut row = vec![b.to_string()];
        for v in variants {
            row.push(num(median(&of(trials, v).map(|tr| tr.accuracy_at(b)).collect::<Vec<_>>())));
        }
        t.push(row);
    }
    if gate_row {
        let mut row = vec!["gate_macs".to_string()];
        for v in variants {
            row.push(num(median(&of(trials, v).map(|tr| tr.gate_macs as f64).collect::<Vec<_>>())));
        }
        t.push(row);
    }
    let mut row = vec!["flops".to_string()];
    let b0 = batches.first().copied().unwrap_or(1);
    for v in variants {
        row.push(num(median(&of(trials, v).map(|tr| tr.cost_at(b0)).collect::<Vec<_>>())));
    }
    t.push(row);
    t
}

pub fn gate_arch_table(trials: &[Trial], batches: &[usize]) -> Table {
    wide_table("inference_batch", &GATE_ARCH_VARIANTS, trials, batches, true)
}

pub fn group_split_table(trials: &[Trial], batches: &[usize]) -> Table {
    let names: Vec<_> = group_split_strategies().iter().map(|s| s.0).collect();
    wide_table("inference_batch", &names, trials, batches, false)
}

/// Two rows, accuracy and FLOPs, at the first inference batch.
pub fn prune_options_table(trials: &[Trial], batches: &[usize]) -> Table {
    let b = batches.first().copied().unwrap_or(1);
    let mut t = Table::new(&["metric", "static", "dynamic", "static&dynamic"]);
    let mut acc = vec!["accuracy".to_string()];
    let mut flops = vec!["flops".to_string()];
    for (v, _) in PRUNE_OPTIONS {
        acc.push(num(median(&of(trials, v).map(|tr| tr.accuracy_at(b)).collect::<Vec<_>>())));
        flops.push(num(median(&of(trials, v).map(|tr| tr.cost_at(b)).collect::<Vec<_>>())));
    }
    t.push(acc);
    t.push(flops);
    t
}

/// Trains what `which` needs and returns its table.
pub fn run_ablation(exp: &ExperimentConfig, which: Ablation, sink: &mut dyn LogSink) -> Result<Table> {
    exp.validate()?;
    let data = datasets(&exp.data, exp.model.image_size)?;
    let batches = &exp.ablation.inference_batches;
    Ok(match which {
        Ablation::BatchSize => batch_size_table(&batch_size_trials(exp, &data, sink)?),
        Ablation::GateArch => gate_arch_table(&gate_arch_trials(exp, &data, sink)?, batches),
        Ablation::PruneOptions => prune_options_table(&prune_option_trials(exp, &data, sink)?, batches),
        Ablation::GroupSplit => group_split_table(&group_split_trials(exp, &data, sink)?, batches),
    })
}

/// Trains with no log output; convenience for callers without a sink.
pub fn run_ablation_quiet(exp: &ExperimentConfig, which: Ablation) -> Result<Table> {
    run_ablation(exp, which, &mut NoLog)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub kept_heads: Vec<usize>,
    pub kept_hidden: usize,
    pub attn_alive: bool,
    pub ffn_alive: bool,
    pub gate: Option<GateKind>,
    /// Execute rates of the attention and FFN blocks; 0 for pruned blocks.
    pub exec_rate: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub layers: Vec<LayerReport>,
    pub params: usize,
    pub gate_params: usize,
    pub accuracy: f64,
    /// Cost with every surviving block executed.
    pub static_remaining: f64,
    /// Mean realized cost over the evaluation pass.
    pub joint_remaining: f64,
}

/// Per-layer structure and execute rates of a fine-tuned network.
pub fn report<T: Scalar>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<Report> {
    if net.layout.stage != Stage::Finetune {
        return Err(Error::Config(
            "report needs a pruned, fine-tuned checkpoint; run `prune` (and `finetune`) on this search-stage checkpoint first"
                .into(),
        ));
    }
    let cfg = net.config();
    let eval = evaluate(net, data, batch_size)?;
    let static_remaining = realized_cost(cfg, &net.realized_layers(&all_exec(net), 0));
    let layers = (0..cfg.layers)
        .map(|l| {
            let pos = net.layout.backbone.layers.iter().position(|x| x.index == l);
            match pos {
                None => LayerReport {
                    index: l,
                    kept_heads: Vec::new(),
                    kept_hidden: 0,
                    attn_alive: false,
                    ffn_alive: false,
                    gate: None,
                    exec_rate: [0.0, 0.0],
                },
                Some(i) => {
                    let layer = &net.layout.backbone.layers[i];
                    let r = eval.exec_rates[i];
                    LayerReport {
                        index: l,
                        kept_heads: layer.attn.as_ref().map_or_else(Vec::new, |a| a.heads.clone()),
                        kept_hidden: layer.ffn.as_ref().map_or(0, |f| f.channels.len()),
                        attn_alive: layer.attn.is_some(),
                        ffn_alive: layer.ffn.is_some(),
                        gate: net.layout.gates[i].first().map(|c| c.kind),
                        exec_rate: [
                            if layer.attn.is_some() { r[0] } else { 0.0 },
                            if layer.ffn.is_some() { r[1] } else { 0.0 },
                        ],
                    }
                }
            }
        })
        .collect();
    Ok(Report {
        layers,
        params: net.backbone_params(),
        gate_params: net.gate_params(),
        accuracy: eval.accuracy,
        static_remaining,
        joint_remaining: eval.model_cost,
    })
}
