//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::GroupStrategy;
use crate::compress::BlendRule;
use crate::error::{Error, Result};
use crate::gating::GateKind;
use crate::model::Compression;
use crate::vit::VitConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the resource loss.
    pub gamma: f64,
    /// Target normalized cost.
    pub f_t: f64,
    pub tau_skip: f64,
    pub tau_search: f64,
    pub tau_static: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for static and gate-architecture logits.
    pub arch_lr_scale: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub gate_strategy: GroupStrategy,
    pub compression: Compression,
    pub blend: BlendRule,
    /// Gate networks searched per layer.
    pub gate_candidates: Vec<GateKind>,
    /// Backpropagate gate losses into the backbone through the gate inputs.
    pub gate_grad: bool,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 evaluates only after each stage.
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Random inputs for the pruning equivalence check.
    pub equivalence_inputs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 100.0,
            f_t: 0.65,
            tau_skip: 5.0,
            tau_search: 2.0,
            tau_static: 2.0,
            lr: 5e-4,
            weight_decay: 0.05,
            arch_lr_scale: 1.0,
            epochs_stage1: 30,
            epochs_stage2: 20,
            batch_size: 64,
            gate_strategy: GroupStrategy::Recursive,
            compression: Compression::Joint,
            blend: BlendRule::Effective,
            gate_candidates: GateKind::ALL.to_vec(),
            gate_grad: false,
            seed: 0,
            eval_every: 1,
            eval_batch_size: 64,
            equivalence_inputs: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be a nonnegative number, got {}", self.gamma));
        }
        if !(self.f_t > 0.0 && self.f_t <= 1.0) {
            return bad(format!("f_t must lie in (0, 1], got {}", self.f_t));
        }
        for (name, t) in [("tau_skip", self.tau_skip), ("tau_search", self.tau_search), ("tau_static", self.tau_static)]
        {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("{name} must be positive, got {t}"));
            }
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.arch_lr_scale >= 0.0) {
            return bad("lr, weight_decay and arch_lr_scale must be nonnegative".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.gate_candidates.is_empty() {
            return bad("gate_candidates must not be empty".into());
        }
        if self.epochs_stage1 == 0 && self.epochs_stage2 == 0 {
            return bad("at least one training epoch is required".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `"shapes10"` or a directory of class subdirectories.
    pub source: String,
    pub train_size: usize,
    pub test_size: usize,
    /// Held-out images of a directory source, one in this many.
    pub test_every: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: "shapes10".into(), train_size: 2048, test_size: 1024, test_every: 5, seed: 1234 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Checkpoint to start from, if any.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("runs/default"), checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub inference_batches: Vec<usize>,
    /// Training strategies compared by the batch-size ablation.
    pub strategies: Vec<GroupStrategy>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            inference_batches: vec![64, 8, 1],
            strategies: vec![GroupStrategy::Sample, GroupStrategy::Batch, GroupStrategy::Recursive],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: VitConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.ablation.inference_batches.contains(&0) {
            return Err(Error::Config("inference batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Small, fast settings used by the acceptance runs and the CLI
    /// `--preset toy` flag.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.train.lr = 2e-3;
        c.train.arch_lr_scale = 400.0;
        c.train.epochs_stage1 = 10;
        c.train.epochs_stage2 = 5;
        c.train.eval_every = 0;
        c.data.train_size = 2048;
        c.data.test_size = 512;
        c
    }
}
