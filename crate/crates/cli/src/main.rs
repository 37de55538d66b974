//! `gatevit` command-line tool.
//!
//! Exit status: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error. `GATEVIT_SEED` overrides the training seed of any
//! loaded configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use gatevit::checkpoint::{self, Checkpoint};
use gatevit::config::ExperimentConfig;
use gatevit::data::{Dataset, SHAPE_CLASSES};
use gatevit::experiments::{self, Ablation};
use gatevit::flops::FlopsReport;
use gatevit::train::{self, JsonLines};
use gatevit::{RngState, Stage};

#[derive(Parser)]
#[command(name = "gatevit", version, about = "Static pruning and dynamic block skipping for small vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Start from a built-in configuration instead of the defaults.
    #[arg(long, value_parser = ["toy", "default"])]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Search and compress, prune, then fine-tune.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory, overriding `paths.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved configuration and the uncompressed cost, then exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Prune a search-stage checkpoint and select its gates.
    Prune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pruned checkpoint under dynamic gating.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and mean realized cost on the test set.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Run one ablation and write it as CSV.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// batch-size, gate-arch, prune-options or group-split.
        #[arg(long)]
        which: String,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer structure and execute rates of a fine-tuned checkpoint.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// JSON destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic shapes set as PGM files, one directory per class.
    DatasetGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<gatevit::Error> for Failure {
    fn from(e: gatevit::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn load_config(args: &ConfigArgs) -> Outcome<ExperimentConfig> {
    let mut cfg = match (&args.config, args.preset.as_deref()) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(usage(anyhow!("config file not found: {}", path.display())));
            }
            ExperimentConfig::load(path).map_err(|e| usage(anyhow!("{}: {e}", path.display())))?
        }
        (None, Some("toy")) => ExperimentConfig::toy(),
        (None, _) => ExperimentConfig::default(),
    };
    if let Ok(seed) = std::env::var("GATEVIT_SEED") {
        cfg.train.seed = seed.trim().parse().map_err(|_| usage(anyhow!("GATEVIT_SEED is not an integer: {seed:?}")))?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint<f32>> {
    if !path.is_file() {
        return Err(usage(anyhow!("checkpoint not found: {}", path.display())));
    }
    Ok(checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?)
}

fn write_out(path: Option<&Path>, text: &str) -> Outcome<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn config_json(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({ "config": cfg.to_toml() })
}

fn test_set(cfg: &ExperimentConfig) -> Outcome<Dataset> {
    Ok(train::datasets(&cfg.data, cfg.model.image_size)?.1)
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::Train { cfg, out, dry_run } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(o) = out {
                cfg.paths.out_dir = o;
            }
            let report = FlopsReport::new(&cfg.model);
            if dry_run {
                println!("{}", cfg.to_toml());
                println!(
                    "{}",
                    serde_json::json!({ "uncompressed_macs": report.total_macs, "model_cost": report.model_cost })
                );
                return Ok(());
            }
            let dir = cfg.paths.out_dir.clone();
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            cfg.save(&dir.join("config.toml"))?;
            let (tr, te) = train::datasets(&cfg.data, cfg.model.image_size)?;
            let log = File::create(dir.join("log.jsonl")).context("creating log.jsonl")?;
            let mut sink = JsonLines(BufWriter::new(log));
            let res = train::run_pipeline::<f32>(&cfg.model, &cfg.train, &tr, &te, &mut sink)?;
            sink.0.flush().context("writing log.jsonl")?;
            let extra = config_json(&cfg);
            checkpoint::save(&dir.join("stage1.gvck"), &res.search, &res.rng, extra.clone())?;
            checkpoint::save(&dir.join("stage2.gvck"), &res.finetuned, &res.rng, extra)?;
            let flops = serde_json::to_string_pretty(&report).context("serializing cost report")?;
            fs::write(dir.join("flops.json"), flops + "\n").context("writing flops.json")?;
            let summary = serde_json::to_string_pretty(&res.summary).context("serializing summary")?;
            fs::write(dir.join("summary.json"), summary.clone() + "\n").context("writing summary.json")?;
            println!("{summary}");
        }
        Command::Prune { cfg, checkpoint: path, out } => {
            let cfg = load_config(&cfg)?;
            let mut ck = load_checkpoint(&path)?;
            if ck.network.layout.stage != Stage::Search {
                return Err(usage(anyhow!("{} is already pruned", path.display())));
            }
            let mut rng = ck.rng.fork(2);
            let pruned = train::transition(&ck.network, cfg.train.equivalence_inputs, &mut rng)?;
            checkpoint::save(&out, &pruned, &ck.rng, ck.extra)?;
            println!(
                "{}",
                serde_json::json!({
                    "params_before": ck.network.backbone_params(),
                    "params_after": pruned.backbone_params(),
                    "layers": pruned.layout.backbone.layers.len(),
                })
            );
        }
        Command::Finetune { cfg, checkpoint: path, out } => {
            let cfg = load_config(&cfg)?;
            let ck = load_checkpoint(&path)?;
            if ck.network.layout.stage != Stage::Finetune {
                return Err(usage(anyhow!("{} is a search-stage checkpoint; run `prune` first", path.display())));
            }
            let (tr, te) = train::datasets(&cfg.data, cfg.model.image_size)?;
            let mut net = ck.network;
            let mut rng = RngState::new(cfg.train.seed).fork(3);
            let mut sink = JsonLines(std::io::stdout().lock());
            train::train_stage(&mut net, &tr, Some(&te), &cfg.train, cfg.train.epochs_stage2, &mut rng, &mut sink)?;
            checkpoint::save(&out, &net, &rng, config_json(&cfg))?;
        }
        Command::Eval { cfg, checkpoint: path, batch_size } => {
            let cfg = load_config(&cfg)?;
            if batch_size == 0 {
                return Err(usage(anyhow!("--batch-size must be positive")));
            }
            let ck = load_checkpoint(&path)?;
            let r = train::evaluate(&ck.network, &test_set(&cfg)?, batch_size)?;
            println!("{}", serde_json::to_string_pretty(&r).context("serializing result")?);
        }
        Command::Ablate { cfg, which, out } => {
            let cfg = load_config(&cfg)?;
            let which: Ablation = which.parse().map_err(usage)?;
            let table = experiments::run_ablation(&cfg, which, &mut train::NoLog)?;
            write_out(out.as_deref(), &table.to_csv())?;
        }
        Command::Report { cfg, checkpoint: path, batch_size, out } => {
            let cfg = load_config(&cfg)?;
            let ck = load_checkpoint(&path)?;
            if ck.network.layout.stage != Stage::Finetune {
                return Err(usage(anyhow!(
                    "{} is a search-stage checkpoint; the report describes a pruned model, so run `prune` first",
                    path.display()
                )));
            }
            let r = experiments::report(&ck.network, &test_set(&cfg)?, batch_size)?;
            let text = serde_json::to_string_pretty(&r).context("serializing report")?;
            write_out(out.as_deref(), &(text + "\n"))?;
        }
        Command::DatasetGen { out, count, size, seed } => {
            if size < 4 {
                return Err(usage(anyhow!("--size must be at least 4")));
            }
            Dataset::shapes10(count, size, seed).save_dir(&out, &SHAPE_CLASSES)?;
            println!("wrote {count} images to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
