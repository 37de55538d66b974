use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gatevit::config::ExperimentConfig;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gatevit"));
    c.env_remove("GATEVIT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A model and data set small enough to train in well under a second.
fn tiny(dir: &Path) -> PathBuf {
    let mut c = ExperimentConfig::default();
    c.model.layers = 2;
    c.model.heads = 2;
    c.model.embed_dim = 8;
    c.model.ffn_hidden = 16;
    c.model.image_size = 8;
    c.model.patch_size = 4;
    c.train.epochs_stage1 = 1;
    c.train.epochs_stage2 = 1;
    c.train.batch_size = 16;
    c.train.equivalence_inputs = 10;
    c.train.eval_every = 0;
    c.data.train_size = 48;
    c.data.test_size = 24;
    c.ablation.seeds = vec![0];
    c.paths.out_dir = dir.join("run");
    let p = dir.join("tiny.toml");
    c.save(&p).unwrap();
    p
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().expect("JSON object").keys().cloned().collect()
}

fn set(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>());
    let header = lines.next().expect("header");
    let rows: Vec<_> = lines.collect();
    for r in &rows {
        assert_eq!(r.len(), header.len(), "{text}");
    }
    (header, rows)
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let o = run(&["train", "--config", "/nonexistent/where.toml", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/where.toml"), "{}", stderr(&o));
}

#[test]
fn bad_config_and_bad_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[train]\ngama = 3.0\n").unwrap();
    let o = run(&["train", "-c", p.to_str().unwrap(), "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gama"), "{}", stderr(&o));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let o = bin().env("GATEVIT_SEED", "seven").args(["train", "--preset", "toy", "--dry-run"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dry_run_prints_config_and_cost_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let o = run(&["train", "-c", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let json_line = text.lines().last().unwrap();
    let (toml_part, _) = text.rsplit_once(json_line).unwrap();
    assert_eq!(ExperimentConfig::from_toml(toml_part).unwrap(), ExperimentConfig::load(&cfg).unwrap());
    let v: Value = serde_json::from_str(json_line).unwrap();
    assert_eq!(keys(&v), set(&["uncompressed_macs", "model_cost"]));
    let model = ExperimentConfig::load(&cfg).unwrap().model;
    assert_eq!(v["uncompressed_macs"].as_u64().unwrap(), gatevit::flops::FlopsReport::new(&model).total_macs);
    assert_eq!(v["model_cost"].as_f64().unwrap(), 1.0);
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1, "only the config file exists");
}

#[test]
fn seed_override_is_applied() {
    let o = bin().env("GATEVIT_SEED", "77").args(["train", "--preset", "toy", "--dry-run"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let toml_part = &text[..text.rfind('{').unwrap()];
    assert_eq!(ExperimentConfig::from_toml(toml_part).unwrap().train.seed, 77);
}

#[test]
fn unknown_ablation_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let o = run(&["ablate", "-c", cfg.to_str().unwrap(), "--which", "depth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("prune-options"), "{}", stderr(&o));
}

#[test]
fn end_to_end_train_prune_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let c = cfg.to_str().unwrap();
    let o = run(&["train", "-c", c]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("run");
    for f in ["config.toml", "log.jsonl", "stage1.gvck", "stage2.gvck", "flops.json", "summary.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(gatevit::checkpoint::manifest_path(&out.join("stage2.gvck")).is_file());

    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, serde_json::from_str::<Value>(&stdout(&o)).unwrap());
    let required = set(&["accuracy", "model_cost", "params_before", "params_after"]);
    assert!(required.is_subset(&keys(&summary)), "{summary}");
    assert_eq!(
        keys(&summary),
        set(&["accuracy", "model_cost", "params_before", "params_after", "stage1_cost", "stage1_eval", "eval"])
    );
    assert!(summary["params_after"].as_u64().unwrap() <= summary["params_before"].as_u64().unwrap());
    assert_eq!(keys(&summary["eval"]), set(&["accuracy", "model_cost", "exec_rates"]));

    let flops: Value = serde_json::from_str(&std::fs::read_to_string(out.join("flops.json")).unwrap()).unwrap();
    assert_eq!(
        keys(&flops),
        set(&["total_macs", "f_attn", "f_ffn", "f_gate", "f_other", "model_cost", "backbone_params"])
    );

    let log = std::fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert!(!log.is_empty());
    for line in log.lines() {
        assert!(serde_json::from_str::<Value>(line).unwrap().is_object());
    }

    let s1 = out.join("stage1.gvck");
    let s2 = out.join("stage2.gvck");
    let o = run(&["report", "-c", c, "--checkpoint", s1.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("prune"), "{}", stderr(&o));

    let o = run(&["report", "-c", c, "--checkpoint", s2.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(
        keys(&rep),
        set(&["layers", "params", "gate_params", "accuracy", "static_remaining", "joint_remaining"])
    );
    let layers = rep["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    for l in layers {
        assert_eq!(
            keys(l),
            set(&["index", "kept_heads", "kept_hidden", "attn_alive", "ffn_alive", "gate", "exec_rate"])
        );
    }

    let o = run(&["eval", "-c", c, "--checkpoint", s2.to_str().unwrap(), "--batch-size", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ev: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(keys(&ev), set(&["accuracy", "model_cost", "exec_rates"]));

    let pruned = dir.path().join("pruned.gvck");
    let o = run(&["prune", "-c", c, "--checkpoint", s1.to_str().unwrap(), "--out", pruned.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pv: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(keys(&pv), set(&["params_before", "params_after", "layers"]));
    let o = run(&["prune", "-c", c, "--checkpoint", pruned.to_str().unwrap(), "--out", pruned.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let tuned = dir.path().join("tuned.gvck");
    let o = run(&["finetune", "-c", c, "--checkpoint", s1.to_str().unwrap(), "--out", tuned.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["finetune", "-c", c, "--checkpoint", pruned.to_str().unwrap(), "--out", tuned.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(tuned.is_file());

    let o = run(&["eval", "-c", c, "--checkpoint", dir.path().join("none.gvck").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("junk.gvck"), b"not a checkpoint").unwrap();
    let o = run(&["eval", "-c", c, "--checkpoint", dir.path().join("junk.gvck").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablation_tables_have_stable_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let c = cfg.to_str().unwrap();
    let table = |which: &str| {
        let o = run(&["ablate", "-c", c, "--which", which]);
        assert_eq!(o.status.code(), Some(0), "{which}: {}", stderr(&o));
        csv(&stdout(&o))
    };

    let (h, rows) = table("prune-options");
    assert_eq!(h, ["metric", "static", "dynamic", "static&dynamic"]);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["accuracy", "flops"]);

    let (h, rows) = table("batch-size");
    assert_eq!(h, ["strategy", "seed", "inference_batch", "accuracy", "flops"]);
    for s in ["sample", "batch", "recursive"] {
        let batches: Vec<_> = rows.iter().filter(|r| r[0] == s).map(|r| r[2].as_str()).collect();
        assert_eq!(batches, ["64", "8", "1"], "{s}");
    }
    assert_eq!(rows.len(), 9);

    let (h, rows) = table("group-split");
    assert_eq!(h, ["inference_batch", "avg-32", "avg-8", "random", "recursive"]);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["64", "8", "1", "flops"]);

    let (h, rows) = table("gate-arch");
    assert_eq!(h, ["inference_batch", "manual-g0", "manual-g2", "search"]);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["64", "8", "1", "gate_macs", "flops"]);

    let out = dir.path().join("t/po.csv");
    let o = run(&["ablate", "-c", c, "--which", "prune-options", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let (h2, _) = csv(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(h2, ["metric", "static", "dynamic", "static&dynamic"]);
}

#[test]
fn dataset_gen_writes_class_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shapes");
    let o = run(&["dataset-gen", "--out", out.to_str().unwrap(), "--count", "20", "--size", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let classes = std::fs::read_dir(&out).unwrap().count();
    assert_eq!(classes, 10);
    let d = gatevit::data::Dataset::load_dir(&out, 8).unwrap();
    assert_eq!(d.len(), 20);
    assert_eq!(run(&["dataset-gen", "--out", out.to_str().unwrap(), "--size", "2"]).status.code(), Some(2));
}
