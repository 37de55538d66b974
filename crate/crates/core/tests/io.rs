mod common;

use common::small_config;
use gatevit::checkpoint::{self, Checkpoint};
use gatevit::config::ExperimentConfig;
use gatevit::data::{Dataset, SHAPE_CLASSES};
use gatevit::model::{Compression, Control, Network};
use gatevit::params::Pass;
use gatevit::train::stage_control;
use gatevit::{RngState, Stage, Tensor};

fn logits32(net: &Network<f32>, imgs: &Tensor<f32>, ctl: &Control<'_>, seed: u64) -> Vec<u32> {
    let mut pass = Pass::new(&net.store, false, false);
    let out = net.forward(&mut pass, imgs, ctl, &mut RngState::new(seed)).unwrap();
    pass.tape.value(out.logits).data().iter().map(|v| v.to_bits()).collect()
}

fn networks() -> Vec<Network<f32>> {
    let cfg = small_config(2, 2, 3, 5, 8, 4);
    let mut rng = RngState::new(3);
    let search = Network::<f32>::new(&cfg, Compression::Joint, 2.0, &mut rng).unwrap();
    let fin = search.finalize().unwrap();
    vec![search, fin]
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let tc = gatevit::config::TrainConfig::default();
    for (i, net) in networks().into_iter().enumerate() {
        let path = dir.path().join(format!("n{i}.gvck"));
        let rng = RngState::new(11).fork(4);
        let extra = serde_json::json!({ "note": i });
        checkpoint::save(&path, &net, &rng, extra.clone()).unwrap();
        assert!(checkpoint::manifest_path(&path).is_file());
        let Checkpoint { network, rng: back, extra: e2 } = checkpoint::load::<f32>(&path).unwrap();
        assert_eq!(network, net);
        assert_eq!(back.snapshot(), rng.snapshot());
        assert_eq!(e2, extra);
        let mut draw = RngState::new(9);
        let ctl = if net.layout.stage == Stage::Search {
            stage_control(Stage::Search, Compression::Joint, &tc)
        } else {
            Control::inference()
        };
        for k in 0..10 {
            let imgs = Tensor::from_fn(&[1 + k % 3, 1, 8, 8], |_| draw.normal() as f32);
            assert_eq!(logits32(&net, &imgs, &ctl, k as u64), logits32(&network, &imgs, &ctl, k as u64));
        }
        let again = checkpoint::encode(&network, &back, e2).unwrap();
        assert_eq!(again, std::fs::read(&path).unwrap());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let net = &networks()[1];
    let bytes = checkpoint::encode(net, &RngState::new(0), serde_json::Value::Null).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(checkpoint::decode::<f32>(&bad_magic).is_err());
    assert!(checkpoint::decode::<f32>(&bytes[..bytes.len() - 3]).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(checkpoint::decode::<f32>(&trailing).is_err());
    let mut version = bytes.clone();
    version[4] = 99;
    assert!(checkpoint::decode::<f32>(&version).is_err());
    assert!(checkpoint::decode::<f64>(&bytes).is_err());
    assert!(checkpoint::decode::<f32>(&[]).is_err());
    let man = checkpoint::read_manifest(&bytes).unwrap();
    assert_eq!(man.stage, Stage::Finetune);
    assert_eq!(man.tensors.len(), net.store.len());
}

#[test]
fn config_round_trip_is_identity() {
    for cfg in [ExperimentConfig::default(), ExperimentConfig::toy()] {
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap().to_toml(), text);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    ExperimentConfig::toy().save(&p).unwrap();
    assert_eq!(ExperimentConfig::load(&p).unwrap(), ExperimentConfig::toy());
}

#[test]
fn unknown_or_invalid_keys_are_rejected() {
    let text = ExperimentConfig::default().to_toml();
    let typo = text.replacen("gamma =", "gama =", 1);
    assert!(ExperimentConfig::from_toml(&typo).is_err());
    let extra = format!("{text}\n[extra]\nx = 1\n");
    assert!(ExperimentConfig::from_toml(&extra).is_err());
    let bad = text.replacen("f_t = 0.65", "f_t = 1.5", 1);
    assert_ne!(bad, text);
    assert!(ExperimentConfig::from_toml(&bad).is_err());
    assert!(ExperimentConfig::from_toml("[train]\ngate_strategy = \"halves\"\n").is_err());
    let partial = ExperimentConfig::from_toml("[train]\nseed = 5\n").unwrap();
    assert_eq!(partial.train.seed, 5);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dataset::shapes10(30, 8, 4);
    d.save_dir(dir.path(), &SHAPE_CLASSES).unwrap();
    let back = Dataset::load_dir(dir.path(), 8).unwrap();
    assert_eq!(back.len(), 30);
    assert_eq!(back.classes, 10);
    let key = |ds: &Dataset| {
        let px = ds.size * ds.size;
        let mut v: Vec<(usize, Vec<u8>)> = (0..ds.len())
            .map(|i| {
                (ds.labels[i], ds.images[i * px..(i + 1) * px].iter().map(|&x| (x * 255.0).round() as u8).collect())
            })
            .collect();
        v.sort();
        v
    };
    assert_eq!(key(&back), key(&d));
}

#[test]
fn shapes_are_seeded() {
    assert_eq!(Dataset::shapes10(20, 16, 1), Dataset::shapes10(20, 16, 1));
    assert_ne!(Dataset::shapes10(20, 16, 1), Dataset::shapes10(20, 16, 2));
    let d = Dataset::shapes10(200, 16, 0);
    for c in 0..10 {
        assert!(d.labels.iter().any(|&l| l == c));
    }
}
