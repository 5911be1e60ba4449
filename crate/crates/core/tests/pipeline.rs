//! A tiny run of all three stages on sine data, small enough for the test suite.

use nmvq_autodiff::{rng, Tensor};
use nmvq_core::checkpoint::Checkpoint;
use nmvq_core::dataset::{make_synthetic, znormalize, SyntheticKind};
use nmvq_core::kv::KvMap;
use nmvq_core::mapper::{train_stage3, Mapper, UNetConfig};
use nmvq_core::rocket::rocket_fit;
use nmvq_core::tau_search::{search_tau, DEFAULT_CANDIDATES};
use nmvq_core::tsgen::{
    generate_per_class, train_stage1, train_stage2, PriorConfig, PriorModel, Stage1Config, Stage1Model, TrainSettings,
};

const LEN: usize = 32;

struct Trained {
    stage1: Stage1Model,
    prior: PriorModel,
    mapper: Mapper,
    tau: f64,
    x_test: Tensor<f32>,
}

fn run(seed: u64) -> Trained {
    let ds = znormalize(make_synthetic(SyntheticKind::Sine, 60, LEN, 0.05, seed).unwrap());
    let x = ds.train_tensor();
    let labels = ds.train_labels();
    let c1 = Stage1Config { length: LEN, levels: 2, base_width: 4, blocks: 1, codebook_size: 8, code_dim: 4, unit_norm: false };
    let stage1 = train_stage1(&x, c1, &TrainSettings::new(60, seed)).unwrap().model;
    let tokens = stage1.tokenize(&x).unwrap();
    let pc = PriorConfig { seq_len: c1.tokens(), codebook_size: 8, num_classes: 1, dim: 16, layers: 1, heads: 2 };
    let prior = train_stage2(&tokens, Some(&labels), pc, &TrainSettings::new(40, seed)).unwrap().model;
    let rocket = rocket_fit(LEN, 50, seed).unwrap();
    let found = search_tau(&x, &labels, &stage1, &prior, &DEFAULT_CANDIDATES, Some(20), &rocket, 4, seed).unwrap();
    let unet = UNetConfig { levels: 2, base_channels: 4, attention: true };
    let mapper = train_stage3(&x, &stage1, found.tau_star, unet, &TrainSettings::new(30, seed)).unwrap().mapper;
    Trained { stage1, prior, mapper, tau: found.tau_star, x_test: ds.test_tensor() }
}

fn roundtrip(ck: Checkpoint) -> Checkpoint {
    Checkpoint::from_bytes(&ck.to_bytes()).unwrap()
}

#[test]
fn three_stages_generate_and_refine_finite_series() {
    let t = run(3);
    assert!(DEFAULT_CANDIDATES.contains(&t.tau));
    let (x_hat, labels) = generate_per_class(&t.stage1, &t.prior, &[7], 4, &mut rng::stream(3, "gen")).unwrap();
    assert_eq!(x_hat.shape(), &[7, 1, LEN]);
    assert_eq!(labels, vec![0; 7]);
    let refined = t.mapper.refine(&x_hat).unwrap();
    assert_eq!(refined.shape(), x_hat.shape());
    assert!(refined.data().iter().all(|v| v.is_finite()));
    let recon = t.stage1.reconstruct(&t.x_test).unwrap();
    assert_eq!(recon.shape(), t.x_test.shape());
}

#[test]
fn checkpoints_reload_to_identical_outputs() {
    let t = run(5);
    let extra = KvMap::new();
    let stage1 = Stage1Model::load(&roundtrip(t.stage1.save(None, &extra))).unwrap();
    let prior = PriorModel::load(&roundtrip(t.prior.save(None, &extra))).unwrap();
    let mapper = Mapper::load(&roundtrip(t.mapper.save(None, &extra))).unwrap();
    assert_eq!(stage1.tokenize(&t.x_test).unwrap(), t.stage1.tokenize(&t.x_test).unwrap());
    let a = generate_per_class(&t.stage1, &t.prior, &[4], 4, &mut rng::stream(1, "g")).unwrap().0;
    let b = generate_per_class(&stage1, &prior, &[4], 4, &mut rng::stream(1, "g")).unwrap().0;
    assert_eq!(a.data(), b.data());
    assert_eq!(t.mapper.refine(&a).unwrap().data(), mapper.refine(&a).unwrap().data());
}

#[test]
fn same_seed_same_models() {
    let (a, b) = (run(11), run(11));
    assert_eq!(a.tau, b.tau);
    assert_eq!(a.stage1.save(None, &KvMap::new()).to_bytes(), b.stage1.save(None, &KvMap::new()).to_bytes());
    assert_eq!(a.mapper.refine(&a.x_test).unwrap().data(), b.mapper.refine(&b.x_test).unwrap().data());
}
