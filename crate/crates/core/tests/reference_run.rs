//! Stage-1 reference run on noiseless sines at the desk-scale model size.

use nmvq_core::dataset::{make_synthetic, znormalize, SyntheticKind};
use nmvq_core::tsgen::{mse, train_stage1, Stage1Config, TrainSettings};

#[test]
fn noiseless_sine_reconstructs_below_0_1() {
    let ds = znormalize(make_synthetic(SyntheticKind::Sine, 200, 128, 0.0, 0).unwrap());
    let config = Stage1Config { levels: 3, base_width: 16, blocks: 1, codebook_size: 64, ..Stage1Config::default() };
    let run = train_stage1(&ds.train_tensor(), config, &TrainSettings::new(2000, 0)).unwrap();
    let (first, last) = run.log.head_tail_means(50).unwrap();
    assert!(last < first, "loss {first} -> {last}");
    let x = ds.test_tensor();
    let err = mse(&run.model.reconstruct(&x).unwrap(), &x);
    assert!(err < 0.1, "test reconstruction MSE {err}");
    eprintln!("reference run: loss {first:.4} -> {last:.4}, test MSE {err:.5}");
}
