use nmvq_autodiff::gradcheck::{self, uniform};
use nmvq_autodiff::rng;
use nmvq_autodiff::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_matches_central_differences() {
    for (name, worst) in gradcheck::run_op_suite(10, 2024).unwrap() {
        assert!(worst < 1e-6, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn two_layer_conv_net_matches_central_differences() {
    let mut r = rng::seeded(11);
    let inputs = [
        uniform(&[2, 2, 16], &mut r),
        uniform(&[4, 2, 3], &mut r),
        uniform(&[4], &mut r),
        uniform(&[3, 4, 3], &mut r),
        uniform(&[3], &mut r),
    ];
    let report = gradcheck::check(&inputs, 1e-5, 5, |g, v| {
        let h = g.conv1d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
        let h = g.gelu(h)?;
        let y = g.conv1d(h, v[3], Some(v[4]), 2, 2, 2)?;
        let target = g.input(Tensor::zeros(g.shape(y).to_vec()));
        g.mse_loss(y, target)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    assert_eq!(report.checked, 2 * 2 * 16 + 4 * 2 * 3 + 4 + 3 * 4 * 3 + 3);
}

fn conv_f32(x: &[f32], w: &Tensor<f32>) -> Vec<f32> {
    let mut g = Graph::<f32>::new();
    let xv = g.input(Tensor::new([1, 2, x.len() / 2], x.to_vec()).unwrap());
    let wv = g.input(w.clone());
    let y = g.conv1d(xv, wv, None, 1, 2, 1).unwrap();
    g.value(y).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_its_input(
        x1 in prop::collection::vec(-1.0f32..1.0, 24),
        x2 in prop::collection::vec(-1.0f32..1.0, 24),
        w in prop::collection::vec(-1.0f32..1.0, 9),
        a in -2.0f32..2.0,
        b in -2.0f32..2.0,
    ) {
        let w = Tensor::new([3, 2, 3], w.iter().cycle().take(18).copied().collect()).unwrap();
        let mixed: Vec<f32> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let lhs = conv_f32(&mixed, &w);
        let (y1, y2) = (conv_f32(&x1, &w), conv_f32(&x2, &w));
        for ((l, p), q) in lhs.iter().zip(&y1).zip(&y2) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rows_are_positive_and_normalized(row in prop::collection::vec(-1.0f64..1.0, 1..32)) {
        let mut g = Graph::<f64>::new();
        let n = row.len();
        let x = g.input(Tensor::new([1, n], row).unwrap());
        let y = g.softmax(x).unwrap();
        let out = g.value(y).data();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.iter().all(|&p| p > 0.0));
    }
}
