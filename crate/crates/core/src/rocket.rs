//! ROCKET random convolutional features: PPV and max per random dilated kernel.

use nmvq_autodiff::rng;
use nmvq_autodiff::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const DEFAULT_KERNELS: usize = 10_000;
pub const KERNEL_LENGTHS: [usize; 3] = [7, 9, 11];

#[derive(Debug, Clone, PartialEq)]
pub struct RocketKernel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub dilation: usize,
    /// Zeros added on each side.
    pub padding: usize,
}

impl RocketKernel {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Convolution outputs over `x`.
    pub fn convolve(&self, x: &[f64]) -> Vec<f64> {
        let span = (self.len() - 1) * self.dilation;
        let padded = x.len() + 2 * self.padding;
        if padded <= span {
            return Vec::new();
        }
        (0..padded - span)
            .map(|i| {
                let mut acc = self.bias;
                for (j, &w) in self.weights.iter().enumerate() {
                    let pos = (i + j * self.dilation) as isize - self.padding as isize;
                    if pos >= 0 && (pos as usize) < x.len() {
                        acc += w * x[pos as usize];
                    }
                }
                acc
            })
            .collect()
    }

    /// `(ppv, max)` of the convolution outputs.
    pub fn features(&self, x: &[f64]) -> (f64, f64) {
        let out = self.convolve(x);
        if out.is_empty() {
            return (0.0, 0.0);
        }
        let positive = out.iter().filter(|&&v| v > 0.0).count();
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (positive as f64 / out.len() as f64, max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocketTransform {
    pub kernels: Vec<RocketKernel>,
    pub length: usize,
    pub seed: u64,
}

impl RocketTransform {
    pub fn feature_dim(&self) -> usize {
        2 * self.kernels.len()
    }

    pub fn apply_series(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature_dim());
        for k in &self.kernels {
            let (ppv, max) = k.features(x);
            out.push(ppv);
            out.push(max);
        }
        out
    }

    /// Features for every row of `x[n, 1, L]`: `[ppv_0, max_0, ppv_1, ...]`.
    pub fn apply(&self, x: &Tensor<f32>) -> Result<FeatureMatrix> {
        let n = x.dim(0);
        if x.ndim() != 3 || x.dim(2) != self.length {
            return Err(Error::Usage(format!("transform fitted for length {}, got {:?}", self.length, x.shape())));
        }
        let mut data = Vec::with_capacity(n * self.feature_dim());
        let mut series = vec![0.0; self.length];
        for row in x.data().chunks(self.length.max(1)).take(n) {
            for (s, &v) in series.iter_mut().zip(row) {
                *s = f64::from(v);
            }
            data.extend(self.apply_series(&series));
        }
        FeatureMatrix::new(n, self.feature_dim(), data)
    }
}

/// Samples `num_kernels` kernels for series of `length`: kernel length from
/// {7, 9, 11}, mean-centred N(0, 1) weights, bias U(-1, 1), dilation
/// `floor(2^a)` with `a ~ U(0, log2((L - 1) / (k - 1)))`, and padding
/// `(k - 1) * dilation / 2` on half of the kernels.
pub fn rocket_fit(length: usize, num_kernels: usize, seed: u64) -> Result<RocketTransform> {
    if length < 12 {
        return Err(Error::Config(format!("ROCKET needs series of length >= 12, got {length}")));
    }
    if num_kernels == 0 {
        return Err(Error::Config("ROCKET needs at least one kernel".into()));
    }
    let mut rng = rng::stream(seed, "rocket");
    let kernels = (0..num_kernels)
        .map(|_| {
            let k = KERNEL_LENGTHS[rng.random_range(0..KERNEL_LENGTHS.len())];
            let mut weights: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mean = weights.iter().sum::<f64>() / k as f64;
            weights.iter_mut().for_each(|w| *w -= mean);
            let bias = rng.random_range(-1.0..1.0);
            let top = ((length - 1) as f64 / (k - 1) as f64).log2();
            let a = rng.random_range(0.0..top);
            let dilation = (2f64.powf(a).floor() as usize).max(1);
            let padding = if rng.random::<bool>() { (k - 1) * dilation / 2 } else { 0 };
            RocketKernel { weights, bias, dilation, padding }
        })
        .collect();
    Ok(RocketTransform { kernels, length, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nmvq_autodiff::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_kernel() {
        let k = RocketKernel { weights: vec![1.0, 0.0, -1.0], bias: 0.0, dilation: 1, padding: 0 };
        assert_eq!(k.convolve(&[0.0, 1.0, 2.0, 3.0]), vec![-2.0, -2.0]);
        assert_eq!(k.features(&[0.0, 1.0, 2.0, 3.0]), (0.0, -2.0));
    }

    #[test]
    fn zero_and_saturated_kernels() {
        let zero = RocketKernel { weights: vec![0.0; 7], bias: 0.0, dilation: 2, padding: 6 };
        assert_eq!(zero.features(&[0.5; 20]), (0.0, 0.0));
        let pos = RocketKernel { weights: vec![1.0; 7], bias: 0.1, dilation: 1, padding: 0 };
        assert_eq!(pos.features(&[1.0; 20]).0, 1.0);
    }

    #[test]
    fn padding_keeps_length() {
        let k = RocketKernel { weights: vec![1.0; 9], bias: 0.0, dilation: 3, padding: 12 };
        assert_eq!(k.convolve(&[1.0; 40]).len(), 40);
    }

    #[test]
    fn fit_ranges_and_determinism() {
        let t = rocket_fit(128, 500, 3).unwrap();
        assert_eq!(t, rocket_fit(128, 500, 3).unwrap());
        assert_ne!(t, rocket_fit(128, 500, 4).unwrap());
        for k in &t.kernels {
            assert!(KERNEL_LENGTHS.contains(&k.len()));
            assert!(k.weights.iter().sum::<f64>().abs() < 1e-9);
            assert!((-1.0..1.0).contains(&k.bias));
            assert!(k.dilation >= 1 && (k.len() - 1) * k.dilation < 128);
            assert!(k.padding == 0 || k.padding == (k.len() - 1) * k.dilation / 2);
        }
        assert_eq!(rocket_fit(128, 1, 0).unwrap().feature_dim(), 2);
        assert!(rocket_fit(11, 10, 0).is_err());
        assert!(rocket_fit(12, 0, 0).is_err());
    }

    #[test]
    fn kernel_lengths_are_uniform() {
        let t = rocket_fit(64, 10_000, 0).unwrap();
        let n = t.kernels.len() as f64;
        let (p, sd) = (1.0 / 3.0, (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt());
        for len in KERNEL_LENGTHS {
            let c = t.kernels.iter().filter(|k| k.len() == len).count() as f64;
            assert!((c - n * p).abs() <= 3.0 * sd, "length {len}: {c}");
        }
    }

    #[test]
    fn apply_checks_length_and_rows_are_independent() {
        let t = rocket_fit(32, 20, 1).unwrap();
        let mut rng = seeded(2);
        let x = Tensor::new([3, 1, 32], (0..96).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = t.apply(&x).unwrap();
        assert_eq!((f.rows(), f.cols()), (3, 40));
        let reversed = Tensor::new([3, 1, 32], [&x.data()[64..], &x.data()[32..64], &x.data()[..32]].concat()).unwrap();
        let g = t.apply(&reversed).unwrap();
        assert_eq!(f.row(0), g.row(2));
        assert_eq!(f.row(1), g.row(1));
        assert!(t.apply(&Tensor::zeros([1, 1, 30])).is_err());
    }

    proptest! {
        #[test]
        fn ppv_in_unit_interval_and_scale_invariant(seed in 0u64..500, e in -8i32..8) {
            // power-of-two scales are exact, so the sign pattern must be identical
            let scale = 2f64.powi(e);
            let t = rocket_fit(40, 5, seed).unwrap();
            let mut rng = seeded(seed);
            let x: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
            for k in &t.kernels {
                let (ppv, _) = k.features(&x);
                prop_assert!((0.0..=1.0).contains(&ppv));
                let scaled = RocketKernel {
                    weights: k.weights.iter().map(|w| w * scale).collect(),
                    bias: k.bias * scale,
                    ..k.clone()
                };
                prop_assert_eq!(scaled.features(&x).0, ppv);
            }
        }
    }
}
