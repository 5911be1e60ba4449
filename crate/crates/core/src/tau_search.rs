//! Temperature search: the τ whose stochastic variants of the training set sit
//! closest (ROCKET-feature FID) to generated samples.

use nmvq_autodiff::rng;
use nmvq_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::features::l2_normalize_rows;
use crate::metrics::fid_features;
use crate::rocket::RocketTransform;
use crate::tsgen::{generate_per_class, PriorModel, Stage1Model};

pub const DEFAULT_CANDIDATES: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 4.0];
pub const MAX_GENERATED: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct TauSearchResult {
    pub candidates: Vec<f64>,
    pub fid_per_tau: Vec<f64>,
    pub tau_star: f64,
    pub rocket_seed: u64,
    pub rocket_kernels: usize,
}

impl TauSearchResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,fid\n");
        for (t, f) in self.candidates.iter().zip(&self.fid_per_tau) {
            s.push_str(&format!("{t},{f:e}\n"));
        }
        s
    }
}

/// Smallest FID wins; equal FIDs go to the smaller τ.
pub fn argmin_tau(candidates: &[f64], fids: &[f64]) -> f64 {
    let mut best = 0;
    for i in 1..candidates.len() {
        let better = fids[i] < fids[best] || (fids[i] == fids[best] && candidates[i] < candidates[best]);
        if better {
            best = i;
        }
    }
    candidates[best]
}

/// Scores each τ against a fixed set of generated samples `x_hat`. Variants of
/// the whole training set are drawn fresh per τ from a stream keyed on `seed`.
pub fn search_tau_against(
    x_train: &Tensor<f32>,
    stage1: &Stage1Model,
    x_hat: &Tensor<f32>,
    candidates: &[f64],
    rocket: &RocketTransform,
    seed: u64,
) -> Result<TauSearchResult> {
    if candidates.is_empty() {
        return Err(Error::Usage("τ search needs at least one candidate".into()));
    }
    if let Some(bad) = candidates.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::Usage(format!("τ candidates must be positive, got {bad}")));
    }
    let generated = l2_normalize_rows(&rocket.apply(x_hat)?);
    let fid_per_tau = candidates
        .iter()
        .map(|&tau| {
            let mut r = rng::stream(seed, &format!("tau_search/{tau}"));
            let variants = stage1.stochastic_variant(x_train, tau, &mut r)?;
            let feats = l2_normalize_rows(&rocket.apply(&variants)?);
            fid_features(&generated, &feats)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TauSearchResult {
        tau_star: argmin_tau(candidates, &fid_per_tau),
        candidates: candidates.to_vec(),
        fid_per_tau,
        rocket_seed: rocket.seed,
        rocket_kernels: rocket.kernels.len(),
    })
}

/// Per-class sample counts proportional to `labels`, summing to `n`.
pub fn proportional_counts(labels: &[usize], classes: usize, n: usize) -> Vec<usize> {
    let k = classes.max(1);
    let mut hist = vec![0usize; k];
    for &l in labels {
        hist[l.min(k - 1)] += 1;
    }
    let total = labels.len().max(1);
    let mut counts: Vec<usize> = hist.iter().map(|&h| h * n / total).collect();
    let mut c = 0;
    while counts.iter().sum::<usize>() < n {
        counts[c % k] += 1;
        c += 1;
    }
    counts
}

/// Generates `n_gen` samples once (default `min(|train|, 1000)`, class
/// proportions following the training labels) and runs [`search_tau_against`].
#[allow(clippy::too_many_arguments)]
pub fn search_tau(
    x_train: &Tensor<f32>,
    train_labels: &[usize],
    stage1: &Stage1Model,
    prior: &PriorModel,
    candidates: &[f64],
    n_gen: Option<usize>,
    rocket: &RocketTransform,
    iterations: usize,
    seed: u64,
) -> Result<TauSearchResult> {
    if stage1.trained_steps == 0 || prior.trained_steps == 0 {
        return Err(Error::Config("τ search needs trained stage-1 and stage-2 checkpoints".into()));
    }
    let n = n_gen.unwrap_or_else(|| x_train.dim(0).min(MAX_GENERATED));
    let counts = if prior.config.num_classes > 0 {
        proportional_counts(train_labels, prior.config.num_classes, n)
    } else {
        vec![n]
    };
    let mut r = rng::stream(seed, "tau_search/generate");
    let (x_hat, _) = generate_per_class(stage1, prior, &counts, iterations, &mut r)?;
    search_tau_against(x_train, stage1, &x_hat, candidates, rocket, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_synthetic, to_tensor, SyntheticKind};
    use crate::rocket::rocket_fit;
    use crate::tsgen::{PriorConfig, Stage1Config};

    #[test]
    fn ties_go_to_the_smaller_tau() {
        assert_eq!(argmin_tau(&[0.1, 0.5, 1.0], &[3.0, 1.0, 1.0]), 0.5);
        assert_eq!(argmin_tau(&[2.0, 1.0], &[1.0, 1.0]), 1.0);
        assert_eq!(argmin_tau(&[1.0], &[7.0]), 1.0);
    }

    #[test]
    fn proportional_counts_sum_to_n() {
        assert_eq!(proportional_counts(&[0, 0, 1, 1], 2, 5), vec![3, 2]);
        assert_eq!(proportional_counts(&[0, 1, 1, 1], 2, 8), vec![2, 6]);
    }

    fn setup() -> (Tensor<f32>, Stage1Model, RocketTransform) {
        let ds = make_synthetic(SyntheticKind::Sine, 40, 32, 0.0, 0).unwrap();
        let cfg = Stage1Config { length: 32, levels: 2, base_width: 4, blocks: 1, codebook_size: 8, code_dim: 4, unit_norm: true };
        (to_tensor(&ds.train), Stage1Model::new(cfg, 0).unwrap(), rocket_fit(32, 50, 0).unwrap())
    }

    #[test]
    fn single_candidate_and_reproducible_table() {
        let (x, s1, rocket) = setup();
        let x_hat = s1.reconstruct(&x).unwrap();
        let r = search_tau_against(&x, &s1, &x_hat, &[1.0], &rocket, 0).unwrap();
        assert_eq!(r.tau_star, 1.0);
        let a = search_tau_against(&x, &s1, &x_hat, &DEFAULT_CANDIDATES, &rocket, 3).unwrap();
        let b = search_tau_against(&x, &s1, &x_hat, &DEFAULT_CANDIDATES, &rocket, 3).unwrap();
        assert_eq!(a, b);
        let min = a.fid_per_tau.iter().copied().fold(f64::INFINITY, f64::min);
        let at = a.candidates.iter().position(|&t| t == a.tau_star).unwrap();
        assert_eq!(a.fid_per_tau[at], min);
        assert_eq!(a.rocket_seed, 0);
        assert!(search_tau_against(&x, &s1, &x_hat, &[], &rocket, 0).is_err());
        assert!(search_tau_against(&x, &s1, &x_hat, &[0.0], &rocket, 0).is_err());
    }

    #[test]
    fn untrained_models_are_rejected() {
        let (x, s1, rocket) = setup();
        let prior = PriorModel::new(
            PriorConfig { seq_len: 8, codebook_size: 8, num_classes: 0, dim: 8, layers: 1, heads: 1 },
            0,
        )
        .unwrap();
        let err = search_tau(&x, &[], &s1, &prior, &[1.0], Some(4), &rocket, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
