//! Fréchet distance, inception score, per-class FID and PCA projection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Column means and the unbiased covariance, symmetrized.
pub fn gaussian_stats(f: &FeatureMatrix) -> Result<GaussianStats> {
    let n = f.rows();
    if n < 2 {
        return Err(Error::Usage(format!("statistics need at least 2 rows, got {n}")));
    }
    let m = f.to_dmatrix();
    let mean = DVector::from_iterator(f.cols(), m.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Usage(format!("matrix of shape {:?} is not square", a.shape())));
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Usage(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    Ok(())
}

/// Eigenvalues of the symmetric part of `a`, negative ones clamped to zero.
fn psd_eigen(a: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (a + a.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    e.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    e
}

/// Symmetric square root `S` of a symmetric positive semidefinite `A`.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a)?;
    let e = psd_eigen(a);
    let root = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    let s = &e.eigenvectors * root * e.eigenvectors.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

fn trace_sqrt_psd(a: &DMatrix<f64>) -> f64 {
    psd_eigen(a).eigenvalues.iter().map(|v| v.sqrt()).sum()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Usage(format!("FID between dimensions {} and {}", a.mean.len(), b.mean.len())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = matrix_sqrt_psd(&a.cov)?;
    let cross = trace_sqrt_psd(&(&ra * &b.cov * &ra));
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

fn centered(f: &FeatureMatrix) -> (DMatrix<f64>, DVector<f64>) {
    let mut m = f.to_dmatrix();
    let n = f.rows() as f64;
    let mean = DVector::from_iterator(f.cols(), m.column_iter().map(|c| c.sum() / n));
    for mut row in m.row_iter_mut() {
        row -= mean.transpose();
    }
    (m, mean)
}

/// FID computed from the centered sample matrices without forming the
/// `D x D` covariances. With `A`, `B` the centered rows,
/// `Tr((S_a^1/2 S_b S_a^1/2)^1/2) = |A B^T|_* / sqrt((n_a - 1)(n_b - 1))`.
pub fn fid_low_rank(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Usage(format!("FID between dimensions {} and {}", a.cols(), b.cols())));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Usage("statistics need at least 2 rows".into()));
    }
    let (ca, ma) = centered(a);
    let (cb, mb) = centered(b);
    let (na, nb) = ((a.rows() - 1) as f64, (b.rows() - 1) as f64);
    let nuclear = (&ca * cb.transpose()).singular_values().sum();
    let tr_a = ca.norm_squared() / na;
    let tr_b = cb.norm_squared() / nb;
    let diff = (ma - mb).norm_squared();
    Ok((diff + tr_a + tr_b - 2.0 * nuclear / (na * nb).sqrt()).max(0.0))
}

/// FID between two feature sets, using the sample-space form when the feature
/// dimension exceeds the smaller sample count.
pub fn fid_features(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.cols() > a.rows().min(b.rows()) {
        fid_low_rank(a, b)
    } else {
        fid(&gaussian_stats(a)?, &gaussian_stats(b)?)
    }
}

/// `exp(E_x KL(p(y|x) || p(y)))` over probability rows.
pub fn inception_score(probs: &FeatureMatrix) -> Result<f64> {
    let (n, c) = (probs.rows(), probs.cols());
    if n == 0 || c == 0 {
        return Err(Error::Usage("inception score needs a nonempty probability matrix".into()));
    }
    for i in 0..n {
        let row = probs.row(i);
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Usage(format!("row {i} is not a probability distribution")));
        }
    }
    let mut marginal = vec![0.0; c];
    for i in 0..n {
        for (m, &p) in marginal.iter_mut().zip(probs.row(i)) {
            *m += p / n as f64;
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for (&p, &m) in probs.row(i).iter().zip(&marginal) {
            if p > 0.0 {
                kl += p * (p / m).ln();
            }
        }
    }
    Ok((kl / n as f64).exp())
}

/// Per-class FIDs between real and generated features.
pub fn per_class_fid(
    real: &FeatureMatrix,
    real_labels: &[usize],
    gen: &FeatureMatrix,
    gen_labels: &[usize],
) -> Result<Vec<f64>> {
    if real.rows() != real_labels.len() || gen.rows() != gen_labels.len() {
        return Err(Error::Usage("label count does not match feature rows".into()));
    }
    let classes = real_labels.iter().chain(gen_labels).max().map_or(0, |m| m + 1);
    (0..classes)
        .map(|c| {
            let r = real.select(|i| real_labels[i] == c);
            let g = gen.select(|i| gen_labels[i] == c);
            if r.rows() < 2 || g.rows() < 2 {
                return Err(Error::Usage(format!(
                    "class {c} has {} real and {} generated samples; need at least 2 of each",
                    r.rows(),
                    g.rows()
                )));
            }
            fid_features(&r, &g)
        })
        .collect()
}

/// Unweighted mean of the per-class FIDs.
pub fn cfid(real: &FeatureMatrix, real_labels: &[usize], gen: &FeatureMatrix, gen_labels: &[usize]) -> Result<f64> {
    let per = per_class_fid(real, real_labels, gen, gen_labels)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: DVector<f64>,
    /// One principal direction per row, by decreasing variance.
    pub components: DMatrix<f64>,
    pub variances: Vec<f64>,
}

impl PcaProjection {
    pub fn project(&self, f: &FeatureMatrix) -> Result<FeatureMatrix> {
        if f.cols() != self.mean.len() {
            return Err(Error::Usage(format!("projection fitted on {} features, got {}", self.mean.len(), f.cols())));
        }
        let mut m = f.to_dmatrix();
        for mut row in m.row_iter_mut() {
            row -= self.mean.transpose();
        }
        let p = m * self.components.transpose();
        let data = p.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        FeatureMatrix::new(f.rows(), self.components.nrows(), data)
    }
}

/// Top-`k` eigenvectors of the sample covariance.
pub fn pca_fit(f: &FeatureMatrix, k: usize) -> Result<PcaProjection> {
    if f.rows() < k.max(2) || k == 0 || k > f.cols() {
        return Err(Error::Usage(format!("PCA to {k} components needs at least {k} rows and columns")));
    }
    let stats = gaussian_stats(f)?;
    let e = SymmetricEigen::new(stats.cov);
    let mut order: Vec<usize> = (0..e.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = DMatrix::zeros(k, f.cols());
    let mut variances = Vec::with_capacity(k);
    for (r, &i) in order.iter().take(k).enumerate() {
        let mut v = e.eigenvectors.column(i).clone_owned();
        // sign convention: largest-magnitude entry positive
        let (imax, _) = v.iter().enumerate().fold((0, 0.0), |b, (j, x)| if x.abs() > b.1 { (j, x.abs()) } else { b });
        if v[imax] < 0.0 {
            v = -v;
        }
        components.set_row(r, &v.transpose());
        variances.push(e.eigenvalues[i].max(0.0));
    }
    Ok(PcaProjection { mean: stats.mean, components, variances })
}

/// `(old / new) * 100 - 100`: the improvement of a lower-is-better score.
pub fn change_lower_better(old: f64, new: f64) -> f64 {
    old / new * 100.0 - 100.0
}

/// `(new / old) * 100 - 100`: the improvement of a higher-is-better score.
pub fn change_higher_better(old: f64, new: f64) -> f64 {
    new / old * 100.0 - 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use nmvq_autodiff::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
        let mut rng = seeded(seed);
        FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn stats(mean: &[f64], cov: DMatrix<f64>) -> GaussianStats {
        GaussianStats { mean: DVector::from_row_slice(mean), cov }
    }

    #[test]
    fn stats_examples() {
        let same = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(gaussian_stats(&same).unwrap().cov, DMatrix::zeros(2, 2));
        let two = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let s = gaussian_stats(&two).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
        assert!(gaussian_stats(&FeatureMatrix::from_rows(&[vec![1.0]]).unwrap()).is_err());
    }

    #[test]
    fn stats_ignore_row_order() {
        let f = random_matrix(20, 4, 1);
        let rev: Vec<Vec<f64>> = (0..20).rev().map(|i| f.row(i).to_vec()).collect();
        let a = gaussian_stats(&f).unwrap();
        let b = gaussian_stats(&FeatureMatrix::from_rows(&rev).unwrap()).unwrap();
        assert!((a.cov - b.cov).amax() < 1e-14);
        assert!((a.mean - b.mean).amax() < 1e-15);
    }

    #[test]
    fn sqrt_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 9.0]));
        let s = matrix_sqrt_psd(&d).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 3.0]))).amax() < 1e-14);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matrix_sqrt_psd(&asym).is_err());
    }

    #[test]
    fn sqrt_reproduces_random_psd() {
        let mut rng = seeded(4);
        let b = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let a = b.transpose() * b;
        let s = matrix_sqrt_psd(&a).unwrap();
        assert!((&s * &s - &a).norm() / a.norm().max(1.0) < 1e-8);
    }

    #[test]
    fn fid_closed_forms() {
        let eye = DMatrix::<f64>::identity(3, 3);
        let a = stats(&[0.0, 1.0, 2.0], eye.clone());
        assert!(fid(&a, &a).unwrap() < 1e-8);
        let b = stats(&[1.0, -1.0, 2.5], eye);
        assert!((fid(&a, &b).unwrap() - (1.0 + 4.0 + 0.25)).abs() < 1e-8);
        let one = stats(&[0.0], DMatrix::from_element(1, 1, 1.0));
        let four = stats(&[0.0], DMatrix::from_element(1, 1, 4.0));
        assert!((fid(&one, &four).unwrap() - 1.0).abs() < 1e-10);
        assert!(fid(&one, &a).is_err());
    }

    #[test]
    fn low_rank_route_matches_covariance_route() {
        let scaled = |f: FeatureMatrix| {
            let data = f.data().iter().map(|v| v * 1.3 + 0.1).collect();
            FeatureMatrix::new(f.rows(), f.cols(), data).unwrap()
        };
        // full-rank covariances: both routes are exact up to rounding
        let (a, b) = (random_matrix(40, 10, 1), scaled(random_matrix(50, 10, 2)));
        let direct = fid(&gaussian_stats(&a).unwrap(), &gaussian_stats(&b).unwrap()).unwrap();
        let low = fid_low_rank(&a, &b).unwrap();
        assert!((direct - low).abs() < 1e-9 * direct.max(1.0), "{direct} vs {low}");
        // rank-deficient: the covariance route carries sqrt-of-rounding error from
        // the clamped null space, the sample-space route does not
        let (a, b) = (random_matrix(12, 30, 1), scaled(random_matrix(15, 30, 2)));
        let direct = fid(&gaussian_stats(&a).unwrap(), &gaussian_stats(&b).unwrap()).unwrap();
        let low = fid_low_rank(&a, &b).unwrap();
        assert!((direct - low).abs() < 1e-6 * direct.max(1.0), "{direct} vs {low}");
        assert_eq!(fid_features(&a, &b).unwrap(), low);
    }

    #[test]
    fn inception_examples() {
        let uniform = FeatureMatrix::new(4, 3, vec![1.0 / 3.0; 12]).unwrap();
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-9);
        let two = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((inception_score(&two).unwrap() - 2.0).abs() < 1e-9);
        for c in 2..=8 {
            let rows: Vec<Vec<f64>> = (0..3 * c).map(|i| (0..c).map(|j| f64::from(u8::from(i % c == j))).collect()).collect();
            let s = inception_score(&FeatureMatrix::from_rows(&rows).unwrap()).unwrap();
            assert!((s - c as f64).abs() < 1e-6);
        }
        let bad = FeatureMatrix::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(inception_score(&bad).is_err());
    }

    #[test]
    fn cfid_is_mean_of_class_fids() {
        let real = random_matrix(12, 2, 1);
        let gen = random_matrix(12, 2, 2);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let per = per_class_fid(&real, &labels, &gen, &labels).unwrap();
        let mut oracle = Vec::new();
        for c in 0..3 {
            let r = real.select(|i| labels[i] == c);
            let g = gen.select(|i| labels[i] == c);
            oracle.push(fid(&gaussian_stats(&r).unwrap(), &gaussian_stats(&g).unwrap()).unwrap());
        }
        assert_eq!(per.len(), 3);
        let mean = oracle.iter().sum::<f64>() / 3.0;
        assert!((cfid(&real, &labels, &gen, &labels).unwrap() - mean).abs() < 1e-10);
        assert!(cfid(&real, &labels, &real, &labels).unwrap() < 1e-8);
        let short: Vec<usize> = (0..12).map(|i| if i == 0 { 2 } else { i % 2 }).collect();
        let err = cfid(&real, &labels, &gen, &short).unwrap_err().to_string();
        assert!(err.contains("class 2"), "{err}");
    }

    #[test]
    fn pca_examples() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| { let t = i as f64; vec![t, 2.0 * t, -t] }).collect();
        let p = pca_fit(&FeatureMatrix::from_rows(&rows).unwrap(), 2).unwrap();
        assert!(p.variances[1].abs() < 1e-10);
        let g = &p.components * p.components.transpose();
        assert!((g - DMatrix::<f64>::identity(2, 2)).amax() < 1e-9);
        assert!(pca_fit(&FeatureMatrix::from_rows(&rows[..1]).unwrap(), 2).is_err());
    }

    #[test]
    fn change_formulas() {
        assert!((change_lower_better(7.85, 0.65) - 1107.692307692).abs() < 1e-6);
        assert_eq!(change_lower_better(3.0, 3.0), 0.0);
        assert!((change_higher_better(2.0, 3.0) - 50.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fid_is_symmetric_and_zero_on_self(seed in 0u64..200, d in 1usize..8) {
            let a = gaussian_stats(&random_matrix(3 * d + 3, d, seed)).unwrap();
            let b = gaussian_stats(&random_matrix(2 * d + 4, d, seed + 1000)).unwrap();
            prop_assert!(fid(&a, &a).unwrap() < 1e-8);
            prop_assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
        }

        #[test]
        fn inception_score_within_bounds(seed in 0u64..200, n in 1usize..30, c in 2usize..8) {
            let mut rng = seeded(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| {
                let r: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            }).collect();
            let s = inception_score(&FeatureMatrix::from_rows(&rows).unwrap()).unwrap();
            prop_assert!(s >= 1.0 - 1e-9 && s <= c as f64 + 1e-9);
        }
    }
}
