//! Codebook, nearest-code quantization and stochastic (temperature) quantization.

use nmvq_autodiff::rng::Rng;
use rand::Rng as _;

use crate::checkpoint::{ArrayData, Checkpoint};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 1024;
pub const DEFAULT_DIM: usize = 8;
pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_DEAD_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    codes: Vec<f32>,
    ema_count: Vec<f64>,
    ema_sum: Vec<f64>,
    usage: Vec<f64>,
    pub decay: f64,
    pub dead_threshold: f64,
    /// Keep every code on the unit sphere after updates.
    pub unit_norm: bool,
}

impl Codebook {
    pub fn new(k: usize, d: usize, codes: Vec<f32>) -> Result<Self> {
        if k == 0 || d == 0 || codes.len() != k * d {
            return Err(Error::Usage(format!("codebook of {k} x {d} with {} values", codes.len())));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("codebook values must be finite".into()));
        }
        Ok(Codebook {
            k,
            d,
            ema_count: vec![1.0; k],
            ema_sum: codes.iter().map(|&v| f64::from(v)).collect(),
            usage: vec![1.0; k],
            codes,
            decay: DEFAULT_DECAY,
            dead_threshold: DEFAULT_DEAD_THRESHOLD,
            unit_norm: false,
        })
    }

    /// Codes drawn uniformly from [-1, 1], normalized when `unit_norm` is set.
    pub fn random(k: usize, d: usize, unit_norm: bool, rng: &mut Rng) -> Self {
        let mut codes: Vec<f32> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if unit_norm {
            codes.chunks_mut(d).for_each(normalize);
        }
        let mut cb = Codebook::new(k, d, codes).expect("valid random codebook");
        cb.unit_norm = unit_norm;
        cb
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn codes(&self) -> &[f32] {
        &self.codes
    }

    pub fn code(&self, i: usize) -> &[f32] {
        &self.codes[i * self.d..(i + 1) * self.d]
    }

    pub fn usage(&self) -> &[f64] {
        &self.usage
    }

    /// Replaces every code with a randomly chosen row of `z`.
    pub fn init_from(&mut self, z: &[f32], rng: &mut Rng) {
        let rows = z.len() / self.d;
        if rows == 0 {
            return;
        }
        for i in 0..self.k {
            let r = rng.random_range(0..rows);
            self.set_code(i, &z[r * self.d..(r + 1) * self.d]);
        }
    }

    fn set_code(&mut self, i: usize, v: &[f32]) {
        let d = self.d;
        let slot = &mut self.codes[i * d..(i + 1) * d];
        slot.copy_from_slice(v);
        if self.unit_norm {
            normalize(slot);
        }
        self.ema_count[i] = 1.0;
        for j in 0..d {
            self.ema_sum[i * d + j] = f64::from(self.codes[i * d + j]);
        }
        self.usage[i] = 1.0;
    }

    fn check_dim(&self, z: &[f32]) -> Result<usize> {
        if z.len() % self.d != 0 {
            return Err(Error::Usage(format!("latent of {} values is not a multiple of dimension {}", z.len(), self.d)));
        }
        Ok(z.len() / self.d)
    }

    /// Euclidean distances from `v` to every code, in f64.
    pub fn distances(&self, v: &[f32]) -> Vec<f64> {
        self.codes
            .chunks(self.d)
            .map(|c| c.iter().zip(v).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.config.set(&format!("{prefix}k"), self.k).set(&format!("{prefix}d"), self.d);
        ck.config.set(&format!("{prefix}decay"), self.decay);
        ck.config.set(&format!("{prefix}dead_threshold"), self.dead_threshold);
        ck.config.set(&format!("{prefix}unit_norm"), self.unit_norm);
        ck.push(format!("{prefix}codes"), vec![self.k, self.d], ArrayData::F32(self.codes.clone()));
        ck.push(format!("{prefix}ema_count"), vec![self.k], ArrayData::F64(self.ema_count.clone()));
        ck.push(format!("{prefix}ema_sum"), vec![self.k, self.d], ArrayData::F64(self.ema_sum.clone()));
        ck.push(format!("{prefix}usage"), vec![self.k], ArrayData::F64(self.usage.clone()));
    }

    pub fn load_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let k: usize = ck.config.require(&format!("{prefix}k"))?;
        let d: usize = ck.config.require(&format!("{prefix}d"))?;
        let codes = ck.tensor(&format!("{prefix}codes"))?;
        if codes.shape() != [k, d] {
            return Err(Error::Checkpoint(format!("codebook shape {:?}, expected [{k}, {d}]", codes.shape())));
        }
        let mut cb = Codebook::new(k, d, codes.into_data())?;
        cb.decay = ck.config.require(&format!("{prefix}decay"))?;
        cb.dead_threshold = ck.config.require(&format!("{prefix}dead_threshold"))?;
        cb.unit_norm = ck.config.require(&format!("{prefix}unit_norm"))?;
        cb.ema_count = ck.tensor_f64(&format!("{prefix}ema_count"))?.into_data();
        cb.ema_sum = ck.tensor_f64(&format!("{prefix}ema_sum"))?.into_data();
        cb.usage = ck.tensor_f64(&format!("{prefix}usage"))?.into_data();
        if cb.ema_count.len() != k || cb.ema_sum.len() != k * d || cb.usage.len() != k {
            return Err(Error::Checkpoint("codebook statistics do not match its size".into()));
        }
        Ok(cb)
    }
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Row-major latent vectors (`rows x d`) with their code assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub z_q: Vec<f32>,
    pub tokens: Vec<usize>,
}

/// Nearest code per row; ties go to the smallest index.
pub fn quantize(z: &[f32], cb: &Codebook) -> Result<Quantized> {
    let rows = cb.check_dim(z)?;
    let mut tokens = Vec::with_capacity(rows);
    for v in z.chunks(cb.d) {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in cb.codes.chunks(cb.d).enumerate() {
            let dist: f64 = c.iter().zip(v).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum();
            if dist < best.0 {
                best = (dist, k);
            }
        }
        tokens.push(best.1);
    }
    let z_q = lookup(&tokens, cb)?;
    Ok(Quantized { z_q, tokens })
}

/// Softmax of `-distance / tau`, max-shifted.
pub fn softmax_neg_distances(distances: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Usage(format!("temperature must be positive, got {tau}")));
    }
    let logits: Vec<f64> = distances.iter().map(|&d| -d / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

pub fn svq_distribution(z_n: &[f32], cb: &Codebook, tau: f64) -> Result<Vec<f64>> {
    if z_n.len() != cb.d {
        return Err(Error::Usage(format!("vector of dimension {}, codebook dimension {}", z_n.len(), cb.d)));
    }
    softmax_neg_distances(&cb.distances(z_n), tau)
}

/// Inverse-CDF draw from `p` with one uniform variate.
pub fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    // rounding left `u` above the accumulated mass; take the last nonzero entry
    p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// Samples one code per row from [`svq_distribution`].
pub fn stochastic_quantize(z: &[f32], cb: &Codebook, tau: f64, rng: &mut Rng) -> Result<Quantized> {
    cb.check_dim(z)?;
    if !(tau > 0.0) {
        return Err(Error::Usage(format!("temperature must be positive, got {tau}")));
    }
    let mut tokens = Vec::with_capacity(z.len() / cb.d);
    for v in z.chunks(cb.d) {
        let p = softmax_neg_distances(&cb.distances(v), tau)?;
        tokens.push(sample_categorical(&p, rng));
    }
    let z_q = lookup(&tokens, cb)?;
    Ok(Quantized { z_q, tokens })
}

pub fn lookup(tokens: &[usize], cb: &Codebook) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(tokens.len() * cb.d);
    for &t in tokens {
        if t >= cb.k {
            return Err(Error::Usage(format!("token {t} out of range for {} codes", cb.k)));
        }
        out.extend_from_slice(cb.code(t));
    }
    Ok(out)
}

/// Moving-average update of the assigned codes toward their batch members.
///
/// For each code with `c` assigned rows summing to `s`:
/// `N <- decay*N + (1-decay)*c`, `M <- decay*M + (1-decay)*s`, `code = M / N`.
/// Codes without assignments keep their value. Codes whose usage average falls
/// below `dead_threshold` restart from a random row of `z`.
pub fn codebook_update(cb: &mut Codebook, z: &[f32], tokens: &[usize], rng: &mut Rng) -> Result<()> {
    let rows = cb.check_dim(z)?;
    if rows != tokens.len() {
        return Err(Error::Usage(format!("{rows} latent rows but {} tokens", tokens.len())));
    }
    let d = cb.d;
    let mut counts = vec![0usize; cb.k];
    let mut sums = vec![0.0f64; cb.k * d];
    for (v, &t) in z.chunks(d).zip(tokens) {
        if t >= cb.k {
            return Err(Error::Usage(format!("token {t} out of range for {} codes", cb.k)));
        }
        counts[t] += 1;
        for j in 0..d {
            sums[t * d + j] += f64::from(v[j]);
        }
    }
    let a = 1.0 - cb.decay;
    for k in 0..cb.k {
        cb.usage[k] = cb.decay * cb.usage[k] + a * counts[k] as f64;
        if counts[k] == 0 {
            continue;
        }
        cb.ema_count[k] = cb.decay * cb.ema_count[k] + a * counts[k] as f64;
        for j in 0..d {
            let m = &mut cb.ema_sum[k * d + j];
            *m = cb.decay * *m + a * sums[k * d + j];
            cb.codes[k * d + j] = (*m / cb.ema_count[k]) as f32;
        }
        if cb.unit_norm {
            normalize(&mut cb.codes[k * d..(k + 1) * d]);
        }
    }
    if rows > 0 && cb.dead_threshold > 0.0 {
        for k in 0..cb.k {
            if cb.usage[k] < cb.dead_threshold {
                let r = rng.random_range(0..rows);
                let v = z[r * d..(r + 1) * d].to_vec();
                cb.set_code(k, &v);
            }
        }
    }
    Ok(())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nmvq_autodiff::rng::seeded;
    use proptest::prelude::*;

    fn cb(k: usize, d: usize, codes: &[f32]) -> Codebook {
        Codebook::new(k, d, codes.to_vec()).unwrap()
    }

    fn brute_force(z: &[f32], codes: &[f32], d: usize) -> Vec<usize> {
        z.chunks(d)
            .map(|v| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for k in 0..codes.len() / d {
                    let mut s = 0.0;
                    for j in 0..d {
                        let diff = f64::from(v[j]) - f64::from(codes[k * d + j]);
                        s += diff * diff;
                    }
                    if s < best_d {
                        best_d = s;
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn nearest_neighbour_examples() {
        let book = cb(2, 1, &[0.0, 1.0]);
        let q = quantize(&[0.2], &book).unwrap();
        assert_eq!((q.tokens, q.z_q), (vec![0], vec![0.0]));
        let q = quantize(&[1.0], &book).unwrap();
        assert_eq!(q.tokens, vec![1]);
        assert_eq!(book.distances(&[1.0])[1], 0.0);
        // equidistant: smallest index wins
        assert_eq!(quantize(&[0.5], &book).unwrap().tokens, vec![0]);
        assert!(quantize(&[0.0, 1.0, 2.0], &cb(1, 2, &[0.0, 0.0])).is_err());
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = seeded(3);
        let book = Codebook::random(16, 4, false, &mut rng);
        let z: Vec<f32> = (0..4 * 200).map(|_| rng.random_range(-1.5..1.5)).collect();
        assert_eq!(quantize(&z, &book).unwrap().tokens, brute_force(&z, book.codes(), 4));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_neg_distances(&[1.0, 2.0], 1.0).unwrap();
        let (a, b) = ((-1.0f64).exp(), (-2.0f64).exp());
        assert!((p[0] - a / (a + b)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        assert_eq!(softmax_neg_distances(&[0.3], 0.01).unwrap(), vec![1.0]);
        let p = softmax_neg_distances(&[0.7, 0.7], 3.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(softmax_neg_distances(&[1.0], 0.0).is_err());
        assert!(softmax_neg_distances(&[1.0], -1.0).is_err());
    }

    #[test]
    fn tiny_temperature_concentrates_on_argmin() {
        let book = cb(3, 1, &[0.0, 1.0, -2.0]);
        let p = svq_distribution(&[0.7], &book, 1e-9).unwrap();
        assert!(p[1] > 1.0 - 1e-9);
        let mut rng = seeded(0);
        let z = [0.7f32, -1.2, 0.1];
        let hard = quantize(&z, &book).unwrap().tokens;
        for _ in 0..1000 {
            assert_eq!(stochastic_quantize(&z, &book, 1e-6, &mut rng).unwrap().tokens, hard);
        }
    }

    #[test]
    fn entropy_grows_with_temperature() {
        let d = [0.1, 0.4, 0.9, 1.3];
        let low = entropy(&softmax_neg_distances(&d, 0.1).unwrap());
        let high = entropy(&softmax_neg_distances(&d, 4.0).unwrap());
        assert!(high >= low);
    }

    #[test]
    fn sampling_frequencies_match_distribution() {
        let mut rng = seeded(11);
        let book = Codebook::random(5, 3, true, &mut rng);
        let z = [0.2f32, -0.1, 0.4];
        let p = svq_distribution(&z, &book, 0.5).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[stochastic_quantize(&z, &book, 0.5, &mut rng).unwrap().tokens[0]] += 1;
        }
        for k in 0..5 {
            let mean = n as f64 * p[k];
            let sd = (n as f64 * p[k] * (1.0 - p[k])).sqrt();
            assert!((counts[k] as f64 - mean).abs() <= 3.0 * sd + 1e-9, "code {k}: {} vs {mean}", counts[k]);
        }
    }

    #[test]
    fn lookup_round_trip_and_range() {
        let mut rng = seeded(5);
        let book = Codebook::random(1024, 8, false, &mut rng);
        let z: Vec<f32> = (0..8 * 30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = quantize(&z, &book).unwrap();
        assert_eq!(lookup(&q.tokens, &book).unwrap(), q.z_q);
        let zeros = lookup(&[0, 0, 0], &book).unwrap();
        assert_eq!(zeros, [book.code(0), book.code(0), book.code(0)].concat());
        let tokens: Vec<usize> = (0..50).map(|_| rng.random_range(0..1024)).collect();
        let out = lookup(&tokens, &book).unwrap();
        for (n, &t) in tokens.iter().enumerate() {
            assert_eq!(&out[n * 8..(n + 1) * 8], &book.codes()[t * 8..(t + 1) * 8]);
        }
        assert!(lookup(&[1024], &book).is_err());
    }

    #[test]
    fn ema_update_closed_forms() {
        let mut rng = seeded(0);
        let mut book = cb(3, 2, &[0.0, 0.0, 5.0, 5.0, -5.0, 5.0]);
        book.dead_threshold = 0.0;
        let z = [1.0f32, 2.0, 3.0, 0.0];
        codebook_update(&mut book, &z, &[0, 0], &mut rng).unwrap();
        // N = 0.99 + 0.01*2, M = 0.99*0 + 0.01*(4, 2)
        let n = 0.99 + 0.02;
        assert!((f64::from(book.code(0)[0]) - 0.04 / n).abs() < 1e-7);
        assert!((f64::from(book.code(0)[1]) - 0.02 / n).abs() < 1e-7);
        assert_eq!(book.code(1), &[5.0, 5.0]);
        assert_eq!(book.code(2), &[-5.0, 5.0]);

        let mut book = cb(2, 2, &[0.0, 0.0, 9.0, 9.0]);
        book.decay = 0.0;
        book.dead_threshold = 0.0;
        codebook_update(&mut book, &[1.0, 2.0, 3.0, 0.0, 7.0, 7.0], &[0, 0, 1], &mut rng).unwrap();
        assert_eq!(book.code(0), &[2.0, 1.0]);
        assert_eq!(book.code(1), &[7.0, 7.0]);
    }

    #[test]
    fn dead_codes_restart_from_batch_rows() {
        let mut rng = seeded(2);
        let mut book = cb(2, 1, &[0.0, 100.0]);
        book.dead_threshold = 0.5;
        let z = [0.1f32, 0.2, 0.3];
        for _ in 0..80 {
            let q = quantize(&z, &book).unwrap();
            codebook_update(&mut book, &z, &q.tokens, &mut rng).unwrap();
        }
        assert!(book.code(1)[0] < 1.0, "code 1 should have been reset, got {}", book.code(1)[0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seeded(9);
        let mut book = Codebook::random(4, 2, true, &mut rng);
        codebook_update(&mut book, &[0.6, 0.8], &[1], &mut rng).unwrap();
        let mut ck = Checkpoint::default();
        book.save_into(&mut ck, "vq.");
        let back = Codebook::load_from(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), "vq.").unwrap();
        assert_eq!(back, book);
    }

    proptest! {
        #[test]
        fn quantize_is_exhaustive_search(seed in 0u64..10_000, k in 1usize..24, d in 1usize..6) {
            let mut rng = seeded(seed);
            let book = Codebook::random(k, d, false, &mut rng);
            let z: Vec<f32> = (0..d * 8).map(|_| rng.random_range(-1.5..1.5)).collect();
            prop_assert_eq!(quantize(&z, &book).unwrap().tokens, brute_force(&z, book.codes(), d));
        }

        #[test]
        fn softmax_is_shift_invariant(d in prop::collection::vec(0.0f64..3.0, 2..10), c in -5.0f64..5.0, tau in 0.05f64..5.0) {
            let p = softmax_neg_distances(&d, tau).unwrap();
            let shifted: Vec<f64> = d.iter().map(|v| v + c).collect();
            let q = softmax_neg_distances(&shifted, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_is_nondecreasing_in_tau(d in prop::collection::vec(0.0f64..2.0, 2..10), t1 in 0.01f64..5.0, t2 in 0.01f64..5.0) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let a = entropy(&softmax_neg_distances(&d, lo).unwrap());
            let b = entropy(&softmax_neg_distances(&d, hi).unwrap());
            prop_assert!(b >= a - 1e-12);
        }
    }
}
