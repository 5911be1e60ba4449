//! Fully convolutional classifier whose pooled representation feeds FID, IS and cFID.

use nmvq_autodiff::rng::{self, Rng};
use nmvq_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;

use crate::checkpoint::{ArrayData, Checkpoint};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::kv::KvMap;
use crate::nn::{eval, Conv1d, Linear, NORM_EPS};
use crate::train::{check_loss, LossLog, Trainer};
use crate::tsgen::{expect_kind, gather, map_chunks, TrainSettings, INFERENCE_CHUNK};

pub const KERNELS: [usize; 3] = [8, 5, 3];
pub const WIDTHS: [usize; 3] = [128, 256, 128];
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcnConfig {
    pub length: usize,
    pub num_classes: usize,
    pub widths: [usize; 3],
}

impl FcnConfig {
    pub fn new(length: usize, num_classes: usize) -> Self {
        FcnConfig { length, num_classes, widths: WIDTHS }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv1d,
    gamma: ParamId,
    beta: ParamId,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FcnClassifier {
    pub config: FcnConfig,
    pub params: ParamStore<f32>,
    blocks: Vec<Block>,
    head: Linear,
}

/// Per-channel biased mean and variance of `x[B, C, L]`.
fn channel_moments(x: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let (b, c, l) = (x.dim(0), x.dim(1), x.dim(2));
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (j, row) in x.data().chunks(l).enumerate() {
        let ch = j % c;
        for &v in row {
            mean[ch] += f64::from(v);
            sq[ch] += f64::from(v) * f64::from(v);
        }
    }
    let n = (b * l) as f64;
    let var = mean.iter().zip(&sq).map(|(m, s)| (s / n - (m / n).powi(2)).max(0.0)).collect();
    (mean.iter().map(|m| m / n).collect(), var)
}

impl FcnClassifier {
    pub fn new(config: FcnConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::Usage(format!("a classifier needs at least 2 classes, got {}", config.num_classes)));
        }
        let mut rng = rng::stream(seed, "fcn/init");
        let mut ps = ParamStore::new();
        let mut cin = 1;
        let mut blocks = Vec::new();
        for (i, (&k, &w)) in KERNELS.iter().zip(&config.widths).enumerate() {
            let conv = Conv1d::new(&mut ps, &format!("b{i}.conv"), (cin, w, k), 1, k / 2, &mut rng);
            let gamma = ps.add(format!("b{i}.bn.g"), Tensor::full([w], 1.0));
            let beta = ps.add(format!("b{i}.bn.b"), Tensor::zeros([w]));
            blocks.push(Block { conv, gamma, beta, running_mean: vec![0.0; w], running_var: vec![1.0; w] });
            cin = w;
        }
        let head = Linear::new(&mut ps, "head", cin, config.num_classes, &mut rng);
        Ok(FcnClassifier { config, params: ps, blocks, head })
    }

    /// Pooled features `[B, 128]` and logits `[B, C]`. Training mode normalizes
    /// with batch statistics and returns them per block.
    fn graph(&self, g: &mut Graph<'_, f32>, x: Var, train: bool) -> Result<(Var, Var, Vec<(Vec<f64>, Vec<f64>)>)> {
        let mut h = x;
        let mut moments = Vec::new();
        for b in &self.blocks {
            h = b.conv.forward(g, h)?;
            let (gm, bt) = (g.param(b.gamma), g.param(b.beta));
            h = if train {
                moments.push(channel_moments(g.value(h)));
                g.batch_norm(h, gm, bt, NORM_EPS)?
            } else {
                let gv = self.params.get(b.gamma).data();
                let bv = self.params.get(b.beta).data();
                let scale: Vec<f32> = (0..gv.len())
                    .map(|c| (f64::from(gv[c]) / (b.running_var[c] + NORM_EPS).sqrt()) as f32)
                    .collect();
                let shift: Vec<f32> =
                    (0..gv.len()).map(|c| (f64::from(bv[c]) - b.running_mean[c] * f64::from(scale[c])) as f32).collect();
                let n = scale.len();
                let s = g.input(Tensor::new([n], scale)?);
                let t = g.input(Tensor::new([n], shift)?);
                g.channel_affine(h, s, t)?
            };
            h = g.relu(h)?;
        }
        let pooled = g.mean_last(h)?;
        let logits = self.head.forward(g, pooled)?;
        Ok((pooled, logits, moments))
    }

    fn check(&self, x: &Tensor<f32>) -> Result<()> {
        if x.ndim() != 3 || x.dim(1) != 1 {
            return Err(Error::Usage(format!("expected series [n, 1, L], got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Pooled penultimate representation, one row per series.
    pub fn features(&self, x: &Tensor<f32>) -> Result<FeatureMatrix> {
        self.check(x)?;
        let t = map_chunks(x, INFERENCE_CHUNK, |c| eval(&self.params, |g| {
            let v = g.input(c.clone());
            Ok(self.graph(g, v, false)?.0)
        }))?;
        to_features(&t, self.config.feature_dim())
    }

    /// Class probabilities, one row per series.
    pub fn probabilities(&self, x: &Tensor<f32>) -> Result<FeatureMatrix> {
        self.check(x)?;
        let t = map_chunks(x, INFERENCE_CHUNK, |c| eval(&self.params, |g| {
            let v = g.input(c.clone());
            let logits = self.graph(g, v, false)?.1;
            Ok(g.softmax(logits)?)
        }))?;
        to_features(&t, self.config.num_classes)
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let p = self.probabilities(x)?;
        Ok((0..p.rows())
            .map(|i| p.row(i).iter().enumerate().fold(0, |b, (j, &v)| if v > p.row(i)[b] { j } else { b }))
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }

    fn train_step(&mut self, trainer: &mut Trainer, x: Tensor<f32>, labels: &[usize]) -> Result<(f32, f64)> {
        let (loss, grads, moments) = {
            let mut g = Graph::with_params(&self.params);
            let v = g.input(x);
            let (_, logits, moments) = self.graph(&mut g, v, true)?;
            let loss = g.cross_entropy(logits, labels, None)?;
            let value = g.value(loss).item();
            check_loss("fcn", trainer.steps(), value)?;
            (value, g.backward(loss)?, moments)
        };
        for (b, (mean, var)) in self.blocks.iter_mut().zip(moments) {
            for c in 0..mean.len() {
                b.running_mean[c] = (1.0 - BN_MOMENTUM) * b.running_mean[c] + BN_MOMENTUM * mean[c];
                b.running_var[c] = (1.0 - BN_MOMENTUM) * b.running_var[c] + BN_MOMENTUM * var[c];
            }
        }
        let lr = trainer.step(&mut self.params, grads)?;
        Ok((loss, lr))
    }

    pub fn save(&self, extra: &KvMap) -> Checkpoint {
        let mut kv = extra.clone();
        kv.set("kind", "fcn")
            .set("fcn.length", self.config.length)
            .set("fcn.num_classes", self.config.num_classes)
            .set("fcn.widths", self.config.widths.map(|w| w.to_string()).join(","));
        let mut ck = Checkpoint::new(kv);
        ck.push_params("p.", &self.params);
        for (i, b) in self.blocks.iter().enumerate() {
            let n = b.running_mean.len();
            ck.push(format!("bn{i}.mean"), vec![n], ArrayData::F64(b.running_mean.clone()));
            ck.push(format!("bn{i}.var"), vec![n], ArrayData::F64(b.running_var.clone()));
        }
        ck
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, "fcn")?;
        let widths: Vec<usize> = ck.config.get_list("fcn.widths")?.unwrap_or_default();
        let widths: [usize; 3] =
            widths.try_into().map_err(|_| Error::Checkpoint("fcn.widths must list 3 widths".into()))?;
        let config = FcnConfig {
            length: ck.config.require("fcn.length")?,
            num_classes: ck.config.require("fcn.num_classes")?,
            widths,
        };
        let mut m = FcnClassifier::new(config, 0)?;
        ck.load_params("p.", &mut m.params)?;
        for (i, b) in m.blocks.iter_mut().enumerate() {
            b.running_mean = ck.tensor_f64(&format!("bn{i}.mean"))?.into_data();
            b.running_var = ck.tensor_f64(&format!("bn{i}.var"))?.into_data();
        }
        Ok(m)
    }
}

fn to_features(t: &Tensor<f32>, cols: usize) -> Result<FeatureMatrix> {
    FeatureMatrix::new(t.dim(0), cols, t.data().iter().map(|&v| f64::from(v)).collect())
}

#[derive(Debug, Clone)]
pub struct FcnRun {
    pub model: FcnClassifier,
    pub log: LossLog,
}

/// Trains with cross-entropy on random batches.
pub fn train_fcn(x: &Tensor<f32>, labels: &[usize], config: FcnConfig, settings: &TrainSettings) -> Result<FcnRun> {
    if x.dim(0) != labels.len() || labels.is_empty() {
        return Err(Error::Usage(format!("{} series with {} labels", x.dim(0), labels.len())));
    }
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::Usage("classifier training needs at least 2 classes in the data".into()));
    }
    let mut model = FcnClassifier::new(config, settings.seed)?;
    let mut trainer = Trainer::new(&settings.optim, &model.params, settings.steps);
    let mut log = LossLog::default();
    for step in 0..settings.steps {
        let mut rng: Rng = rng::stream(settings.seed, &format!("fcn/step{step}"));
        let idx: Vec<usize> = (0..settings.batch).map(|_| rng.random_range(0..labels.len())).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, lr) = model.train_step(&mut trainer, gather(x, &idx), &y)?;
        log.push(step + 1, lr, f64::from(loss));
    }
    Ok(FcnRun { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nmvq_autodiff::rng::seeded;

    fn small(length: usize, classes: usize) -> FcnConfig {
        FcnConfig { length, num_classes: classes, widths: [8, 16, 128] }
    }

    fn separable(n: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
        let mut rng = seeded(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = labels
            .iter()
            .flat_map(|&l| {
                let offset = if l == 0 { -1.0 } else { 1.0 };
                (0..32).map(|_| offset + rng.random_range(-0.5..0.5)).collect::<Vec<f32>>()
            })
            .collect();
        (Tensor::new([n, 1, 32], data).unwrap(), labels)
    }

    #[test]
    fn feature_dim_is_128_for_any_length() {
        let m = FcnClassifier::new(small(32, 3), 0).unwrap();
        for len in [16, 33, 100] {
            let f = m.features(&Tensor::full([2, 1, len], 0.2)).unwrap();
            assert_eq!((f.rows(), f.cols()), (2, 128));
        }
    }

    #[test]
    fn untrained_is_near_chance_and_single_class_rejected() {
        let (x, y) = separable(200, 1);
        let m = FcnClassifier::new(small(32, 2), 3).unwrap();
        let acc = m.accuracy(&x, &y).unwrap();
        assert!(acc <= 0.85, "untrained accuracy {acc}");
        let settings = TrainSettings::new(1, 0);
        assert!(train_fcn(&x, &vec![0; 200], small(32, 2), &settings).is_err());
        assert!(FcnClassifier::new(small(32, 1), 0).is_err());
    }

    #[test]
    fn separable_data_is_learned() {
        let (x, y) = separable(200, 2);
        let settings = TrainSettings { batch: 32, ..TrainSettings::new(500, 0) };
        let run = train_fcn(&x, &y, small(32, 2), &settings).unwrap();
        assert!(run.model.accuracy(&x, &y).unwrap() > 0.95);
        let p = run.model.probabilities(&x).unwrap();
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        let ck = Checkpoint::from_bytes(&run.model.save(&KvMap::new()).to_bytes()).unwrap();
        let back = FcnClassifier::load(&ck).unwrap();
        assert_eq!(back.features(&x).unwrap(), run.model.features(&x).unwrap());
    }
}
