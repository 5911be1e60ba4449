//! Neural mapper: a 1-D U-Net with Snake activations that maps stochastic
//! variants of real series back onto the data, then refines generated samples.

use nmvq_autodiff::rng::{self, Rng};
use nmvq_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::{eval, self_attention, Conv1d, GroupNorm, LayerNorm, Linear};
use crate::train::{check_loss, LossLog, Trainer};
use crate::tsgen::{expect_kind, gather, map_chunks, Stage1Model, TrainSettings, INFERENCE_CHUNK};

/// `x + sin^2(alpha x) / alpha`.
pub fn snake(x: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Usage(format!("snake needs alpha > 0, got {alpha}")));
    }
    Ok(x + (alpha * x).sin().powi(2) / alpha)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub attention: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { levels: 2, base_channels: 32, attention: true }
    }
}

impl UNetConfig {
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    /// Smallest multiple of the divisor that holds `length` samples.
    pub fn padded_len(&self, length: usize) -> usize {
        length.div_ceil(self.divisor()) * self.divisor()
    }

    pub fn write(&self, kv: &mut KvMap) {
        kv.set("unet.levels", self.levels)
            .set("unet.base_channels", self.base_channels)
            .set("unet.attention", self.attention);
    }

    pub fn read(kv: &KvMap) -> Result<Self> {
        Ok(UNetConfig {
            levels: kv.require("unet.levels")?,
            base_channels: kv.require("unet.base_channels")?,
            attention: kv.require("unet.attention")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct SnakeNorm {
    norm: GroupNorm,
    log_alpha: ParamId,
}

impl SnakeNorm {
    fn new(ps: &mut ParamStore<f32>, name: &str, c: usize) -> Self {
        SnakeNorm {
            norm: GroupNorm::new(ps, &format!("{name}.gn"), c),
            log_alpha: ps.add(format!("{name}.log_alpha"), Tensor::zeros([c])),
        }
    }

    fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let la = g.param(self.log_alpha);
        let alpha = g.exp(la)?;
        Ok(g.snake(h, alpha)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    act1: SnakeNorm,
    conv1: Conv1d,
    act2: SnakeNorm,
    conv2: Conv1d,
    shortcut: Option<Conv1d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        ResBlock {
            act1: SnakeNorm::new(ps, &format!("{name}.a1"), cin),
            conv1: Conv1d::same(ps, &format!("{name}.c1"), cin, cout, 3, rng),
            act2: SnakeNorm::new(ps, &format!("{name}.a2"), cout),
            conv2: Conv1d::same(ps, &format!("{name}.c2"), cout, cout, 3, rng),
            shortcut: (cin != cout).then(|| Conv1d::same(ps, &format!("{name}.skip"), cin, cout, 1, rng)),
        }
    }

    fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let h = self.act1.forward(g, x)?;
        let h = self.conv1.forward(g, h)?;
        let h = self.act2.forward(g, h)?;
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x)?,
            None => x,
        };
        Ok(g.add(skip, h)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnBlock {
    norm: LayerNorm,
    qkv: Linear,
    proj: Linear,
    dim: usize,
}

impl AttnBlock {
    fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let t = g.swap_last(x)?;
        let h = self.norm.forward(g, t)?;
        let a = self_attention(g, &self.qkv, &self.proj, h, self.dim, 1)?;
        let a = g.swap_last(a)?;
        Ok(g.add(x, a)?)
    }
}

/// One recorded activation of the instrumented forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub channels: usize,
    pub length: usize,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamStore<f32>,
    conv_in: Conv1d,
    down: Vec<(ResBlock, Conv1d)>,
    mid1: ResBlock,
    attn: Option<AttnBlock>,
    mid2: ResBlock,
    up: Vec<(Conv1d, ResBlock)>,
    out_act: SnakeNorm,
    conv_out: Conv1d,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.levels == 0 || config.base_channels == 0 {
            return Err(Error::Config("U-Net needs at least one level and one channel".into()));
        }
        let mut rng = rng::stream(seed, "stage3/init");
        let rng = &mut rng;
        let mut ps = ParamStore::new();
        let ch = |l: usize| config.base_channels << l;
        let conv_in = Conv1d::same(&mut ps, "in", 1, ch(0), 3, rng);
        let down = (0..config.levels)
            .map(|l| {
                let block = ResBlock::new(&mut ps, &format!("down{l}.res"), ch(l), ch(l), rng);
                let conv = Conv1d::new(&mut ps, &format!("down{l}.conv"), (ch(l), ch(l + 1), 4), 2, 1, rng);
                (block, conv)
            })
            .collect();
        let mid = ch(config.levels);
        let mid1 = ResBlock::new(&mut ps, "mid1", mid, mid, rng);
        let attn = config.attention.then(|| AttnBlock {
            norm: LayerNorm::new(&mut ps, "mid.attn.ln", mid),
            qkv: Linear::new(&mut ps, "mid.attn.qkv", mid, 3 * mid, rng),
            proj: Linear::new(&mut ps, "mid.attn.proj", mid, mid, rng),
            dim: mid,
        });
        let mid2 = ResBlock::new(&mut ps, "mid2", mid, mid, rng);
        let up = (0..config.levels)
            .rev()
            .map(|l| {
                let conv = Conv1d::same(&mut ps, &format!("up{l}.conv"), ch(l + 1), ch(l), 3, rng);
                let block = ResBlock::new(&mut ps, &format!("up{l}.res"), 2 * ch(l), ch(l), rng);
                (conv, block)
            })
            .collect();
        let out_act = SnakeNorm::new(&mut ps, "out", ch(0));
        let conv_out = Conv1d::same(&mut ps, "out.conv", ch(0), 1, 3, rng).zeroed(&mut ps);
        Ok(UNet { config, params: ps, conv_in, down, mid1, attn, mid2, up, out_act, conv_out })
    }

    fn graph(&self, g: &mut Graph<'_, f32>, x: Var, trace: &mut Vec<StageShape>) -> Result<Var> {
        let mut record = |g: &Graph<'_, f32>, stage: String, v: Var| {
            let s = g.shape(v);
            trace.push(StageShape { stage, channels: s[1], length: s[2] });
        };
        let mut h = self.conv_in.forward(g, x)?;
        record(g, "in".into(), h);
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, (block, conv)) in self.down.iter().enumerate() {
            h = block.forward(g, h)?;
            skips.push(h);
            h = conv.forward(g, h)?;
            record(g, format!("down{l}"), h);
        }
        h = self.mid1.forward(g, h)?;
        if let Some(a) = &self.attn {
            h = a.forward(g, h)?;
        }
        h = self.mid2.forward(g, h)?;
        record(g, "mid".into(), h);
        for (i, (conv, block)) in self.up.iter().enumerate() {
            h = g.upsample2(h)?;
            h = conv.forward(g, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip], 1)?;
            h = block.forward(g, h)?;
            record(g, format!("up{}", self.config.levels - 1 - i), h);
        }
        h = self.out_act.forward(g, h)?;
        h = self.conv_out.forward(g, h)?;
        Ok(g.add(x, h)?)
    }

    fn check(&self, x: &Tensor<f32>) -> Result<()> {
        if x.ndim() != 3 || x.dim(1) != 1 {
            return Err(Error::Usage(format!("expected series [n, 1, L], got {:?}", x.shape())));
        }
        if x.dim(2) % self.config.divisor() != 0 {
            return Err(Error::Config(format!(
                "length {} is not divisible by {} (2^{} levels)",
                x.dim(2),
                self.config.divisor(),
                self.config.levels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Forward pass that also reports the activation shape after every stage.
    pub fn forward_traced(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<StageShape>)> {
        self.check(x)?;
        let mut trace = Vec::new();
        let y = eval(&self.params, |g| {
            let v = g.input(x.clone());
            self.graph(g, v, &mut trace)
        })?;
        Ok((y, trace))
    }

    /// Forward pass over arbitrary-length series: right-pads with the edge
    /// value up to the divisor, then crops.
    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.ndim() != 3 || x.dim(1) != 1 {
            return Err(Error::Usage(format!("expected series [n, 1, L], got {:?}", x.shape())));
        }
        let len = x.dim(2);
        let padded = self.config.padded_len(len);
        map_chunks(x, INFERENCE_CHUNK, |c| {
            let y = self.forward(&pad_edge(c, padded))?;
            Ok(crop(&y, len))
        })
    }

    fn train_step(&mut self, trainer: &mut Trainer, noisy: Tensor<f32>, clean: Tensor<f32>) -> Result<(f32, f64)> {
        let (loss, grads) = {
            let mut g = Graph::with_params(&self.params);
            let xin = g.input(noisy);
            let target = g.input(clean);
            let y = self.graph(&mut g, xin, &mut Vec::new())?;
            let loss = g.l1_loss(y, target)?;
            let v = g.value(loss).item();
            check_loss("stage 3", trainer.steps(), v)?;
            (v, g.backward(loss)?)
        };
        let lr = trainer.step(&mut self.params, grads)?;
        Ok((loss, lr))
    }
}

pub fn pad_edge(x: &Tensor<f32>, to: usize) -> Tensor<f32> {
    let (n, len) = (x.dim(0), x.dim(2));
    if to == len {
        return x.clone();
    }
    let mut out = Vec::with_capacity(n * to);
    for row in x.data().chunks(len.max(1)).take(n) {
        out.extend_from_slice(row);
        let edge = row.last().copied().unwrap_or(0.0);
        out.extend(std::iter::repeat_n(edge, to - len));
    }
    Tensor::new([n, 1, to], out).expect("padded shape")
}

pub fn crop(x: &Tensor<f32>, len: usize) -> Tensor<f32> {
    let (n, full) = (x.dim(0), x.dim(2));
    if full == len {
        return x.clone();
    }
    let data = x.data().chunks(full).flat_map(|r| r[..len].iter().copied()).collect();
    Tensor::new([n, 1, len], data).expect("cropped shape")
}

/// Mapper with the temperature it was trained at.
#[derive(Debug, Clone)]
pub struct Mapper {
    pub net: UNet,
    pub tau: f64,
    pub length: usize,
}

impl Mapper {
    /// `x_R = f(x)`; deterministic.
    pub fn refine(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.ndim() != 3 || x.dim(2) != self.length {
            return Err(Error::Usage(format!("mapper trained on length {}, got {:?}", self.length, x.shape())));
        }
        if x.dim(0) == 0 {
            return Ok(x.clone());
        }
        self.net.apply(x)
    }

    pub fn save(&self, trainer: Option<&Trainer>, extra: &KvMap) -> Checkpoint {
        let mut kv = extra.clone();
        kv.set("kind", "stage3").set("stage3.tau", self.tau).set("stage3.length", self.length);
        self.net.config.write(&mut kv);
        let mut ck = Checkpoint::new(kv);
        ck.push_params("p.", &self.net.params);
        if let Some(t) = trainer {
            t.save_into(&mut ck, "opt.", &self.net.params);
        }
        ck
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, "stage3")?;
        let mut net = UNet::new(UNetConfig::read(&ck.config)?, 0)?;
        ck.load_params("p.", &mut net.params)?;
        Ok(Mapper { net, tau: ck.config.require("stage3.tau")?, length: ck.config.require("stage3.length")? })
    }
}

#[derive(Debug, Clone)]
pub struct Stage3Run {
    pub mapper: Mapper,
    pub trainer: Trainer,
    pub log: LossLog,
}

impl Stage3Run {
    pub fn new(config: UNetConfig, tau: f64, length: usize, settings: &TrainSettings) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Usage(format!("temperature must be positive, got {tau}")));
        }
        let net = UNet::new(config, settings.seed)?;
        let trainer = Trainer::new(&settings.optim, &net.params, settings.steps);
        Ok(Stage3Run { mapper: Mapper { net, tau, length }, trainer, log: LossLog::default() })
    }

    pub fn resume(ck: &Checkpoint, settings: &TrainSettings) -> Result<Self> {
        let mapper = Mapper::load(ck)?;
        let mut trainer = Trainer::new(&settings.optim, &mapper.net.params, settings.steps);
        trainer.restore(ck, "opt.", &mapper.net.params)?;
        Ok(Stage3Run { mapper, trainer, log: LossLog::default() })
    }

    /// Draws a batch of real series `x` and fresh variants `x' = D(Q'(E(x), tau))`.
    pub fn draw_pair(
        &self,
        x: &Tensor<f32>,
        stage1: &Stage1Model,
        batch: usize,
        rng: &mut Rng,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..x.dim(0))).collect();
        let clean = gather(x, &idx);
        let noisy = stage1.stochastic_variant(&clean, self.mapper.tau, rng)?;
        Ok((noisy, clean))
    }

    pub fn train_until(&mut self, x: &Tensor<f32>, stage1: &Stage1Model, settings: &TrainSettings, until: u64) -> Result<()> {
        if x.ndim() != 3 || x.dim(2) != self.mapper.length || x.dim(0) == 0 {
            return Err(Error::Usage(format!("stage 3 needs series [n>0, 1, {}], got {:?}", self.mapper.length, x.shape())));
        }
        let padded = self.mapper.net.config.padded_len(self.mapper.length);
        while self.trainer.steps() < until.min(settings.steps) {
            let step = self.trainer.steps();
            let mut rng = rng::stream(settings.seed, &format!("stage3/step{step}"));
            let (noisy, clean) = self.draw_pair(x, stage1, settings.batch, &mut rng)?;
            let (noisy, clean) = (pad_edge(&noisy, padded), pad_edge(&clean, padded));
            let (loss, lr) = self.mapper.net.train_step(&mut self.trainer, noisy, clean)?;
            self.log.push(step + 1, lr, f64::from(loss));
        }
        Ok(())
    }
}

pub fn train_stage3(
    x: &Tensor<f32>,
    stage1: &Stage1Model,
    tau: f64,
    config: UNetConfig,
    settings: &TrainSettings,
) -> Result<Stage3Run> {
    let mut run = Stage3Run::new(config, tau, stage1.config.length, settings)?;
    run.train_until(x, stage1, settings, settings.steps)?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_synthetic, to_tensor, SyntheticKind};
    use crate::tsgen::Stage1Config;
    use nmvq_autodiff::rng::seeded;
    use std::f64::consts::PI;

    #[test]
    fn snake_examples() {
        assert_eq!(snake(0.0, 0.7).unwrap(), 0.0);
        assert!((snake(PI, 1.0).unwrap() - PI).abs() < 1e-12);
        assert!((snake(PI / 2.0, 1.0).unwrap() - (PI / 2.0 + 1.0)).abs() < 1e-12);
        assert!((snake(PI / 2.0, 1.0).unwrap() - 2.5708).abs() < 1e-4);
        assert!(snake(1.0, 0.0).is_err());
        assert!(snake(1.0, -2.0).is_err());
    }

    fn small() -> UNetConfig {
        UNetConfig { levels: 2, base_channels: 4, attention: true }
    }

    #[test]
    fn internal_shapes_halve_and_double() {
        let net = UNet::new(small(), 0).unwrap();
        let (y, trace) = net.forward_traced(&Tensor::full([2, 1, 128], 0.1)).unwrap();
        assert_eq!(y.shape(), &[2, 1, 128]);
        let got: Vec<(usize, usize)> = trace.iter().map(|s| (s.length, s.channels)).collect();
        assert_eq!(got, vec![(128, 4), (64, 8), (32, 16), (32, 16), (64, 8), (128, 4)]);
    }

    #[test]
    fn zero_output_conv_gives_identity() {
        let net = UNet::new(small(), 1).unwrap();
        let mut rng = seeded(0);
        let x = Tensor::new([3, 1, 32], (0..96).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        assert!(y.is_finite());
        assert_eq!(y, x);
    }

    #[test]
    fn indivisible_length_is_rejected_but_apply_pads() {
        let net = UNet::new(UNetConfig { levels: 3, ..small() }, 0).unwrap();
        let err = net.forward(&Tensor::zeros([1, 1, 100])).unwrap_err().to_string();
        assert!(err.contains('8'), "{err}");
        let y = net.apply(&Tensor::full([2, 1, 100], 0.5)).unwrap();
        assert_eq!(y.shape(), &[2, 1, 100]);
        let padded = pad_edge(&Tensor::new([1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap(), 8);
        assert_eq!(padded.data(), &[1.0, 2.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0]);
        assert_eq!(crop(&padded, 3).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn refine_is_deterministic_and_checks_length() {
        let mapper = Mapper { net: UNet::new(small(), 2).unwrap(), tau: 1.0, length: 32 };
        let x = Tensor::full([2, 1, 32], 0.3);
        assert_eq!(mapper.refine(&x).unwrap(), mapper.refine(&x).unwrap());
        assert_eq!(mapper.refine(&Tensor::zeros([0, 1, 32])).unwrap().dim(0), 0);
        assert!(mapper.refine(&Tensor::zeros([1, 1, 16])).is_err());
    }

    fn tiny_stage1() -> Stage1Config {
        Stage1Config { length: 32, levels: 2, base_width: 4, blocks: 1, codebook_size: 8, code_dim: 4, unit_norm: true }
    }

    #[test]
    fn variants_are_redrawn_every_step() {
        let s1 = Stage1Model::new(tiny_stage1(), 0).unwrap();
        let x = to_tensor(&make_synthetic(SyntheticKind::Sine, 8, 32, 0.0, 0).unwrap().train);
        let settings = TrainSettings { batch: 4, ..TrainSettings::new(2, 0) };
        let run = Stage3Run::new(small(), 2.0, 32, &settings).unwrap();
        let single = gather(&x, &[0]);
        let a = s1.stochastic_tokens(&single, run.mapper.tau, &mut rng::stream(0, "stage3/step0")).unwrap();
        let b = s1.stochastic_tokens(&single, run.mapper.tau, &mut rng::stream(0, "stage3/step1")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn stage3_trains_and_round_trips() {
        let ds = make_synthetic(SyntheticKind::Sine, 32, 32, 0.0, 0).unwrap();
        let x = to_tensor(&ds.train);
        let s1 = Stage1Model::new(tiny_stage1(), 0).unwrap();
        let settings = TrainSettings { batch: 8, ..TrainSettings::new(60, 0) };
        let run = train_stage3(&x, &s1, 0.5, small(), &settings).unwrap();
        let (head, tail) = run.log.head_tail_means(10).unwrap();
        assert!(tail < head, "{head} -> {tail}");
        let ck = run.mapper.save(Some(&run.trainer), &KvMap::new());
        let back = Mapper::load(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.refine(&x).unwrap(), run.mapper.refine(&x).unwrap());
        assert_eq!(back.tau, 0.5);
    }
}
