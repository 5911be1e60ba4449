//! VQ time series generator: stage-1 tokenizer (encoder, codebook, decoder) and
//! stage-2 masked-token prior with iterative bidirectional sampling.

use std::f64::consts::FRAC_PI_2;

use nmvq_autodiff::rng::{self, Rng};
use nmvq_autodiff::{Graph, ParamStore, Tensor, Var};
use rand::seq::index;
use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::{eval, Conv1d, LayerNorm, Linear, TransformerBlock};
use crate::train::{check_loss, LossLog, OptimConfig, Trainer};
use crate::vq::{self, Codebook};

pub const COMMITMENT: f64 = 0.25;
pub const DEFAULT_SAMPLING_STEPS: usize = 10;
pub const LABEL_DROPOUT: f64 = 0.1;
pub const CHOICE_TEMPERATURE: f64 = 4.0;
/// Rows per forward pass when running a model over a whole dataset.
pub const INFERENCE_CHUNK: usize = 128;

/// Rows `idx` of a `[n, ...]` tensor.
pub fn gather(x: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let row = if x.dim(0) == 0 { 0 } else { x.numel() / x.dim(0) };
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered rows")
}

/// Applies `f` to consecutive row chunks of `x` and stacks the results.
pub fn map_chunks<F>(x: &Tensor<f32>, chunk: usize, mut f: F) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    let n = x.dim(0);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        parts.push(f(&gather(x, &(start..end).collect::<Vec<_>>()))?);
        start = end;
    }
    if parts.is_empty() {
        let mut shape = x.shape().to_vec();
        shape[0] = 0;
        return Ok(Tensor::new(shape, Vec::new())?);
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] = n;
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new(shape, data)?)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(steps: u64, seed: u64) -> Self {
        TrainSettings { steps, batch: crate::train::DEFAULT_BATCH, optim: OptimConfig::default(), seed }
    }
}

fn batch_indices(rng: &mut Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

// ---------------------------------------------------------------- stage 1

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Config {
    pub length: usize,
    pub levels: usize,
    pub base_width: usize,
    pub blocks: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub unit_norm: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            length: 128,
            levels: 2,
            base_width: 64,
            blocks: 2,
            codebook_size: vq::DEFAULT_K,
            code_dim: vq::DEFAULT_DIM,
            unit_norm: false,
        }
    }
}

impl Stage1Config {
    pub fn tokens(&self) -> usize {
        self.length >> self.levels
    }

    pub fn write(&self, kv: &mut KvMap) {
        kv.set("stage1.length", self.length)
            .set("stage1.levels", self.levels)
            .set("stage1.base_width", self.base_width)
            .set("stage1.blocks", self.blocks)
            .set("stage1.codebook_size", self.codebook_size)
            .set("stage1.code_dim", self.code_dim)
            .set("stage1.unit_norm", self.unit_norm);
    }

    pub fn read(kv: &KvMap) -> Result<Self> {
        Ok(Stage1Config {
            length: kv.require("stage1.length")?,
            levels: kv.require("stage1.levels")?,
            base_width: kv.require("stage1.base_width")?,
            blocks: kv.require("stage1.blocks")?,
            codebook_size: kv.require("stage1.codebook_size")?,
            code_dim: kv.require("stage1.code_dim")?,
            unit_norm: kv.require("stage1.unit_norm")?,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.length % (1 << self.levels) != 0 {
            return Err(Error::Config(format!(
                "length {} must be divisible by 2^{} = {}",
                self.length,
                self.levels,
                1 << self.levels
            )));
        }
        if self.base_width == 0 || self.codebook_size == 0 || self.code_dim == 0 {
            return Err(Error::Config("widths and codebook sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    conv1: Conv1d,
    conv2: Conv1d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore<f32>, name: &str, c: usize, rng: &mut Rng) -> Self {
        ResBlock {
            conv1: Conv1d::same(ps, &format!("{name}.c1"), c, c, 3, rng),
            conv2: Conv1d::same(ps, &format!("{name}.c2"), c, c, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let h = g.relu(x)?;
        let h = self.conv1.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv1d,
    levels: Vec<(Vec<ResBlock>, Conv1d)>,
    proj: Conv1d,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv1d,
    levels: Vec<(Vec<ResBlock>, Conv1d)>,
    conv_out: Conv1d,
}

/// Encoder, decoder and codebook.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub config: Stage1Config,
    pub params: ParamStore<f32>,
    pub codebook: Codebook,
    pub trained_steps: u64,
    encoder: Encoder,
    decoder: Decoder,
}

impl Stage1Model {
    pub fn new(config: Stage1Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "stage1/init");
        let mut ps = ParamStore::new();
        let c = config.base_width;
        let width = |l: usize| c << l;
        let encoder = Encoder {
            conv_in: Conv1d::same(&mut ps, "enc.in", 1, c, 3, &mut rng),
            levels: (0..config.levels)
                .map(|l| {
                    let blocks = (0..config.blocks)
                        .map(|b| ResBlock::new(&mut ps, &format!("enc.l{l}.r{b}"), width(l), &mut rng))
                        .collect();
                    let down = Conv1d::new(&mut ps, &format!("enc.l{l}.down"), (width(l), width(l + 1), 4), 2, 1, &mut rng);
                    (blocks, down)
                })
                .collect(),
            proj: Conv1d::same(&mut ps, "enc.proj", width(config.levels), config.code_dim, 1, &mut rng),
        };
        let decoder = Decoder {
            conv_in: Conv1d::same(&mut ps, "dec.in", config.code_dim, width(config.levels), 3, &mut rng),
            levels: (0..config.levels)
                .rev()
                .map(|l| {
                    let blocks = (0..config.blocks)
                        .map(|b| ResBlock::new(&mut ps, &format!("dec.l{l}.r{b}"), width(l + 1), &mut rng))
                        .collect();
                    let up = Conv1d::same(&mut ps, &format!("dec.l{l}.up"), width(l + 1), width(l), 3, &mut rng);
                    (blocks, up)
                })
                .collect(),
            conv_out: Conv1d::same(&mut ps, "dec.out", c, 1, 3, &mut rng),
        };
        let codebook = Codebook::random(config.codebook_size, config.code_dim, config.unit_norm, &mut rng);
        Ok(Stage1Model { config, params: ps, codebook, trained_steps: 0, encoder, decoder })
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        if x.ndim() != 3 || x.dim(1) != 1 || x.dim(2) != self.config.length {
            return Err(Error::Usage(format!(
                "expected series of shape [n, 1, {}], got {:?}",
                self.config.length,
                x.shape()
            )));
        }
        Ok(())
    }

    /// `x[B, 1, L]` to latents `[B, N, d]`.
    fn encode_graph(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<Var> {
        let e = &self.encoder;
        let mut h = e.conv_in.forward(g, x)?;
        for (blocks, down) in &e.levels {
            for b in blocks {
                h = b.forward(g, h)?;
            }
            h = down.forward(g, h)?;
        }
        h = g.relu(h)?;
        h = e.proj.forward(g, h)?;
        let z = g.swap_last(h)?;
        if self.config.unit_norm {
            Ok(g.l2_normalize_last(z, 1e-6)?)
        } else {
            Ok(z)
        }
    }

    /// Latents `[B, N, d]` to series `[B, 1, L]`.
    fn decode_graph(&self, g: &mut Graph<'_, f32>, z: Var) -> Result<Var> {
        let d = &self.decoder;
        let h = g.swap_last(z)?;
        let mut h = d.conv_in.forward(g, h)?;
        for (blocks, up) in &d.levels {
            for b in blocks {
                h = b.forward(g, h)?;
            }
            h = g.upsample2(h)?;
            h = up.forward(g, h)?;
        }
        h = g.relu(h)?;
        d.conv_out.forward(g, h)
    }

    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        map_chunks(x, INFERENCE_CHUNK, |c| {
            eval(&self.params, |g| {
                let v = g.input(c.clone());
                self.encode_graph(g, v)
            })
        })
    }

    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, d) = (self.config.tokens(), self.config.code_dim);
        if z.ndim() != 3 || z.dim(1) != n || z.dim(2) != d {
            return Err(Error::Usage(format!("expected latents [b, {n}, {d}], got {:?}", z.shape())));
        }
        map_chunks(z, INFERENCE_CHUNK, |c| {
            eval(&self.params, |g| {
                let v = g.input(c.clone());
                self.decode_graph(g, v)
            })
        })
    }

    /// Token rows `[B * N]` to series `[B, 1, L]`.
    pub fn decode_tokens(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let (n, d) = (self.config.tokens(), self.config.code_dim);
        if tokens.len() % n != 0 {
            return Err(Error::Usage(format!("{} tokens is not a multiple of sequence length {n}", tokens.len())));
        }
        let z = vq::lookup(tokens, &self.codebook)?;
        self.decode(&Tensor::new([tokens.len() / n, n, d], z)?)
    }

    /// Nearest-code tokens `[B * N]`.
    pub fn tokenize(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let z = self.encode(x)?;
        Ok(vq::quantize(z.data(), &self.codebook)?.tokens)
    }

    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tokens = self.tokenize(x)?;
        self.decode_tokens(&tokens)
    }

    /// Temperature-`tau` tokens for `x`, resampled on every call.
    pub fn stochastic_tokens(&self, x: &Tensor<f32>, tau: f64, rng: &mut Rng) -> Result<Vec<usize>> {
        let z = self.encode(x)?;
        Ok(vq::stochastic_quantize(z.data(), &self.codebook, tau, rng)?.tokens)
    }

    /// Decoded stochastic variant of `x` at temperature `tau`.
    pub fn stochastic_variant(&self, x: &Tensor<f32>, tau: f64, rng: &mut Rng) -> Result<Tensor<f32>> {
        let tokens = self.stochastic_tokens(x, tau, rng)?;
        self.decode_tokens(&tokens)
    }

    /// One optimization step on `x`; returns the loss.
    fn train_step(&mut self, trainer: &mut Trainer, x: Tensor<f32>, rng: &mut Rng) -> Result<(f32, f64)> {
        let rows_z;
        let q;
        let grads;
        let loss_value;
        {
            let mut g = Graph::with_params(&self.params);
            let xv = g.input(x);
            let z = self.encode_graph(&mut g, xv)?;
            rows_z = g.value(z).clone();
            if trainer.steps() == 0 {
                self.codebook.init_from(rows_z.data(), rng);
            }
            q = vq::quantize(rows_z.data(), &self.codebook)?;
            let zq = Tensor::new(rows_z.shape().to_vec(), q.z_q.clone())?;
            let zst = g.straight_through(z, zq.clone())?;
            let recon = self.decode_graph(&mut g, zst)?;
            let rec = g.mse_loss(recon, xv)?;
            let target = g.input(zq);
            let commit = g.mse_loss(z, target)?;
            let commit = g.scale(commit, COMMITMENT)?;
            let loss = g.add(rec, commit)?;
            loss_value = g.value(loss).item();
            check_loss("stage 1", trainer.steps(), loss_value)?;
            grads = g.backward(loss)?;
        }
        let lr = trainer.step(&mut self.params, grads)?;
        vq::codebook_update(&mut self.codebook, rows_z.data(), &q.tokens, rng)?;
        Ok((loss_value, lr))
    }

    pub fn save(&self, trainer: Option<&Trainer>, extra: &KvMap) -> Checkpoint {
        let mut kv = extra.clone();
        kv.set("kind", "stage1").set("trained_steps", self.trained_steps);
        self.config.write(&mut kv);
        let mut ck = Checkpoint::new(kv);
        ck.push_params("p.", &self.params);
        self.codebook.save_into(&mut ck, "vq.");
        if let Some(t) = trainer {
            t.save_into(&mut ck, "opt.", &self.params);
        }
        ck
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, "stage1")?;
        let config = Stage1Config::read(&ck.config)?;
        let mut m = Stage1Model::new(config, 0)?;
        ck.load_params("p.", &mut m.params)?;
        m.codebook = Codebook::load_from(ck, "vq.")?;
        m.trained_steps = ck.config.get_or("trained_steps", 0)?;
        if m.codebook.k() != config.codebook_size || m.codebook.dim() != config.code_dim {
            return Err(Error::Checkpoint("codebook does not match the stage-1 configuration".into()));
        }
        Ok(m)
    }
}

pub(crate) fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    match ck.config.get_str("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {other:?}"))),
    }
}

/// Stage-1 training state that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Stage1Run {
    pub model: Stage1Model,
    pub trainer: Trainer,
    pub log: LossLog,
}

impl Stage1Run {
    pub fn new(config: Stage1Config, settings: &TrainSettings) -> Result<Self> {
        let model = Stage1Model::new(config, settings.seed)?;
        let trainer = Trainer::new(&settings.optim, &model.params, settings.steps);
        Ok(Stage1Run { model, trainer, log: LossLog::default() })
    }

    pub fn resume(ck: &Checkpoint, settings: &TrainSettings) -> Result<Self> {
        let model = Stage1Model::load(ck)?;
        let mut trainer = Trainer::new(&settings.optim, &model.params, settings.steps);
        trainer.restore(ck, "opt.", &model.params)?;
        Ok(Stage1Run { model, trainer, log: LossLog::default() })
    }

    /// Trains on `x[n, 1, L]` until `until` total steps have been taken.
    pub fn train_until(&mut self, x: &Tensor<f32>, settings: &TrainSettings, until: u64) -> Result<()> {
        self.model.check_input(x)?;
        if x.dim(0) == 0 {
            return Err(Error::Usage("stage 1 needs a nonempty training set".into()));
        }
        while self.trainer.steps() < until.min(settings.steps) {
            let step = self.trainer.steps();
            let mut rng = rng::stream(settings.seed, &format!("stage1/step{step}"));
            let idx = batch_indices(&mut rng, x.dim(0), settings.batch);
            let (loss, lr) = self.model.train_step(&mut self.trainer, gather(x, &idx), &mut rng)?;
            self.log.push(step + 1, lr, f64::from(loss));
            self.model.trained_steps = self.trainer.steps();
        }
        Ok(())
    }
}

pub fn train_stage1(x: &Tensor<f32>, config: Stage1Config, settings: &TrainSettings) -> Result<Stage1Run> {
    let mut run = Stage1Run::new(config, settings)?;
    run.train_until(x, settings, settings.steps)?;
    Ok(run)
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(&x, &y)| f64::from(x - y).powi(2)).sum::<f64>() / n
}

// ---------------------------------------------------------------- masking

/// Fraction of tokens still masked at progress `r`: `cos(pi r / 2)`.
pub fn gamma(r: f64) -> f64 {
    (FRAC_PI_2 * r.clamp(0.0, 1.0)).cos()
}

/// Unmasked token count after iteration `t` of `iterations`.
pub fn unmasked_after(t: usize, iterations: usize, n: usize) -> usize {
    let v = ((1.0 - gamma(t as f64 / iterations as f64)) * n as f64 - 1e-9).ceil();
    (v.max(0.0) as usize).min(n)
}

/// Replaces `round(ratio * N)` uniformly chosen positions with `mask_id`.
/// Returns the masked sequence and the sorted masked positions.
pub fn mask_tokens(s: &[usize], ratio: f64, mask_id: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let count = (ratio.clamp(0.0, 1.0) * s.len() as f64).round() as usize;
    mask_count(s, count, mask_id, rng)
}

fn mask_count(s: &[usize], count: usize, mask_id: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut positions = index::sample(rng, s.len(), count.min(s.len())).into_vec();
    positions.sort_unstable();
    let mut out = s.to_vec();
    for &p in &positions {
        out[p] = mask_id;
    }
    (out, positions)
}

// ---------------------------------------------------------------- stage 2

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub seq_len: usize,
    pub codebook_size: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl PriorConfig {
    pub fn mask_id(&self) -> usize {
        self.codebook_size
    }

    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    pub fn write(&self, kv: &mut KvMap) {
        kv.set("prior.seq_len", self.seq_len)
            .set("prior.codebook_size", self.codebook_size)
            .set("prior.num_classes", self.num_classes)
            .set("prior.dim", self.dim)
            .set("prior.layers", self.layers)
            .set("prior.heads", self.heads);
    }

    pub fn read(kv: &KvMap) -> Result<Self> {
        Ok(PriorConfig {
            seq_len: kv.require("prior.seq_len")?,
            codebook_size: kv.require("prior.codebook_size")?,
            num_classes: kv.require("prior.num_classes")?,
            dim: kv.require("prior.dim")?,
            layers: kv.require("prior.layers")?,
            heads: kv.require("prior.heads")?,
        })
    }
}

/// Anything that scores every codebook entry at every position.
pub trait LogitsProvider {
    fn seq_len(&self) -> usize;
    fn vocab(&self) -> usize;
    /// Logits `[B * N * K]` for token rows `[B * N]` (mask id = `vocab()`)
    /// and one label per row (`None` for unconditional).
    fn logits(&self, tokens: &[usize], labels: &[Option<usize>]) -> Result<Vec<f32>>;
}

/// Bidirectional transformer over token sequences with a prepended label slot.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub config: PriorConfig,
    pub params: ParamStore<f32>,
    pub trained_steps: u64,
    tok_emb: nmvq_autodiff::ParamId,
    label_emb: nmvq_autodiff::ParamId,
    pos_emb: nmvq_autodiff::ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head1: Linear,
    head2: Linear,
}

impl PriorModel {
    pub fn new(config: PriorConfig, seed: u64) -> Result<Self> {
        if config.dim % config.heads.max(1) != 0 || config.heads == 0 || config.seq_len == 0 {
            return Err(Error::Config(format!("prior dim {} not divisible by {} heads", config.dim, config.heads)));
        }
        let mut rng = rng::stream(seed, "stage2/init");
        let mut ps = ParamStore::new();
        let d = config.dim;
        let emb = |name: &str, rows: usize, rng: &mut Rng, ps: &mut ParamStore<f32>| {
            let data = (0..rows * d).map(|_| rng.random_range(-0.1..0.1)).collect();
            ps.add(name, Tensor::new([rows, d], data).expect("embedding shape"))
        };
        let tok_emb = emb("tok_emb", config.codebook_size + 1, &mut rng, &mut ps);
        let label_emb = emb("label_emb", config.num_classes + 1, &mut rng, &mut ps);
        let pos_emb = emb("pos_emb", config.seq_len + 1, &mut rng, &mut ps);
        let blocks = (0..config.layers)
            .map(|l| TransformerBlock::new(&mut ps, &format!("block{l}"), d, config.heads, &mut rng))
            .collect();
        let norm = LayerNorm::new(&mut ps, "ln_f", d);
        let head1 = Linear::new(&mut ps, "head1", d, d, &mut rng);
        let head2 = Linear::new(&mut ps, "head2", d, config.codebook_size, &mut rng);
        Ok(PriorModel { config, params: ps, trained_steps: 0, tok_emb, label_emb, pos_emb, blocks, norm, head1, head2 })
    }

    /// Logits `[B * N, K]`.
    fn forward(&self, g: &mut Graph<'_, f32>, tokens: &[usize], labels: &[usize]) -> Result<Var> {
        let (b, n) = (labels.len(), self.config.seq_len);
        if tokens.len() != b * n {
            return Err(Error::Usage(format!("{} tokens for {b} sequences of {n}", tokens.len())));
        }
        let te = g.param(self.tok_emb);
        let le = g.param(self.label_emb);
        let pe = g.param(self.pos_emb);
        let t = g.embedding(te, tokens, &[b, n])?;
        let l = g.embedding(le, labels, &[b, 1])?;
        let mut h = g.concat(&[l, t], 1)?;
        h = g.add_broadcast(h, pe)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        h = self.norm.forward(g, h)?;
        h = g.narrow(h, 1, 1, n)?;
        h = self.head1.forward(g, h)?;
        h = g.gelu(h)?;
        h = self.head2.forward(g, h)?;
        Ok(g.reshape(h, &[b * n, self.config.codebook_size])?)
    }

    fn label_ids(&self, labels: &[Option<usize>]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| match *l {
                None => Ok(self.config.null_label()),
                Some(c) if c < self.config.num_classes => Ok(c),
                Some(c) => Err(Error::Usage(format!("class {c} out of range for {} classes", self.config.num_classes))),
            })
            .collect()
    }

    /// Masked-token cross-entropy on one batch; unmasked positions carry zero weight.
    pub fn masked_loss(&self, g: &mut Graph<'_, f32>, masked: &[usize], targets: &[usize], is_masked: &[bool], labels: &[usize]) -> Result<Var> {
        let logits = self.forward(g, masked, labels)?;
        masked_cross_entropy(g, logits, targets, is_masked)
    }

    pub fn save(&self, trainer: Option<&Trainer>, extra: &KvMap) -> Checkpoint {
        let mut kv = extra.clone();
        kv.set("kind", "stage2").set("trained_steps", self.trained_steps);
        self.config.write(&mut kv);
        let mut ck = Checkpoint::new(kv);
        ck.push_params("p.", &self.params);
        if let Some(t) = trainer {
            t.save_into(&mut ck, "opt.", &self.params);
        }
        ck
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, "stage2")?;
        let mut m = PriorModel::new(PriorConfig::read(&ck.config)?, 0)?;
        ck.load_params("p.", &mut m.params)?;
        m.trained_steps = ck.config.get_or("trained_steps", 0)?;
        Ok(m)
    }
}

impl LogitsProvider for PriorModel {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn vocab(&self) -> usize {
        self.config.codebook_size
    }

    fn logits(&self, tokens: &[usize], labels: &[Option<usize>]) -> Result<Vec<f32>> {
        let ids = self.label_ids(labels)?;
        Ok(eval(&self.params, |g| self.forward(g, tokens, &ids))?.into_data())
    }
}

/// Cross-entropy over the rows flagged in `is_masked` only.
pub fn masked_cross_entropy(g: &mut Graph<'_, f32>, logits: Var, targets: &[usize], is_masked: &[bool]) -> Result<Var> {
    let w: Vec<f32> = is_masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(g.cross_entropy(logits, targets, Some(&w))?)
}

/// Per-sequence masking used during prior training: ratio `cos(pi u / 2)`
/// with `u ~ U(0, 1)`, at least one masked position.
fn training_mask(s: &[usize], mask_id: usize, rng: &mut Rng) -> (Vec<usize>, Vec<bool>) {
    let u: f64 = rng.random();
    let count = ((gamma(u) * s.len() as f64).round() as usize).clamp(1, s.len());
    let (masked, pos) = mask_count(s, count, mask_id, rng);
    let mut flags = vec![false; s.len()];
    for p in pos {
        flags[p] = true;
    }
    (masked, flags)
}

#[derive(Debug, Clone)]
pub struct Stage2Run {
    pub model: PriorModel,
    pub trainer: Trainer,
    pub log: LossLog,
}

impl Stage2Run {
    pub fn new(config: PriorConfig, settings: &TrainSettings) -> Result<Self> {
        let model = PriorModel::new(config, settings.seed)?;
        let trainer = Trainer::new(&settings.optim, &model.params, settings.steps);
        Ok(Stage2Run { model, trainer, log: LossLog::default() })
    }

    pub fn resume(ck: &Checkpoint, settings: &TrainSettings) -> Result<Self> {
        let model = PriorModel::load(ck)?;
        let mut trainer = Trainer::new(&settings.optim, &model.params, settings.steps);
        trainer.restore(ck, "opt.", &model.params)?;
        Ok(Stage2Run { model, trainer, log: LossLog::default() })
    }

    /// Trains on token rows `[n * N]` with optional class labels.
    pub fn train_until(
        &mut self,
        tokens: &[usize],
        labels: Option<&[usize]>,
        settings: &TrainSettings,
        until: u64,
    ) -> Result<()> {
        let cfg = self.model.config;
        let n = cfg.seq_len;
        let count = tokens.len() / n;
        if count == 0 || tokens.len() % n != 0 {
            return Err(Error::Usage(format!("{} tokens do not form sequences of {n}", tokens.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.codebook_size) {
            return Err(Error::Checkpoint(format!("token {bad} out of range for {} codes", cfg.codebook_size)));
        }
        while self.trainer.steps() < until.min(settings.steps) {
            let step = self.trainer.steps();
            let mut rng = rng::stream(settings.seed, &format!("stage2/step{step}"));
            let idx = batch_indices(&mut rng, count, settings.batch);
            let (mut masked, mut targets, mut flags, mut lab) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &i in &idx {
                let s = &tokens[i * n..(i + 1) * n];
                let (m, f) = training_mask(s, cfg.mask_id(), &mut rng);
                masked.extend(m);
                flags.extend(f);
                targets.extend_from_slice(s);
                let drop = rng.random::<f64>() < LABEL_DROPOUT;
                lab.push(match labels {
                    Some(l) if !drop => l[i],
                    _ => cfg.null_label(),
                });
            }
            let (loss, grads) = {
                let mut g = Graph::with_params(&self.model.params);
                let loss = self.model.masked_loss(&mut g, &masked, &targets, &flags, &lab)?;
                let v = g.value(loss).item();
                check_loss("stage 2", step, v)?;
                (v, g.backward(loss)?)
            };
            let lr = self.trainer.step(&mut self.model.params, grads)?;
            self.log.push(step + 1, lr, f64::from(loss));
            self.model.trained_steps = self.trainer.steps();
        }
        Ok(())
    }
}

pub fn train_stage2(
    tokens: &[usize],
    labels: Option<&[usize]>,
    config: PriorConfig,
    settings: &TrainSettings,
) -> Result<Stage2Run> {
    let mut run = Stage2Run::new(config, settings)?;
    run.train_until(tokens, labels, settings, settings.steps)?;
    Ok(run)
}

/// Accuracy of argmax predictions on masked positions, with masks drawn at `ratio`.
pub fn masked_accuracy(
    prior: &impl LogitsProvider,
    tokens: &[usize],
    labels: Option<&[usize]>,
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    let (n, k) = (prior.seq_len(), prior.vocab());
    let count = tokens.len() / n;
    let mut rng = rng::stream(seed, "masked_accuracy");
    let (mut hits, mut total) = (0usize, 0usize);
    for start in (0..count).step_by(INFERENCE_CHUNK) {
        let end = (start + INFERENCE_CHUNK).min(count);
        let mut masked = Vec::new();
        let mut positions = Vec::new();
        let mut lab = Vec::new();
        for i in start..end {
            let s = &tokens[i * n..(i + 1) * n];
            let c = ((ratio * n as f64).round() as usize).clamp(1, n);
            let (m, pos) = mask_count(s, c, k, &mut rng);
            masked.extend(m);
            positions.push(pos);
            lab.push(labels.map(|l| l[i]));
        }
        let logits = prior.logits(&masked, &lab)?;
        for (r, pos) in positions.iter().enumerate() {
            let i = start + r;
            for &p in pos {
                let row = &logits[(r * n + p) * k..(r * n + p + 1) * k];
                let arg = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
                hits += usize::from(arg == tokens[i * n + p]);
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Iterative decoding. Starts fully masked; after iteration `t` exactly
/// `ceil((1 - gamma(t / T)) * N)` positions are fixed, chosen by sampled-token
/// log-probability plus Gumbel noise that fades as decoding proceeds.
///
/// Returns token rows `[labels.len() * N]`.
pub fn sample_tokens(
    prior: &impl LogitsProvider,
    iterations: usize,
    labels: &[Option<usize>],
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    sample_tokens_traced(prior, iterations, labels, rng, |_, _| {})
}

/// [`sample_tokens`] reporting `(iteration, unmasked count per sequence)` after each pass.
pub fn sample_tokens_traced(
    prior: &impl LogitsProvider,
    iterations: usize,
    labels: &[Option<usize>],
    rng: &mut Rng,
    mut trace: impl FnMut(usize, &[usize]),
) -> Result<Vec<usize>> {
    if iterations == 0 {
        return Err(Error::Usage("sampling needs at least one iteration".into()));
    }
    let (n, k) = (prior.seq_len(), prior.vocab());
    let b = labels.len();
    let mask = k;
    let mut tokens = vec![mask; b * n];
    for t in 0..iterations {
        let logits = prior.logits(&tokens, labels)?;
        let target = unmasked_after(t + 1, iterations, n);
        let noise_scale = CHOICE_TEMPERATURE * (1.0 - t as f64 / iterations as f64);
        let mut counts = Vec::with_capacity(b);
        for s in 0..b {
            let seq = &mut tokens[s * n..(s + 1) * n];
            let mut proposals = Vec::new();
            for (p, tok) in seq.iter().enumerate() {
                if *tok != mask {
                    continue;
                }
                let row = &logits[(s * n + p) * k..(s * n + p + 1) * k];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut probs: Vec<f64> = row.iter().map(|&v| f64::from(v - max).exp()).collect();
                let z: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|v| *v /= z);
                let chosen = vq::sample_categorical(&probs, rng);
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let gumbel = -(-u.ln()).ln();
                let confidence = probs[chosen].max(f64::MIN_POSITIVE).ln() + noise_scale * gumbel;
                proposals.push((confidence, p, chosen));
            }
            let fixed = n - proposals.len();
            let take = target.saturating_sub(fixed).min(proposals.len());
            proposals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, p, chosen) in &proposals[..take] {
                seq[p] = chosen;
            }
            counts.push(seq.iter().filter(|&&v| v != mask).count());
        }
        trace(t + 1, &counts);
    }
    Ok(tokens)
}

/// `n` generated series `[n, 1, L]` for one class (or unconditional).
pub fn generate(
    stage1: &Stage1Model,
    prior: &PriorModel,
    n: usize,
    class: Option<usize>,
    iterations: usize,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    check_compatible(stage1, prior)?;
    let mut out = Vec::with_capacity(n * stage1.config.length);
    let mut done = 0;
    while done < n {
        let b = (n - done).min(INFERENCE_CHUNK);
        let tokens = sample_tokens(prior, iterations, &vec![class; b], rng)?;
        out.extend(stage1.decode_tokens(&tokens)?.into_data());
        done += b;
    }
    Ok(Tensor::new([n, 1, stage1.config.length], out)?)
}

/// Generates `counts[c]` series for each class `c`; returns series and labels.
pub fn generate_per_class(
    stage1: &Stage1Model,
    prior: &PriorModel,
    counts: &[usize],
    iterations: usize,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, &count) in counts.iter().enumerate() {
        let class = (prior.config.num_classes > 0).then_some(c);
        data.extend(generate(stage1, prior, count, class, iterations, rng)?.into_data());
        labels.extend(std::iter::repeat_n(c, count));
    }
    Ok((Tensor::new([labels.len(), 1, stage1.config.length], data)?, labels))
}

pub fn check_compatible(stage1: &Stage1Model, prior: &PriorModel) -> Result<()> {
    let (s, p) = (&stage1.config, &prior.config);
    if s.codebook_size != p.codebook_size || s.tokens() != p.seq_len {
        return Err(Error::Config(format!(
            "stage-1 model has K={} and N={}, prior expects K={} and N={}",
            s.codebook_size,
            s.tokens(),
            p.codebook_size,
            p.seq_len
        )));
    }
    Ok(())
}

/// Mean per-sequence count of positions where `a` and `b` differ.
pub fn mean_hamming(a: &[usize], b: &[usize], n: usize) -> f64 {
    let seqs = (a.len() / n.max(1)).max(1);
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / seqs as f64
}
