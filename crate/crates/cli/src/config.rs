//! Run configuration: defaults, the desk-scale profile, config files and overrides.

use std::path::{Path, PathBuf};

use nmvq_core::dataset::SyntheticKind;
use nmvq_core::kv::KvMap;
use nmvq_core::mapper::UNetConfig;
use nmvq_core::tau_search::DEFAULT_CANDIDATES;
use nmvq_core::train::{OptimConfig, DEFAULT_BATCH};
use nmvq_core::tsgen::{Stage1Config, DEFAULT_SAMPLING_STEPS};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const DEFAULT_STEPS: [u64; 3] = [20_000, 40_000, 30_000];
pub const DESK_STEPS: [u64; 3] = [2_000, 4_000, 3_000];
pub const DEFAULT_FCN_STEPS: u64 = 5_000;
pub const DESK_FCN_STEPS: u64 = 500;
pub const DEFAULT_VISUAL_SAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { kind: SyntheticKind, n: usize, length: usize, noise: f64 },
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub sampling: u64,
    pub rocket: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds { data: seed, model: seed, sampling: seed, rocket: seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: DataSource,
    pub dataset_name: String,
    pub train_fraction: f64,
    pub steps: [u64; 3],
    pub fcn_steps: u64,
    pub checkpoint_every: u64,
    pub batch: usize,
    pub optim: OptimConfig,
    /// Length is taken from the data; the field here is ignored.
    pub stage1: Stage1Config,
    pub prior_dim: usize,
    pub prior_layers: usize,
    pub prior_heads: usize,
    pub unet: UNetConfig,
    pub fcn_widths: [usize; 3],
    pub rocket_kernels: usize,
    pub tau_candidates: Vec<f64>,
    pub tau_n_gen: Option<usize>,
    pub sampling_iterations: usize,
    pub generate_n: Option<usize>,
    pub visual_samples: usize,
    pub eval_rocket_seeds: Option<Vec<u64>>,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: DataSource::Synthetic { kind: SyntheticKind::TwoPatterns, n: 600, length: 128, noise: 0.1 },
            dataset_name: "two_patterns".into(),
            train_fraction: nmvq_core::dataset::DEFAULT_TRAIN_FRACTION,
            steps: DEFAULT_STEPS,
            fcn_steps: DEFAULT_FCN_STEPS,
            checkpoint_every: 1000,
            batch: DEFAULT_BATCH,
            optim: OptimConfig::default(),
            // length comes from the data at training time
            stage1: Stage1Config { length: 0, ..Stage1Config::default() },
            prior_dim: 256,
            prior_layers: 4,
            prior_heads: 4,
            unet: UNetConfig::default(),
            fcn_widths: nmvq_core::fcn::WIDTHS,
            rocket_kernels: nmvq_core::rocket::DEFAULT_KERNELS,
            tau_candidates: DEFAULT_CANDIDATES.to_vec(),
            tau_n_gen: None,
            sampling_iterations: DEFAULT_SAMPLING_STEPS,
            generate_n: None,
            visual_samples: DEFAULT_VISUAL_SAMPLES,
            eval_rocket_seeds: None,
            seeds: Seeds::all(0),
        }
    }
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn list_text<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn get_opt<T: std::str::FromStr>(kv: &KvMap, key: &str) -> Result<Option<T>> {
    match kv.get_str(key) {
        Some("auto") | None => Ok(None),
        Some(_) => Ok(Some(kv.require(key)?)),
    }
}

fn get_list<T: std::str::FromStr>(kv: &KvMap, key: &str) -> Result<Vec<T>> {
    kv.get_list(key)?.ok_or_else(|| CliError::Config(format!("missing key `{key}`")))
}

impl RunConfig {
    /// Shrinks steps and model sizes to the profile used by the acceptance run.
    pub fn desk_scale() -> Self {
        RunConfig {
            steps: DESK_STEPS,
            fcn_steps: DESK_FCN_STEPS,
            checkpoint_every: 500,
            stage1: Stage1Config { levels: 3, base_width: 16, blocks: 1, codebook_size: 64, ..RunConfig::default().stage1 },
            prior_dim: 64,
            prior_layers: 2,
            prior_heads: 2,
            unet: UNetConfig { base_channels: 16, ..UNetConfig::default() },
            fcn_widths: [32, 64, 128],
            rocket_kernels: 1000,
            ..RunConfig::default()
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        match &self.source {
            DataSource::Synthetic { kind, n, length, noise } => {
                kv.set("data.source", "synthetic")
                    .set("data.kind", kind)
                    .set("data.n", n)
                    .set("data.length", length)
                    .set("data.noise", noise);
            }
            DataSource::File(p) => {
                kv.set("data.source", p.display());
            }
        }
        kv.set("data.name", &self.dataset_name)
            .set("data.train_fraction", self.train_fraction)
            .set("steps.stage1", self.steps[0])
            .set("steps.stage2", self.steps[1])
            .set("steps.stage3", self.steps[2])
            .set("steps.fcn", self.fcn_steps)
            .set("train.checkpoint_every", self.checkpoint_every)
            .set("train.batch", self.batch)
            .set("train.lr", self.optim.lr)
            .set("train.final_lr", self.optim.final_lr)
            .set("train.warmup_fraction", self.optim.warmup_fraction)
            .set("train.clip_norm", self.optim.clip_norm)
            .set("prior.dim", self.prior_dim)
            .set("prior.layers", self.prior_layers)
            .set("prior.heads", self.prior_heads)
            .set("fcn.widths", list_text(&self.fcn_widths))
            .set("rocket.kernels", self.rocket_kernels)
            .set("tau.candidates", list_text(&self.tau_candidates))
            .set("tau.n_gen", opt_text(&self.tau_n_gen))
            .set("sampling.iterations", self.sampling_iterations)
            .set("generate.n", opt_text(&self.generate_n))
            .set("visualize.samples", self.visual_samples)
            .set("eval.rocket_seeds", self.eval_rocket_seeds.as_deref().map_or("auto".into(), list_text))
            .set("seed.data", self.seeds.data)
            .set("seed.model", self.seeds.model)
            .set("seed.sampling", self.seeds.sampling)
            .set("seed.rocket", self.seeds.rocket);
        self.stage1.write(&mut kv);
        kv.set("stage1.length", "auto");
        self.unet.write(&mut kv);
        kv
    }

    /// Applies `overrides` on top of `self`. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &KvMap) -> Result<Self> {
        let mut kv = self.to_kv();
        let known = kv.clone();
        for key in overrides.keys() {
            let synthetic_key = matches!(key, "data.kind" | "data.n" | "data.length" | "data.noise");
            if !known.contains(key) && !synthetic_key {
                return Err(CliError::Config(format!("unknown config key `{key}`")));
            }
        }
        kv.merge(overrides);
        Self::from_kv(&kv)
    }

    fn from_kv(kv: &KvMap) -> Result<Self> {
        let defaults = RunConfig::default();
        let source = match kv.get_str("data.source") {
            Some("synthetic") | None => {
                let DataSource::Synthetic { kind, n, length, noise } = defaults.source else { unreachable!() };
                DataSource::Synthetic {
                    kind: kv.get_or("data.kind", kind)?,
                    n: kv.get_or("data.n", n)?,
                    length: kv.get_or("data.length", length)?,
                    noise: kv.get_or("data.noise", noise)?,
                }
            }
            Some(path) => DataSource::File(PathBuf::from(path)),
        };
        let mut s1kv = kv.clone();
        s1kv.set("stage1.length", 0);
        let widths: Vec<usize> = get_list(kv, "fcn.widths")?;
        let fcn_widths: [usize; 3] = widths
            .try_into()
            .map_err(|_| CliError::Config("fcn.widths needs exactly three values".into()))?;
        let cfg = RunConfig {
            source,
            dataset_name: kv.require("data.name")?,
            train_fraction: kv.require("data.train_fraction")?,
            steps: [kv.require("steps.stage1")?, kv.require("steps.stage2")?, kv.require("steps.stage3")?],
            fcn_steps: kv.require("steps.fcn")?,
            checkpoint_every: kv.require("train.checkpoint_every")?,
            batch: kv.require("train.batch")?,
            optim: OptimConfig {
                lr: kv.require("train.lr")?,
                final_lr: kv.require("train.final_lr")?,
                warmup_fraction: kv.require("train.warmup_fraction")?,
                clip_norm: kv.require("train.clip_norm")?,
            },
            stage1: Stage1Config::read(&s1kv)?,
            prior_dim: kv.require("prior.dim")?,
            prior_layers: kv.require("prior.layers")?,
            prior_heads: kv.require("prior.heads")?,
            unet: UNetConfig::read(kv)?,
            fcn_widths,
            rocket_kernels: kv.require("rocket.kernels")?,
            tau_candidates: get_list(kv, "tau.candidates")?,
            tau_n_gen: get_opt(kv, "tau.n_gen")?,
            sampling_iterations: kv.require("sampling.iterations")?,
            generate_n: get_opt(kv, "generate.n")?,
            visual_samples: kv.require("visualize.samples")?,
            eval_rocket_seeds: match kv.get_str("eval.rocket_seeds") {
                Some("auto") | None => None,
                Some(_) => Some(get_list(kv, "eval.rocket_seeds")?),
            },
            seeds: Seeds {
                data: kv.require("seed.data")?,
                model: kv.require("seed.model")?,
                sampling: kv.require("seed.sampling")?,
                rocket: kv.require("seed.rocket")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.iter().any(|&s| s == 0) || self.fcn_steps == 0 {
            return Err(CliError::Config("all step counts must be at least 1".into()));
        }
        if self.batch == 0 || self.checkpoint_every == 0 {
            return Err(CliError::Config("batch size and checkpoint interval must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Config(format!("data.train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.tau_candidates.is_empty() || self.tau_candidates.iter().any(|&t| !(t > 0.0)) {
            return Err(CliError::Config("tau.candidates must be a nonempty list of positive values".into()));
        }
        Ok(())
    }

    pub fn load_file(base: &Self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
        base.with_overrides(&KvMap::parse(&text)?)
    }

    /// Short SHA-256 of the canonical config text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn rocket_seeds(&self) -> Vec<u64> {
        self.eval_rocket_seeds.clone().unwrap_or_else(|| vec![self.seeds.rocket])
    }

    /// Provenance lines embedded in every emitted artifact.
    pub fn provenance(&self) -> Vec<String> {
        vec![
            format!("config_hash={}", self.hash()),
            format!(
                "seeds data={} model={} sampling={} rocket={}",
                self.seeds.data, self.seeds.model, self.seeds.sampling, self.seeds.rocket
            ),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_step_counts() {
        let c = RunConfig::default();
        assert_eq!(c.steps, [20_000, 40_000, 30_000]);
        assert_eq!(c.batch, 32);
        assert_eq!(c.optim.lr, 0.005);
        assert_eq!(c.optim.final_lr, 0.0005);
        assert_eq!(c.tau_candidates, vec![0.1, 0.5, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn kv_round_trip_and_hash() {
        for c in [RunConfig::default(), RunConfig::desk_scale()] {
            let back = c.with_overrides(&KvMap::new()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        assert_ne!(RunConfig::default().hash(), RunConfig::desk_scale().hash());
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = RunConfig::default()
            .with_overrides(&KvMap::parse("steps.stage1 = 10\ngenerate.n = 5\ndata.source = /tmp/x.tsv").unwrap())
            .unwrap();
        assert_eq!(c.steps[0], 10);
        assert_eq!(c.generate_n, Some(5));
        assert_eq!(c.source, DataSource::File("/tmp/x.tsv".into()));
        assert!(RunConfig::default().with_overrides(&KvMap::parse("steps.stage9 = 1").unwrap()).is_err());
        assert!(RunConfig::default().with_overrides(&KvMap::parse("steps.stage2 = 0").unwrap()).is_err());
        assert!(RunConfig::default().with_overrides(&KvMap::parse("tau.candidates = 1,-2").unwrap()).is_err());
    }
}
