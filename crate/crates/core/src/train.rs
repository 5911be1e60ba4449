//! Shared optimizer plumbing for the training loops.

use nmvq_autodiff::{AdamW, AdamWConfig, Gradients, LrSchedule, ParamStore, Tensor};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 0.005;
pub const DEFAULT_FINAL_LR: f64 = 0.0005;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.1;
pub const DEFAULT_BATCH: usize = 32;
pub const CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: DEFAULT_LR,
            final_lr: DEFAULT_FINAL_LR,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            clip_norm: CLIP_NORM,
        }
    }
}

/// AdamW plus schedule, stepping one parameter store.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub opt: AdamW<f32>,
    pub schedule: LrSchedule,
    clip_norm: f64,
}

impl Trainer {
    pub fn new(cfg: &OptimConfig, params: &ParamStore<f32>, total_steps: u64) -> Self {
        Trainer {
            opt: AdamW::new(AdamWConfig::default(), params),
            schedule: LrSchedule::with_warmup_fraction(cfg.lr, cfg.final_lr, cfg.warmup_fraction, total_steps),
            clip_norm: cfg.clip_norm,
        }
    }

    pub fn steps(&self) -> u64 {
        self.opt.steps()
    }

    /// Clips, applies one update and returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore<f32>, mut grads: Gradients<f32>) -> Result<f64> {
        if self.clip_norm > 0.0 {
            grads.clip_global_norm(self.clip_norm);
        }
        // the schedule ramps from 0, so the first update uses the rate of step 1
        let lr = self.schedule.lr_at(self.opt.steps() + 1).max(f64::MIN_POSITIVE);
        self.opt.step(params, &grads, lr)?;
        Ok(lr)
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str, params: &ParamStore<f32>) {
        let (step, arrays) = self.opt.export(params);
        ck.config.set(&format!("{prefix}opt_step"), step);
        for (name, t) in arrays {
            ck.push_tensor(format!("{prefix}{name}"), &t);
        }
    }

    pub fn restore(&mut self, ck: &Checkpoint, prefix: &str, params: &ParamStore<f32>) -> Result<()> {
        let step: u64 = ck.config.require(&format!("{prefix}opt_step"))?;
        let lookup = |name: &str| -> Option<Tensor<f32>> { ck.tensor(&format!("{prefix}{name}")).ok() };
        self.opt = AdamW::import(AdamWConfig::default(), params, step, lookup)
            .map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))?;
        Ok(())
    }
}

/// Per-step loss record, written as CSV by the caller.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<(u64, f64, f64)>,
}

impl LossLog {
    pub fn push(&mut self, step: u64, lr: f64, loss: f64) {
        self.rows.push((step, lr, loss));
    }

    pub fn last(&self) -> Option<f64> {
        self.rows.last().map(|r| r.2)
    }

    /// Mean loss over the first and last `window` entries.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.rows.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |r: &[(u64, f64, f64)]| r.iter().map(|x| x.2).sum::<f64>() / r.len() as f64;
        Some((mean(&self.rows[..w]), mean(&self.rows[n - w..])))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for (step, lr, loss) in &self.rows {
            s.push_str(&format!("{step},{lr:e},{loss:e}\n"));
        }
        s
    }
}

pub(crate) fn check_loss(stage: &str, step: u64, loss: f32) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{stage}: loss became {loss} at step {step}")))
    }
}
