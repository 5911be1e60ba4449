//! Linear warmup followed by cosine decay.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_rate: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(initial: f64, final_rate: f64, warmup: u64, total: u64) -> Self {
        LrSchedule { initial, final_rate, warmup: warmup.min(total), total }
    }

    /// Warmup over `warmup_fraction` of `total` steps.
    pub fn with_warmup_fraction(initial: f64, final_rate: f64, warmup_fraction: f64, total: u64) -> Self {
        Self::new(initial, final_rate, (warmup_fraction * total as f64).round() as u64, total)
    }

    /// Learning rate at `step`; steps past `total` clamp to the final rate.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total {
            return self.final_rate;
        }
        if step < self.warmup {
            return self.initial * step as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup) as f64;
        let progress = (step - self.warmup) as f64 / span;
        let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        w * self.initial + (1.0 - w) * self.final_rate
    }
}
