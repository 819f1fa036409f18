/// Linear warmup to `peak_rate` over `warmup_steps`, then inverse
/// square-root decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_rate: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_rate: f64, warmup_steps: u64) -> Self {
        assert!(peak_rate > 0.0, "peak rate must be positive");
        assert!(warmup_steps > 0, "warmup must be at least one step");
        Self { peak_rate, warmup_steps }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps as f64;
        let s = step as f64;
        if step <= self.warmup_steps {
            self.peak_rate * s / w
        } else {
            self.peak_rate * (w / s).sqrt()
        }
    }
}
