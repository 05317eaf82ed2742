use serde::{Deserialize, Serialize};

/// Linear warmup to a peak rate, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
}

/// Learning rate at `step`: `peak · step / warmup` during warmup, `peak` after.
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step >= s.warmup_steps {
        s.peak_lr
    } else {
        s.peak_lr * (step as f64 / s.warmup_steps as f64)
    }
}
