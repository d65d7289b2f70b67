//! Warmup / linear-decay learning-rate schedules.

use crate::error::{Error, Result};
use crate::kv::KvDocument;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSchedule {
    pub peak_lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Relative disagreement between `warmup_steps` and `warmup_ratio × total_steps`
/// tolerated without a warning.
pub const WARMUP_CONSISTENCY: f64 = 0.01;

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config(
                "peak_lr must be finite and non-negative, batch_size positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 1]",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    /// Describes the mismatch when the two warmup columns disagree by more
    /// than [`WARMUP_CONSISTENCY`]. `warmup_steps` is what the schedule uses.
    pub fn warmup_inconsistency(&self) -> Option<String> {
        let implied = self.warmup_ratio * self.total_steps as f64;
        let actual = self.warmup_steps as f64;
        let scale = implied.max(actual).max(1.0);
        ((actual - implied).abs() / scale > WARMUP_CONSISTENCY).then(|| {
            format!(
                "warmup_steps {} disagrees with warmup_ratio {} x total_steps {} = {implied:.0}",
                self.warmup_steps, self.warmup_ratio, self.total_steps
            )
        })
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.set("peak_lr", self.peak_lr);
        doc.set("batch_size", self.batch_size);
        doc.set("warmup_ratio", self.warmup_ratio);
        doc.set("warmup_steps", self.warmup_steps);
        doc.set("total_steps", self.total_steps);
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let schedule = Self {
            peak_lr: doc.require("peak_lr")?,
            batch_size: doc.require("batch_size")?,
            warmup_ratio: doc.require("warmup_ratio")?,
            warmup_steps: doc.require("warmup_steps")?,
            total_steps: doc.require("total_steps")?,
        };
        schedule.validate()?;
        if let Some(message) = schedule.warmup_inconsistency() {
            log::warn!("{message}");
        }
        Ok(schedule)
    }

    /// Same shape scaled to `total_steps`, keeping the warmup fraction.
    pub fn rescaled(&self, total_steps: u64) -> Self {
        let fraction = self.warmup_steps as f64 / self.total_steps as f64;
        Self {
            total_steps,
            warmup_steps: ((fraction * total_steps as f64).round() as u64).min(total_steps),
            ..self.clone()
        }
    }

    /// No warmup, linear decay from `peak_lr` to zero.
    pub fn linear_decay(peak_lr: f64, batch_size: usize, total_steps: u64) -> Self {
        Self {
            peak_lr,
            batch_size,
            warmup_ratio: 0.0,
            warmup_steps: 0,
            total_steps: total_steps.max(1),
        }
    }
}

/// Linear ramp from 0 to `peak_lr` over the warmup, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: u64, schedule: &TrainingSchedule) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {}",
            schedule.total_steps
        )));
    }
    let (w, t) = (schedule.warmup_steps, schedule.total_steps);
    if step < w {
        return Ok(schedule.peak_lr * (step as f64 / w as f64));
    }
    if w == t {
        return Ok(schedule.peak_lr);
    }
    Ok(schedule.peak_lr * ((t - step) as f64 / (t - w) as f64))
}
