//! Learning-rate schedules: warmup + cosine-to-floor, and the resumable
//! warmup / cosine / constant / linear-anneal schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    CosineFloor,
    Infinite,
}

/// Piecewise learning-rate schedule with fractional phase boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_peak: f64,
    /// Learning rate reached at the end of the cosine phase.
    pub cosine_end_lr: f64,
    /// Fraction of total steps spent at `cosine_end_lr` (Infinite only).
    pub constant_frac: f64,
    /// Fraction of total steps spent annealing linearly to `final_lr`
    /// (Infinite only).
    pub anneal_frac: f64,
    pub final_lr: f64,
}

impl ScheduleSpec {
    /// Linear warmup then a half-cosine from `lr_peak` down to `end_lr` at
    /// `total_steps`.
    pub fn cosine_floor(total_steps: u64, warmup_steps: u64, lr_peak: f64, end_lr: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::CosineFloor,
            total_steps,
            warmup_steps,
            lr_peak,
            cosine_end_lr: end_lr,
            constant_frac: 0.0,
            anneal_frac: 0.0,
            final_lr: end_lr,
        }
    }

    /// The resumable schedule: 1% warmup to 3e-5, cosine decay over 60% of
    /// steps to 1.65e-5, constant for 25%, then linear anneal to 2e-6 over
    /// the last 14%.
    pub fn infinite(total_steps: u64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Infinite,
            total_steps,
            warmup_steps: ((total_steps as f64) * 0.01).round() as u64,
            lr_peak: 3e-5,
            cosine_end_lr: 1.65e-5,
            constant_frac: 0.25,
            anneal_frac: 0.14,
            final_lr: 2e-6,
        }
    }

    /// Step at which the final anneal phase begins (Infinite only).
    pub fn anneal_start(&self) -> u64 {
        match self.kind {
            ScheduleKind::CosineFloor => self.total_steps,
            ScheduleKind::Infinite => {
                self.total_steps - ((self.total_steps as f64) * self.anneal_frac).round() as u64
            }
        }
    }
}

/// Learning rate at `step`. Warmup is linear from `lr_peak / warmup_steps` at
/// step 1 so step 1 already performs a nonzero update; `lr_at(0)` is 0.
pub fn lr_at(spec: &ScheduleSpec, step: u64) -> Result<f64> {
    if step > spec.total_steps {
        return Err(Error::InvalidConfig(format!(
            "step {step} beyond schedule end {}",
            spec.total_steps
        )));
    }
    let w = spec.warmup_steps;
    if step <= w {
        // Grouped so the warmup endpoint is exactly lr_peak.
        return Ok(spec.lr_peak * (step as f64 / w.max(1) as f64));
    }
    match spec.kind {
        ScheduleKind::CosineFloor => {
            let progress = (step - w) as f64 / (spec.total_steps - w) as f64;
            Ok(spec.cosine_end_lr
                + 0.5
                    * (spec.lr_peak - spec.cosine_end_lr)
                    * (1.0 + (std::f64::consts::PI * progress).cos()))
        }
        ScheduleKind::Infinite => {
            let constant_steps = ((spec.total_steps as f64) * spec.constant_frac).round() as u64;
            let anneal_start = spec.anneal_start();
            let cosine_end = anneal_start - constant_steps;
            if step <= cosine_end {
                let progress = (step - w) as f64 / (cosine_end - w) as f64;
                Ok(spec.cosine_end_lr
                    + 0.5
                        * (spec.lr_peak - spec.cosine_end_lr)
                        * (1.0 + (std::f64::consts::PI * progress).cos()))
            } else if step <= anneal_start {
                Ok(spec.cosine_end_lr)
            } else {
                let progress = (step - anneal_start) as f64 / (spec.total_steps - anneal_start) as f64;
                // Convex form so both endpoints are exact.
                Ok(spec.cosine_end_lr * (1.0 - progress) + spec.final_lr * progress)
            }
        }
    }
}
