//! Linear warmup followed by linear decay to zero.
//!
//! With `W = round(warmup_ratio · T)` warmup steps out of `T` total, the rate
//! used for the update at 0-based step `s` is
//!
//! ```text
//! lr · s / W                 for s < W
//! lr · (T − s) / (T − W)     for W ≤ s < T
//! ```
//!
//! so step 0 takes a zero-length step when `W > 0`, step `W` runs at the
//! peak rate, and step `T − 1` runs at `lr / (T − W)`.

use crate::error::{Error, Result};

pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    ((warmup_ratio * total_steps as f64).round() as usize).min(total_steps)
}

pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64, peak: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    Ok(if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}
