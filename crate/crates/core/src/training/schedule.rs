//! Learning-rate schedule: linear warmup, then either quantized
//! inverse-square-root decay or linear decay to the floor.

use super::{Schedule, TrainConfig, TrainingError};

/// Shared LR factor for both parameter groups at a 1-based `step`.
///
/// Warmup: `step / warmup_steps` for `step <= warmup_steps`.
///
/// Inverse square root: the decay advances once per `decay_quantum` updates,
/// `factor = max(floor, sqrt(warmup / q))` with
/// `q = warmup + quantum * floor((step - warmup) / quantum)`.
///
/// Linear: straight line from 1 at warmup end to the floor at `max_steps`
/// (which must be set).
pub fn lr_multiplier(step: u64, config: &TrainConfig) -> Result<f64, TrainingError> {
    if step == 0 {
        return Err(TrainingError::InvalidConfig(
            "lr_multiplier steps are 1-based".into(),
        ));
    }
    let warmup = config.warmup_steps;
    if step <= warmup {
        return Ok(step as f64 / warmup as f64);
    }
    let floor = config.lr_floor_ratio;
    match config.schedule {
        Schedule::InvSqrt => {
            let quantum = config.decay_quantum;
            let q = warmup + quantum * ((step - warmup) / quantum);
            Ok((warmup as f64 / q as f64).sqrt().max(floor))
        }
        Schedule::Linear => {
            let max_steps = config.max_steps.ok_or_else(|| {
                TrainingError::InvalidConfig("linear schedule requires max_steps".into())
            })?;
            if max_steps <= warmup {
                return Err(TrainingError::InvalidConfig(format!(
                    "linear schedule needs max_steps > warmup_steps ({} <= {})",
                    max_steps, warmup
                )));
            }
            if step >= max_steps {
                return Ok(floor);
            }
            let progress = (step - warmup) as f64 / (max_steps - warmup) as f64;
            Ok((1.0 - (1.0 - floor) * progress).max(floor))
        }
    }
}
