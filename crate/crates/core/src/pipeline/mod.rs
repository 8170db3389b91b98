//! End-to-end model: per-modality encoders and bottlenecks, adversarial
//! redundancy reduction, fusion, channel coding, the noisy channel, and the
//! receiver bottleneck, trained jointly with one optimizer step per batch.

mod checkpoint;
mod config;
mod forward;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use forward::{encode_latents, forward_pass, infer, Forward, LossParts, Schedule, StepRng};
pub use model::{Architecture, ModelState};
pub use train::{train, train_with, EpochLog, TrainOutcome, ValidationPoint};

/// `Σ_m U-VIB + M-VIB + λ·L_red`.
pub fn total_loss(uvib: &[f64], mvib: f64, redundancy: f64, lambda_red: f64) -> f64 {
    uvib.iter().sum::<f64>() + mvib + lambda_red * redundancy
}

/// GRL scale and effective redundancy weight for a 0-based epoch.
///
/// `α` ramps linearly to 1 over the warm-up epochs. The redundancy weight is
/// zero during warm-up, then ramps linearly to `lambda_red`, reaching it at
/// the final epoch.
pub fn warmup_schedule(epoch: usize, warmup_epochs: usize, total_epochs: usize, lambda_red: f64) -> (f64, f64) {
    let alpha = if warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / warmup_epochs as f64).min(1.0)
    };
    let lambda = if epoch < warmup_epochs {
        0.0
    } else if total_epochs <= warmup_epochs {
        lambda_red
    } else {
        let ramp = (epoch - warmup_epochs + 1) as f64 / (total_epochs - warmup_epochs) as f64;
        lambda_red * ramp.min(1.0)
    };
    (alpha, lambda)
}
