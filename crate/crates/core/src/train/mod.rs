//! Training engine: end-to-end gradients through the unfolded detector,
//! Adam, the minibatch loop, checkpoints and finite-difference checks.

mod adam;
mod backward;
mod checkpoint;
mod gradcheck;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use backward::{backward, batch_loss, sample_gradient, GradientSet};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_VERSION};
pub use gradcheck::{finite_difference, max_relative_errors};
pub use trainer::{resume, train, validate, EpochLog, TrainConfig, TrainOutcome};

/// Squared Euclidean distance between estimate and truth.
pub fn loss_l2(x_hat: &[f64], x_true: &[f64]) -> f64 {
    assert_eq!(x_hat.len(), x_true.len(), "loss operands differ in length");
    x_hat.iter().zip(x_true).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(loss_l2(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(loss_l2(&[3.0, 4.0], &[0.0, 0.0]), 25.0);
        assert_eq!(loss_l2(&[1.0, 5.0, 2.0], &[0.0, 1.0, 2.0]), loss_l2(&[5.0, 2.0, 1.0], &[1.0, 2.0, 0.0]));
    }
}
