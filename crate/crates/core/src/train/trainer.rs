//! Minibatch training loop with validation-based model selection.

use rayon::prelude::*;

use crate::constellation::Constellation;
use crate::detector::{amp_gnn_detect, AmpGnnConfig};
use crate::error::{Error, Result};
use crate::mpnn::{MpnnDims, MpnnParams};
use crate::system::{generate_batch, generate_sample, stream_rng, Sample};

use super::{adam_step, backward, loss_l2, AdamState, Checkpoint, TrainingMeta};

/// RNG stream reserved for the validation set.
const VALIDATION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_snr_db: f64,
    /// Receive antennas `M`.
    pub antennas: usize,
    /// User counts `N`; batches cycle through the list when it has more than
    /// one entry.
    pub users: Vec<usize>,
    /// Constellation order `Q`.
    pub order: usize,
    pub layers: usize,
    pub rounds: usize,
    pub seed: u64,
    /// Fixed validation set size, drawn once at `train_snr_db`.
    pub validation_samples: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: 20k samples per epoch, 30 epochs.
    pub fn new(antennas: usize, users: usize, order: usize) -> Self {
        Self {
            epochs: 30,
            samples_per_epoch: 20_000,
            batch_size: 64,
            learning_rate: 1e-3,
            train_snr_db: 20.0,
            antennas,
            users: vec![users],
            order,
            layers: 10,
            rounds: 2,
            seed: 0,
            validation_samples: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, samples per epoch and batch size must be positive");
        }
        if self.batch_size > self.samples_per_epoch {
            return bad("batch size exceeds samples per epoch");
        }
        if !(self.learning_rate > 0.0) || !self.train_snr_db.is_finite() {
            return bad("learning rate must be positive and the training SNR finite");
        }
        if self.antennas == 0 || self.users.is_empty() || self.users.contains(&0) {
            return bad("antenna and user counts must be positive");
        }
        if self.users.iter().any(|&n| n > self.antennas) {
            return bad("more users than antennas is not supported");
        }
        if self.layers == 0 || self.rounds == 0 || self.validation_samples == 0 {
            return bad("layers, rounds and validation samples must be positive");
        }
        Constellation::new(self.order)?;
        Ok(())
    }

    fn batches_per_epoch(&self) -> usize {
        self.samples_per_epoch / self.batch_size
    }

    fn constellation(&self) -> Constellation {
        Constellation::new(self.order).expect("validated order")
    }

    /// Training batch `b` of epoch `epoch` (1-based), independent of how
    /// many epochs ran before in this process.
    fn batch(&self, epoch: usize, b: usize) -> Vec<Sample> {
        let mut rng = stream_rng(self.seed, epoch as u64, b as u64);
        let n = self.users[b % self.users.len()];
        generate_batch(self.batch_size, self.antennas, n, &self.constellation(), self.train_snr_db, &mut rng)
    }

    fn validation_set(&self) -> Vec<Sample> {
        let mut rng = stream_rng(self.seed, VALIDATION_STREAM, 0);
        let c = self.constellation();
        (0..self.validation_samples)
            .map(|i| {
                let n = self.users[i % self.users.len()];
                generate_sample(self.antennas, n, &c, self.train_snr_db, &mut rng)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    pub val_ser: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest validation SER (ties: lowest validation loss).
    pub best: Checkpoint,
    /// State after the final epoch, with optimizer moments for resuming.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Validation SER and mean loss of `params` on `samples`.
pub fn validate(
    samples: &[Sample],
    constellation: &Constellation,
    params: &MpnnParams,
    layers: usize,
    rounds: usize,
) -> Result<(f64, f64)> {
    let cfg = AmpGnnConfig { layers, rounds, constellation: constellation.clone(), params: params.clone() };
    let per: Vec<Result<(usize, usize, f64)>> = samples
        .par_iter()
        .map(|s| {
            let out = amp_gnn_detect(s.system.real(), &cfg)?;
            Ok((
                s.symbol_errors(&out.decisions),
                s.system.users(),
                loss_l2(out.soft.x_hat.as_slice(), s.x_true_real.as_slice()),
            ))
        })
        .collect();
    let (mut errors, mut symbols, mut loss) = (0usize, 0usize, 0.0);
    for p in per {
        let (e, n, l) = p?;
        errors += e;
        symbols += n;
        loss += l;
    }
    Ok((errors as f64 / symbols as f64, loss / samples.len() as f64))
}

/// Trains from a fresh initialization seeded by `config.seed`.
pub fn train(config: &TrainConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate()?;
    let params = MpnnParams::init(MpnnDims::new(config.constellation().sqrt_order()), config.seed);
    let start = Checkpoint {
        layers: config.layers,
        rounds: config.rounds,
        optimizer: Some(AdamState::new(&params)),
        params,
        meta: TrainingMeta {
            epoch: 0,
            seed: config.seed,
            train_snr_db: config.train_snr_db,
            antennas: config.antennas,
            users: config.users.clone(),
            ..Default::default()
        },
    };
    run(config, start, on_epoch)
}

/// Continues a resumable checkpoint up to `config.epochs`. With the same
/// config, the parameters and logs equal those of an uninterrupted run; the
/// best-validation choice only considers the epochs run by this call.
pub fn resume(config: &TrainConfig, from: &Checkpoint, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate()?;
    if from.optimizer.is_none() {
        return Err(Error::Checkpoint("checkpoint has no optimizer state to resume from".into()));
    }
    if from.params.dims.sqrt_q != config.constellation().sqrt_order()
        || from.layers != config.layers
        || from.rounds != config.rounds
    {
        return Err(Error::Checkpoint("checkpoint does not match the training configuration".into()));
    }
    run(config, from.clone(), on_epoch)
}

fn run(
    config: &TrainConfig,
    mut state: Checkpoint,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let c = config.constellation();
    let validation = config.validation_set();
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut adam = state.optimizer.take().expect("resumable state");
    let mut best_key: Option<(f64, f64)> = None;
    for epoch in state.meta.epoch + 1..=config.epochs {
        let mut total = 0.0;
        let batches = config.batches_per_epoch();
        for b in 0..batches {
            let batch = config.batch(epoch, b);
            let (loss, grads) = backward(&batch, &c, &state.params, config.layers, config.rounds).map_err(|e| {
                if e.is_numerical() && !matches!(e, Error::NonFiniteGradient(_)) {
                    Error::Diverged { epoch, loss: f64::NAN }
                } else {
                    e
                }
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss;
            adam_step(&mut state.params, &grads, &mut adam, config.learning_rate);
        }
        if !state.params.is_finite() {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        let train_loss = total / batches as f64;
        let (val_ser, val_loss) = validate(&validation, &c, &state.params, config.layers, config.rounds)?;
        let entry = EpochLog { epoch, train_loss, val_ser, val_loss };
        on_epoch(&entry);
        log.push(entry);
        state.meta.epoch = epoch;
        state.meta.loss_history.push(train_loss);
        state.meta.val_ser_history.push(val_ser);
        state.meta.val_loss_history.push(val_loss);

        let key = (val_ser, val_loss);
        if best_key.is_none_or(|b| key < b) {
            best_key = Some(key);
            best = Some(Checkpoint { optimizer: None, ..state.clone() });
        }
    }
    state.optimizer = Some(adam);
    let best = best.unwrap_or_else(|| Checkpoint { optimizer: None, ..state.clone() });
    Ok(TrainOutcome { best, last: state, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            samples_per_epoch: 16,
            batch_size: 8,
            layers: 2,
            rounds: 1,
            validation_samples: 20,
            seed: 11,
            ..TrainConfig::new(4, 2, 4)
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        for f in [
            |c: &mut TrainConfig| c.batch_size = 100,
            |c: &mut TrainConfig| c.epochs = 0,
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.users = vec![8],
            |c: &mut TrainConfig| c.order = 8,
        ] {
            let mut c = tiny();
            f(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let full = train(&tiny(), |_| {}).unwrap();
        let first = train(&TrainConfig { epochs: 1, ..tiny() }, |_| {}).unwrap();
        let resumed = resume(&tiny(), &first.last, |_| {}).unwrap();
        assert_eq!(resumed.log.len(), 1);
        assert_eq!(resumed.log[0], full.log[1]);
        assert_eq!(resumed.last, full.last);
    }

    #[test]
    fn logs_every_epoch_and_keeps_best() {
        let out = train(&tiny(), |_| {}).unwrap();
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.last.meta.loss_history.len(), 2);
        assert!(out.log.iter().all(|l| (0.0..=1.0).contains(&l.val_ser)));
        let best = out.log.iter().map(|l| (l.val_ser, l.val_loss)).reduce(|a, b| if b < a { b } else { a }).unwrap();
        let chosen = &out.log[out.best.meta.epoch - 1];
        assert_eq!((chosen.val_ser, chosen.val_loss), best);
        assert!(out.best.optimizer.is_none() && out.last.optimizer.is_some());
    }

    #[test]
    fn resume_requires_optimizer_state() {
        let out = train(&TrainConfig { epochs: 1, ..tiny() }, |_| {}).unwrap();
        assert!(resume(&tiny(), &out.best, |_| {}).is_err());
    }
}
