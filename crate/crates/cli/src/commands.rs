//! Subcommand implementations.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use ampgnn::bench::{
    parse_detectors, run_robustness_csi, run_robustness_users, run_ser_sweep, to_csv, BenchSpec, DetectorKind,
    SerPoint,
};
use ampgnn::complexity::{count_ops, OpCountSpec};
use ampgnn::train::{load_checkpoint, resume, save_checkpoint, train, EpochLog, TrainConfig};
use ampgnn::{Constellation, MpnnDims};

use crate::args::{Command, Opts};

#[derive(Debug)]
pub enum CliError {
    /// Malformed arguments or an unusable configuration.
    Usage(String),
    Core(ampgnn::Error),
}

impl From<ampgnn::Error> for CliError {
    fn from(e: ampgnn::Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}

/// `MxN`, e.g. `16x16`.
pub fn parse_mimo(s: &str) -> Result<(usize, usize)> {
    let parsed = s
        .to_ascii_lowercase()
        .split_once('x')
        .and_then(|(m, n)| Some((m.trim().parse().ok()?, n.trim().parse().ok()?)));
    match parsed {
        Some((m, n)) if m > 0 && n > 0 => Ok((m, n)),
        _ => usage(format!("invalid --mimo `{s}`, expected MxN such as 16x16")),
    }
}

/// `start:stop:step` (inclusive), a comma list, or a single value.
pub fn parse_snr(s: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Usage(format!("invalid --snr `{s}`"));
    let num = |v: &str| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad);
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if step <= 0.0 || b < a {
                return Err(bad());
            }
            let count = ((b - a) / step + 1e-9).floor() as usize + 1;
            Ok((0..count).map(|i| a + i as f64 * step).collect())
        }
        [list] => list.split(',').map(num).collect(),
        _ => Err(bad()),
    }
}

fn parse_users(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("invalid user list `{s}`"))))
        .collect()
}

fn order(opts: &Opts) -> Result<usize> {
    Ok(Constellation::from_name(&opts.modulation)?.order())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| CliError::Core(e.into()))
        }
    }
}

fn bench_spec(opts: &Opts, default_detectors: &str) -> Result<BenchSpec> {
    let (m, n) = parse_mimo(&opts.mimo)?;
    let checkpoint = opts.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let mut default = default_detectors.to_string();
    if checkpoint.is_some() && !default.contains("ampgnn") {
        default.push_str(",ampgnn");
    }
    let detectors = parse_detectors(opts.detectors.as_deref().unwrap_or(&default))?;
    Ok(BenchSpec {
        min_trials: opts.min_trials.min(opts.trials),
        max_trials: opts.trials,
        min_errors: opts.min_errors,
        seed: opts.seed,
        layers: opts.layers,
        checkpoint,
        test_users: opts.test_users,
        channel_error_var: opts.csi_error_var,
        ..BenchSpec::new(detectors, m, n, order(opts)?, parse_snr(&opts.snr)?)
    })
}

/// Path of the resumable (last-epoch) checkpoint written next to the best one.
pub fn last_path(best: &Path) -> PathBuf {
    let mut s = best.as_os_str().to_owned();
    s.push(".last");
    PathBuf::from(s)
}

fn cmd_train(opts: &Opts) -> Result<()> {
    let Some(dest) = opts.checkpoint.as_deref() else {
        return usage("train needs --checkpoint PATH for the trained parameters");
    };
    let (m, n) = parse_mimo(&opts.mimo)?;
    let users = match &opts.train_users {
        Some(list) => parse_users(list)?,
        None => vec![n],
    };
    let config = TrainConfig {
        epochs: opts.epochs,
        samples_per_epoch: opts.samples_per_epoch,
        batch_size: opts.batch_size,
        learning_rate: opts.lr,
        train_snr_db: opts.train_snr,
        users,
        layers: opts.layers,
        rounds: opts.gnn_rounds,
        seed: opts.seed,
        validation_samples: opts.validation_samples,
        ..TrainConfig::new(m, n, order(opts)?)
    };
    let progress = |log: &EpochLog| {
        eprintln!(
            "epoch {:>3}  train_loss {:.6e}  val_ser {:.4e}  val_loss {:.6e}",
            log.epoch, log.train_loss, log.val_ser, log.val_loss
        );
    };
    let outcome = match &opts.resume {
        Some(from) => resume(&config, &load_checkpoint(from)?, progress)?,
        None => train(&config, progress)?,
    };
    save_checkpoint(&outcome.best, dest)?;
    save_checkpoint(&outcome.last, last_path(dest))?;
    let mut csv = String::from("epoch,train_loss,val_ser,val_loss\n");
    for log in &outcome.log {
        csv.push_str(&format!("{},{:e},{:e},{:e}\n", log.epoch, log.train_loss, log.val_ser, log.val_loss));
    }
    emit(opts.out.as_deref(), &csv)
}

fn cmd_complexity(opts: &Opts) -> Result<()> {
    let (m, n) = parse_mimo(&opts.mimo)?;
    let c = Constellation::from_name(&opts.modulation)?;
    let spec = OpCountSpec {
        layers: opts.layers,
        rounds: opts.gnn_rounds,
        dims: MpnnDims::new(c.sqrt_order()),
        ..OpCountSpec::new(m, n, c.sqrt_order())
    };
    let r = count_ops(&spec);
    let rows: [(&str, u64, u64); 5] = [
        ("mmse", r.mmse, 0),
        ("amp", r.amp_total(), 0),
        ("oamp", r.oamp, 0),
        ("ampgnn", r.amp_setup + r.amp_linear, r.gnn_total()),
        ("lmmse-gnn", r.lmmse_gnn - r.gnn_total(), r.gnn_total()),
    ];
    let mut csv = String::from("detector,M,N,Q,layers,rounds,linear_part,gnn_part,total\n");
    for (name, lin, gnn) in rows {
        csv.push_str(&format!(
            "{name},{m},{n},{},{},{},{lin},{gnn},{}\n",
            c.order(),
            spec.layers,
            spec.rounds,
            lin + gnn
        ));
    }
    emit(opts.out.as_deref(), &csv)
}

/// Points where a detector beats exhaustive MAP by more than two combined
/// standard errors.
pub fn map_violations(points: &[SerPoint]) -> Vec<(DetectorKind, f64)> {
    let map: Vec<&SerPoint> = points.iter().filter(|p| p.detector == DetectorKind::Map).collect();
    points
        .iter()
        .filter(|p| p.detector != DetectorKind::Map)
        .filter(|p| {
            map.iter().any(|q| {
                q.snr_db == p.snr_db && q.ser - p.ser > 2.0 * (q.std_error().powi(2) + p.std_error().powi(2)).sqrt()
            })
        })
        .map(|p| (p.detector, p.snr_db))
        .collect()
}

fn cmd_oracle_check(opts: &Opts) -> Result<()> {
    let mut spec = bench_spec(opts, "map,mmse,amp,oamp")?;
    if !spec.detectors.contains(&DetectorKind::Map) {
        spec.detectors.insert(0, DetectorKind::Map);
    }
    let points = run_ser_sweep(&spec)?;
    emit(opts.out.as_deref(), &to_csv(&points))?;
    let violations = map_violations(&points);
    if violations.is_empty() {
        eprintln!("oracle-check: no detector beats exhaustive MAP beyond two standard errors");
    } else {
        for (d, snr) in &violations {
            eprintln!("oracle-check: {d} beats MAP at {snr} dB by more than two standard errors");
        }
    }
    Ok(())
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Train(o) => cmd_train(o),
        Command::Sweep(o) => {
            let points = run_ser_sweep(&bench_spec(o, "mmse,amp,oamp")?)?;
            emit(o.out.as_deref(), &to_csv(&points))
        }
        Command::RobustUsers(o) => {
            if o.test_users.is_none() {
                return usage("robust-users needs --test-users N");
            }
            let points = run_robustness_users(&bench_spec(o, "amp")?)?;
            emit(o.out.as_deref(), &to_csv(&points))
        }
        Command::RobustCsi(o) => {
            let points = run_robustness_csi(&bench_spec(o, "mmse,amp,oamp")?)?;
            emit(o.out.as_deref(), &to_csv(&points))
        }
        Command::Complexity(o) => cmd_complexity(o),
        Command::OracleCheck(o) => cmd_oracle_check(o),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_grids() {
        assert_eq!(parse_snr("0:10:2").unwrap(), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(parse_snr("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_snr("8,12").unwrap(), vec![8.0, 12.0]);
        assert_eq!(parse_snr("15").unwrap(), vec![15.0]);
        for bad in ["", "1:0:1", "0:4:0", "a", "0:1", "nan"] {
            assert!(parse_snr(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn mimo_sizes() {
        assert_eq!(parse_mimo("16x8").unwrap(), (16, 8));
        assert_eq!(parse_mimo("4X4").unwrap(), (4, 4));
        for bad in ["16", "0x4", "x", "4x-1"] {
            assert!(parse_mimo(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(ampgnn::Error::InvalidConfig("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(ampgnn::Error::NonFinite { layer: 1, quantity: "r" }).exit_code(), 3);
    }

    #[test]
    fn last_checkpoint_sits_next_to_best() {
        assert_eq!(last_path(Path::new("/tmp/m.ckpt")), PathBuf::from("/tmp/m.ckpt.last"));
    }
}
