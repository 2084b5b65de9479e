//! Command-line definition and the `key = value` config-file layer.
//!
//! Every option is shared by all subcommands so that a single config file can
//! drive a whole workflow; each subcommand reads the options it needs. Config
//! entries are spliced in front of the command-line flags, and because later
//! occurrences override earlier ones, flags win over the file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ampgnn", version, about = "AMP-GNN MIMO detection: training, SER benchmarks and complexity profiling")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train AMP-GNN parameters and write a checkpoint.
    Train(Opts),
    /// SER versus SNR for a list of detectors.
    Sweep(Opts),
    /// Evaluate a checkpoint at a user count it was not trained with.
    RobustUsers(Opts),
    /// SER when the detectors see a noisy channel estimate.
    RobustCsi(Opts),
    /// Real-multiplication counts per detected vector.
    Complexity(Opts),
    /// Compare detectors against exhaustive MAP detection on a small system.
    OracleCheck(Opts),
}

#[cfg(test)]
impl Command {
    pub fn opts(&self) -> &Opts {
        match self {
            Command::Train(o)
            | Command::Sweep(o)
            | Command::RobustUsers(o)
            | Command::RobustCsi(o)
            | Command::Complexity(o)
            | Command::OracleCheck(o) => o,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Opts {
    /// Read `key = value` defaults from this file (keys are long flag names).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// System size as receive antennas x users.
    #[arg(long, value_name = "MxN", default_value = "16x16")]
    pub mimo: String,

    /// Modulation: qpsk, 16qam or 64qam.
    #[arg(long = "mod", value_name = "NAME", default_value = "qpsk")]
    pub modulation: String,

    /// SNR grid in dB: `start:stop:step` (inclusive), a comma list, or one value.
    #[arg(long, value_name = "GRID", default_value = "0:12:2")]
    pub snr: String,

    /// AMP / OAMP iterations (AMP-GNN uses the checkpoint's depth; training uses this).
    #[arg(long, value_name = "T", default_value_t = 10)]
    pub layers: usize,

    /// GNN message-passing rounds per layer (training).
    #[arg(long, value_name = "L", default_value_t = 2)]
    pub gnn_rounds: usize,

    /// Maximum channel realizations per SNR point.
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,

    /// Minimum channel realizations per SNR point before stopping early.
    #[arg(long, default_value_t = 1000)]
    pub min_trials: usize,

    /// Symbol errors after which a point stops early.
    #[arg(long, default_value_t = 100)]
    pub min_errors: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Checkpoint to evaluate, or the destination of `train`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Write CSV here instead of standard output.
    #[arg(long, value_name = "CSV")]
    pub out: Option<PathBuf>,

    /// Comma-separated detectors: mmse, amp, oamp, map, ampgnn.
    #[arg(long, value_name = "LIST")]
    pub detectors: Option<String>,

    /// User count for `robust-users`.
    #[arg(long, value_name = "N")]
    pub test_users: Option<usize>,

    /// Entrywise variance of the channel-estimation error for `robust-csi`.
    #[arg(long, value_name = "VAR", default_value_t = 0.0)]
    pub csi_error_var: f64,

    /// Training epochs.
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,

    /// Training samples per epoch.
    #[arg(long, default_value_t = 20_000)]
    pub samples_per_epoch: usize,

    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,

    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,

    /// Training SNR in dB.
    #[arg(long, default_value_t = 20.0)]
    pub train_snr: f64,

    /// Comma-separated user counts mixed during training (default: N of --mimo).
    #[arg(long, value_name = "LIST")]
    pub train_users: Option<String>,

    /// Validation samples evaluated after every epoch.
    #[arg(long, default_value_t = 1000)]
    pub validation_samples: usize,

    /// Continue training from this resumable checkpoint.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

/// Parses `key = value` lines into `--key value` arguments. Blank lines and
/// `#` comments are ignored; `true`/`false` are not special because every
/// option takes a value.
pub fn config_args(text: &str, origin: &Path) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected `key = value`", origin.display(), i + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("{}:{}: invalid key `{}`", origin.display(), i + 1, key));
        }
        out.push(format!("--{key}"));
        out.push(value.trim().trim_matches('"').to_string());
    }
    Ok(out)
}

/// Extracts the value of `--config` from raw arguments.
fn find_config(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    let mut found = None;
    while let Some(a) = it.next() {
        if a == "--config" {
            found = it.next().cloned();
        } else if let Some(v) = a.strip_prefix("--config=") {
            found = Some(v.to_string());
        }
    }
    found
}

/// Splices config-file arguments right after the subcommand name.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = find_config(&args) else { return Ok(args) };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let extra = config_args(&text, &path)?;
    // the subcommand is the first argument after the program name that is not a flag
    let pos = args.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 2).unwrap_or(args.len());
    let mut out = args[..pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[pos..]);
    Ok(out)
}
