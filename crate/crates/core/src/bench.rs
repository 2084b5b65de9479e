//! Monte-Carlo symbol-error-rate benchmarks and their CSV output.
//!
//! Every trial draws a fresh channel, symbol vector and noise from an RNG
//! stream keyed by `(seed, SNR point, trial)`, so all detectors at a point
//! see the same transmissions. Trials run in fixed-size chunks; a point stops
//! after the first chunk that reaches both `min_trials` and `min_errors`, or
//! at `max_trials`. Output is identical for a fixed seed regardless of
//! thread count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::amp::amp_detect;
use crate::baselines::{mmse_detect, oamp_detect};
use crate::constellation::Constellation;
use crate::detector::{amp_gnn_detect, AmpGnnConfig};
use crate::error::{Error, Result};
use crate::oracle::map_detect;
use crate::system::{generate_sample, stream_rng, RealSystem, Sample};
use crate::train::Checkpoint;

/// Points with fewer errors than this are flagged as low confidence.
pub const CONFIDENT_ERRORS: usize = 100;
const CHUNK: usize = 256;
/// Extra stream offset for channel-estimation errors, so the clean draws are
/// the same with and without CSI errors.
const CSI_STREAM: u64 = 1 << 32;

pub const CSV_HEADER: &str = "detector,M,N,Q,snr_db,trials,errors,ser,seed,notes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    Mmse,
    Amp,
    Oamp,
    Map,
    AmpGnn,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 5] =
        [DetectorKind::Mmse, DetectorKind::Amp, DetectorKind::Oamp, DetectorKind::Map, DetectorKind::AmpGnn];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Mmse => "mmse",
            DetectorKind::Amp => "amp",
            DetectorKind::Oamp => "oamp",
            DetectorKind::Map => "map",
            DetectorKind::AmpGnn => "ampgnn",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        DetectorKind::ALL
            .into_iter()
            .find(|d| d.name() == key)
            .ok_or_else(|| Error::UnknownDetector(s.to_string()))
    }
}

/// Parses a comma-separated detector list.
pub fn parse_detectors(list: &str) -> Result<Vec<DetectorKind>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub detectors: Vec<DetectorKind>,
    /// Receive antennas `M`.
    pub antennas: usize,
    /// Users `N` of the sweep.
    pub users: usize,
    /// Constellation order `Q`.
    pub order: usize,
    pub snr_db: Vec<f64>,
    pub min_trials: usize,
    pub max_trials: usize,
    pub min_errors: usize,
    pub seed: u64,
    /// Iterations of AMP and OAMP; AMP-GNN uses the checkpoint's depth.
    pub layers: usize,
    pub checkpoint: Option<Checkpoint>,
    /// User count for the varying-user protocol.
    pub test_users: Option<usize>,
    /// Entrywise variance of the channel-estimation error.
    pub channel_error_var: f64,
}

impl BenchSpec {
    pub fn new(detectors: Vec<DetectorKind>, antennas: usize, users: usize, order: usize, snr_db: Vec<f64>) -> Self {
        Self {
            detectors,
            antennas,
            users,
            order,
            snr_db,
            min_trials: 1000,
            max_trials: 100_000,
            min_errors: CONFIDENT_ERRORS,
            seed: 0,
            layers: 10,
            checkpoint: None,
            test_users: None,
            channel_error_var: 0.0,
        }
    }

    fn validate(&self) -> Result<Constellation> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.snr_db.is_empty() {
            return bad("the SNR grid is empty".into());
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("SNR values must be finite".into());
        }
        if self.detectors.is_empty() {
            return bad("no detectors selected".into());
        }
        if self.antennas == 0 || self.users == 0 || self.max_trials == 0 || self.layers == 0 {
            return bad("antennas, users, trials and layers must be positive".into());
        }
        if self.min_trials > self.max_trials {
            return bad("min trials exceeds max trials".into());
        }
        if !(self.channel_error_var >= 0.0) {
            return bad("channel error variance must be non-negative".into());
        }
        let c = Constellation::new(self.order)?;
        if self.detectors.contains(&DetectorKind::AmpGnn) {
            let ckpt = self
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("the ampgnn detector needs a checkpoint".into()))?;
            if ckpt.params.dims.sqrt_q != c.sqrt_order() {
                return bad(format!(
                    "checkpoint was trained for {} amplitudes per dimension, the constellation has {}",
                    ckpt.params.dims.sqrt_q,
                    c.sqrt_order()
                ));
            }
        }
        Ok(c)
    }
}

/// One row of a SER table.
#[derive(Debug, Clone, PartialEq)]
pub struct SerPoint {
    pub detector: DetectorKind,
    pub antennas: usize,
    pub users: usize,
    pub order: usize,
    pub snr_db: f64,
    pub trials: usize,
    pub errors: usize,
    pub ser: f64,
    pub seed: u64,
    pub notes: String,
}

impl SerPoint {
    /// Transmitted complex symbols.
    pub fn symbols(&self) -> usize {
        self.trials * self.users
    }

    /// Binomial standard error of the SER estimate.
    pub fn std_error(&self) -> f64 {
        (self.ser * (1.0 - self.ser) / self.symbols() as f64).sqrt()
    }

    pub fn low_confidence(&self) -> bool {
        self.errors < CONFIDENT_ERRORS
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:e},{},{}",
            self.detector,
            self.antennas,
            self.users,
            self.order,
            self.snr_db,
            self.trials,
            self.errors,
            self.ser,
            self.seed,
            self.notes
        )
    }
}

/// Header plus one line per point.
pub fn to_csv(points: &[SerPoint]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&p.csv_row());
        out.push('\n');
    }
    out
}

/// Runs one detector on one received system; returns per-dimension PAM
/// decisions.
pub fn detect(
    kind: DetectorKind,
    system: &RealSystem,
    constellation: &Constellation,
    layers: usize,
    ampgnn: Option<&AmpGnnConfig>,
) -> Result<Vec<usize>> {
    Ok(match kind {
        DetectorKind::Mmse => mmse_detect(system, constellation)?.decisions,
        DetectorKind::Amp => amp_detect(system, constellation, layers)?.decisions,
        DetectorKind::Oamp => oamp_detect(system, constellation, layers)?.decisions,
        DetectorKind::Map => map_detect(system, constellation)?,
        DetectorKind::AmpGnn => {
            let cfg = ampgnn.ok_or_else(|| Error::InvalidConfig("the ampgnn detector needs a checkpoint".into()))?;
            amp_gnn_detect(system, cfg)?.decisions
        }
    })
}

struct Protocol<'a> {
    spec: &'a BenchSpec,
    constellation: Constellation,
    users: usize,
    ampgnn: Option<AmpGnnConfig>,
    notes: String,
}

impl Protocol<'_> {
    fn trial(&self, point: usize, snr: f64, trial: usize) -> (Sample, Option<RealSystem>) {
        let spec = self.spec;
        let mut rng = stream_rng(spec.seed, point as u64, trial as u64);
        let sample = generate_sample(spec.antennas, self.users, &self.constellation, snr, &mut rng);
        let seen = (spec.channel_error_var > 0.0).then(|| {
            let mut err_rng = stream_rng(spec.seed, CSI_STREAM + point as u64, trial as u64);
            sample.system.with_channel_error(spec.channel_error_var, &mut err_rng).real().clone()
        });
        (sample, seen)
    }

    fn point(&self, kind: DetectorKind, point: usize, snr: f64) -> Result<SerPoint> {
        let spec = self.spec;
        let (mut trials, mut errors) = (0usize, 0usize);
        while trials < spec.max_trials {
            let end = (trials + CHUNK).min(spec.max_trials);
            let counts: Vec<Result<usize>> = (trials..end)
                .into_par_iter()
                .map(|t| {
                    let (sample, seen) = self.trial(point, snr, t);
                    let system = seen.as_ref().unwrap_or_else(|| sample.system.real());
                    let dec = detect(kind, system, &self.constellation, spec.layers, self.ampgnn.as_ref())?;
                    Ok(sample.symbol_errors(&dec))
                })
                .collect();
            for c in counts {
                errors += c?;
            }
            trials = end;
            if trials >= spec.min_trials && errors >= spec.min_errors {
                break;
            }
        }
        let ser = errors as f64 / (trials * self.users) as f64;
        let mut notes = self.notes.clone();
        if errors < CONFIDENT_ERRORS {
            if !notes.is_empty() {
                notes.push(' ');
            }
            notes.push_str("low-confidence");
        }
        Ok(SerPoint {
            detector: kind,
            antennas: spec.antennas,
            users: self.users,
            order: spec.order,
            snr_db: snr,
            trials,
            errors,
            ser,
            seed: spec.seed,
            notes,
        })
    }

    fn run(&self) -> Result<Vec<SerPoint>> {
        let mut out = Vec::new();
        for &kind in &self.spec.detectors {
            for (i, &snr) in self.spec.snr_db.iter().enumerate() {
                out.push(self.point(kind, i, snr)?);
            }
        }
        Ok(out)
    }
}

fn protocol(spec: &BenchSpec, users: usize, notes: String) -> Result<Protocol<'_>> {
    let constellation = spec.validate()?;
    let ampgnn = spec.checkpoint.as_ref().map(|ck| AmpGnnConfig {
        layers: ck.layers,
        rounds: ck.rounds,
        constellation: constellation.clone(),
        params: ck.params.clone(),
    });
    Ok(Protocol { spec, constellation, users, ampgnn, notes })
}

/// SER of every listed detector at every SNR of the grid.
pub fn run_ser_sweep(spec: &BenchSpec) -> Result<Vec<SerPoint>> {
    if spec.users > spec.antennas {
        return Err(Error::InvalidConfig(format!(
            "{} users exceed {} antennas; overloaded systems are not supported",
            spec.users, spec.antennas
        )));
    }
    protocol(spec, spec.users, String::new())?.run()
}

/// Evaluates a checkpoint at a user count it was not trained with, next to
/// the other listed detectors at the same user count.
pub fn run_robustness_users(spec: &BenchSpec) -> Result<Vec<SerPoint>> {
    let test_n = spec.test_users.ok_or_else(|| Error::InvalidConfig("test user count is required".into()))?;
    if test_n == 0 || test_n > spec.antennas {
        return Err(Error::InvalidConfig(format!(
            "test user count {test_n} must be between 1 and the {} antennas",
            spec.antennas
        )));
    }
    let ckpt = spec
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("the varying-user protocol needs a checkpoint".into()))?;
    if ckpt.meta.users.contains(&test_n) {
        return Err(Error::InvalidConfig(format!("the checkpoint was trained with {test_n} users")));
    }
    let trained: Vec<String> = ckpt.meta.users.iter().map(|n| n.to_string()).collect();
    protocol(spec, test_n, format!("trained_users={}", trained.join("+")))?.run()
}

/// Detectors see `H + E`, `E ~ CN(0, channel_error_var)`, while the data
/// goes through the true `H`.
pub fn run_robustness_csi(spec: &BenchSpec) -> Result<Vec<SerPoint>> {
    if spec.users > spec.antennas {
        return Err(Error::InvalidConfig("more users than antennas is not supported".into()));
    }
    let notes = if spec.channel_error_var > 0.0 { format!("csi_error_var={}", spec.channel_error_var) } else { String::new() };
    protocol(spec, spec.users, notes)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(detectors: Vec<DetectorKind>, snr: Vec<f64>) -> BenchSpec {
        BenchSpec { min_trials: 200, max_trials: 400, min_errors: 50, seed: 3, ..BenchSpec::new(detectors, 4, 4, 4, snr) }
    }

    #[test]
    fn detector_names_round_trip() {
        for d in DetectorKind::ALL {
            assert_eq!(d.name().parse::<DetectorKind>().unwrap(), d);
        }
        assert_eq!("AMP-GNN".parse::<DetectorKind>().unwrap(), DetectorKind::AmpGnn);
        assert!(matches!("zf".parse::<DetectorKind>(), Err(Error::UnknownDetector(_))));
        assert_eq!(parse_detectors("mmse, amp").unwrap(), vec![DetectorKind::Mmse, DetectorKind::Amp]);
    }

    #[test]
    fn noiseless_mmse_is_error_free() {
        let pts = run_ser_sweep(&quick(vec![DetectorKind::Mmse], vec![60.0])).unwrap();
        assert_eq!(pts[0].errors, 0);
        assert_eq!(pts[0].trials, 400);
        assert!(pts[0].low_confidence());
        assert!(pts[0].notes.contains("low-confidence"));
    }

    #[test]
    fn deterministic_csv() {
        let spec = quick(vec![DetectorKind::Mmse, DetectorKind::Oamp], vec![0.0, 10.0]);
        let a = to_csv(&run_ser_sweep(&spec).unwrap());
        let b = to_csv(&run_ser_sweep(&spec).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with(CSV_HEADER));
        assert_eq!(a.lines().count(), 5);
    }

    #[test]
    fn early_stop_once_errors_reached() {
        let pts = run_ser_sweep(&quick(vec![DetectorKind::Mmse], vec![-5.0])).unwrap();
        assert_eq!(pts[0].trials, 256);
        assert!(pts[0].errors >= 50);
    }

    #[test]
    fn ampgnn_requires_checkpoint() {
        let err = run_ser_sweep(&quick(vec![DetectorKind::AmpGnn], vec![10.0])).unwrap_err();
        assert!(err.to_string().contains("checkpoint"));
        let empty = quick(vec![DetectorKind::Amp], vec![]);
        assert!(run_ser_sweep(&empty).is_err());
    }

    #[test]
    fn zero_csi_error_matches_clean_sweep() {
        let spec = quick(vec![DetectorKind::Amp], vec![8.0]);
        let clean = run_ser_sweep(&spec).unwrap();
        let csi = run_robustness_csi(&BenchSpec { channel_error_var: 0.0, ..spec.clone() }).unwrap();
        assert_eq!(clean, csi);
        let noisy = run_robustness_csi(&BenchSpec { channel_error_var: 0.5, ..spec }).unwrap();
        assert!(noisy[0].ser > clean[0].ser);
        assert!(noisy[0].notes.contains("csi_error_var=0.5"));
    }

    #[test]
    fn overloaded_test_users_rejected() {
        let mut spec = quick(vec![DetectorKind::Amp], vec![8.0]);
        spec.test_users = Some(5);
        let err = run_robustness_users(&spec).unwrap_err();
        assert!(err.to_string().contains("antennas"), "{err}");
    }
}
