//! Self-describing checkpoint archive.
//!
//! A checkpoint is an ASCII header terminated by the line `end`, followed by
//! the raw tensor data. The header lists the format version, the
//! hyperparameters, training metadata and a tensor directory
//! (`tensor <name> <rows> <cols> <byte offset>`); the data section is every
//! tensor in directory order, row-major, as little-endian `f64`. The
//! README documents the layout in full.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mpnn::{MpnnDims, MpnnParams, Tensor, TENSOR_NAMES};

use super::AdamState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "ampgnn-checkpoint";

/// Where a set of parameters came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    /// Last completed epoch (0 for untrained parameters).
    pub epoch: usize,
    pub seed: u64,
    pub train_snr_db: f64,
    pub antennas: usize,
    /// User counts seen in training.
    pub users: Vec<usize>,
    pub loss_history: Vec<f64>,
    pub val_ser_history: Vec<f64>,
    pub val_loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: usize,
    pub rounds: usize,
    pub params: MpnnParams,
    pub meta: TrainingMeta,
    /// Present in resumable checkpoints.
    pub optimizer: Option<AdamState>,
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    // Debug formatting of f64 is shortest-round-trip with exponents for
    // extreme magnitudes, so values survive the text header exactly.
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params.dims;
        let mut sections: Vec<(String, &Tensor)> =
            self.params.tensors().iter().map(|(n, t)| (n.to_string(), *t)).collect();
        let mut h = String::new();
        let m = &self.meta;
        writeln!(h, "{MAGIC}").unwrap();
        writeln!(h, "version {CHECKPOINT_VERSION}").unwrap();
        writeln!(h, "n_u {}\nn_h1 {}\nn_h2 {}\nsqrt_q {}", dims.n_u, dims.n_h1, dims.n_h2, dims.sqrt_q).unwrap();
        writeln!(h, "layers {}\nrounds {}", self.layers, self.rounds).unwrap();
        writeln!(h, "epoch {}\nseed {}\ntrain_snr_db {:?}", m.epoch, m.seed, m.train_snr_db).unwrap();
        writeln!(h, "antennas {}\nusers {}", m.antennas, join(&m.users)).unwrap();
        writeln!(h, "loss_history {}", join(&m.loss_history)).unwrap();
        writeln!(h, "val_ser_history {}", join(&m.val_ser_history)).unwrap();
        writeln!(h, "val_loss_history {}", join(&m.val_loss_history)).unwrap();
        match &self.optimizer {
            None => writeln!(h, "optimizer none").unwrap(),
            Some(a) => {
                writeln!(h, "optimizer adam {} {:?} {:?} {:?}", a.step, a.beta1, a.beta2, a.eps).unwrap();
                for (prefix, set) in [("adam.m.", &a.m), ("adam.v.", &a.v)] {
                    sections.extend(set.tensors().iter().map(|(n, t)| (format!("{prefix}{n}"), *t)));
                }
            }
        }
        let mut offset = 0usize;
        for (name, t) in &sections {
            writeln!(h, "tensor {name} {} {} {offset}", t.nrows(), t.ncols()).unwrap();
            offset += t.len() * 8;
        }
        writeln!(h, "data_bytes {offset}\nend").unwrap();

        let mut out = h.into_bytes();
        out.reserve(offset);
        for (_, t) in &sections {
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    out.extend_from_slice(&t[(r, c)].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let end = find_header_end(bytes).ok_or_else(|| bad("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let data = &bytes[end..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut fields = Header::default();
        for line in lines {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let rest: Vec<&str> = parts.collect();
            match key {
                "tensor" => fields.tensors.push(parse_tensor_entry(&rest)?),
                "end" => break,
                _ => {
                    fields.values.insert(key.to_string(), rest.into_iter().map(String::from).collect());
                }
            }
        }
        let version: u32 = fields.scalar("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let dims = MpnnDims {
            n_u: fields.scalar("n_u")?,
            n_h1: fields.scalar("n_h1")?,
            n_h2: fields.scalar("n_h2")?,
            sqrt_q: fields.scalar("sqrt_q")?,
        };
        let data_bytes: usize = fields.scalar("data_bytes")?;
        if data.len() != data_bytes {
            return Err(bad(format!("expected {data_bytes} data bytes, found {}", data.len())));
        }
        let meta = TrainingMeta {
            epoch: fields.scalar("epoch")?,
            seed: fields.scalar("seed")?,
            train_snr_db: fields.scalar("train_snr_db")?,
            antennas: fields.scalar("antennas")?,
            users: fields.list("users")?,
            loss_history: fields.list("loss_history")?,
            val_ser_history: fields.list("val_ser_history")?,
            val_loss_history: fields.list("val_loss_history")?,
        };

        let mut entries = fields.tensors.iter();
        let mut offset = 0usize;
        let mut read_set = |prefix: &str| -> Result<MpnnParams> {
            let mut p = MpnnParams::zeros(dims);
            for (name, t) in p.tensors_mut() {
                let (ename, rows, cols, off) =
                    entries.next().ok_or_else(|| bad(format!("tensor `{prefix}{name}` missing")))?;
                if *ename != format!("{prefix}{name}") {
                    return Err(bad(format!("expected tensor `{prefix}{name}`, found `{ename}`")));
                }
                if (*rows, *cols) != t.shape() {
                    return Err(bad(format!(
                        "tensor `{ename}` has shape {rows}x{cols}, expected {}x{}",
                        t.nrows(),
                        t.ncols()
                    )));
                }
                if *off != offset || off + rows * cols * 8 > data.len() {
                    return Err(bad(format!("tensor `{ename}` has an invalid offset")));
                }
                for r in 0..*rows {
                    for c in 0..*cols {
                        let at = offset + (r * cols + c) * 8;
                        t[(r, c)] = f64::from_le_bytes(data[at..at + 8].try_into().unwrap());
                    }
                }
                offset += rows * cols * 8;
            }
            Ok(p)
        };
        let params = read_set("")?;
        let opt = fields.values.get("optimizer").cloned().unwrap_or_default();
        let optimizer = match opt.first().map(String::as_str) {
            Some("none") => None,
            Some("adam") if opt.len() == 5 => {
                let num = |i: usize| opt[i].parse::<f64>().map_err(|_| bad("malformed optimizer line".into()));
                let step = opt[1].parse::<u64>().map_err(|_| bad("malformed optimizer line".into()))?;
                let (beta1, beta2, eps) = (num(2)?, num(3)?, num(4)?);
                let m = read_set("adam.m.")?;
                let v = read_set("adam.v.")?;
                Some(AdamState { m, v, step, beta1, beta2, eps })
            }
            _ => return Err(bad("malformed optimizer line".into())),
        };
        if offset != data_bytes || entries.next().is_some() {
            return Err(bad("tensor directory does not cover the data section".into()));
        }
        let ckpt = Checkpoint { layers: fields.scalar("layers")?, rounds: fields.scalar("rounds")?, params, meta, optimizer };
        if ckpt.layers == 0 || ckpt.rounds == 0 {
            return Err(bad("layers and rounds must be positive".into()));
        }
        Ok(ckpt)
    }
}

#[derive(Default)]
struct Header {
    values: std::collections::HashMap<String, Vec<String>>,
    tensors: Vec<(String, usize, usize, usize)>,
}

impl Header {
    fn scalar<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        match self.values.get(key).map(Vec::as_slice) {
            Some([v]) => v.parse().map_err(|_| Error::Checkpoint(format!("malformed `{key}`"))),
            _ => Err(Error::Checkpoint(format!("missing or malformed `{key}`"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let vals = self.values.get(key).ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
        vals.iter()
            .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("malformed `{key}`"))))
            .collect()
    }
}

fn parse_tensor_entry(rest: &[&str]) -> Result<(String, usize, usize, usize)> {
    let err = || Error::Checkpoint(format!("malformed tensor entry `{}`", rest.join(" ")));
    if rest.len() != 4 {
        return Err(err());
    }
    let n = |s: &str| s.parse::<usize>().map_err(|_| err());
    Ok((rest[0].to_string(), n(rest[1])?, n(rest[2])?, n(rest[3])?))
}

/// Byte index just past the `end\n` line.
fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let marker = b"\nend\n";
    bytes.windows(marker.len()).position(|w| w == marker).map(|p| p + marker.len())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

// Keep the directory names in sync with the parameter struct.
const _: () = assert!(TENSOR_NAMES.len() == 20);
