//! Central finite differences of the batch loss, the reference the
//! reverse-mode gradients are checked against.

use crate::constellation::Constellation;
use crate::error::Result;
use crate::mpnn::MpnnParams;
use crate::system::Sample;

use super::{batch_loss, GradientSet};

/// `(L(p + h e_i) - L(p - h e_i)) / 2h` for every scalar parameter.
pub fn finite_difference(
    samples: &[Sample],
    constellation: &Constellation,
    params: &MpnnParams,
    layers: usize,
    rounds: usize,
    step: f64,
) -> Result<GradientSet> {
    let mut out = GradientSet::zeros_like(params);
    let mut probe = params.clone();
    for t in 0..out.0.tensors().len() {
        let len = out.0.tensors()[t].1.len();
        for i in 0..len {
            let orig = params.tensors()[t].1[i];
            probe.tensors_mut()[t].1[i] = orig + step;
            let plus = batch_loss(samples, constellation, &probe, layers, rounds)?;
            probe.tensors_mut()[t].1[i] = orig - step;
            let minus = batch_loss(samples, constellation, &probe, layers, rounds)?;
            probe.tensors_mut()[t].1[i] = orig;
            out.0.tensors_mut()[t].1[i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

/// Per tensor, the largest elementwise `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries whose true gradient is (numerically) zero from
/// dividing finite-difference round-off by zero.
pub fn max_relative_errors(a: &GradientSet, b: &GradientSet, floor: f64) -> Vec<(&'static str, f64)> {
    a.0.tensors()
        .iter()
        .zip(b.0.tensors())
        .map(|((name, x), (_, y))| {
            let worst = x
                .iter()
                .zip(y.iter())
                .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
                .fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}
