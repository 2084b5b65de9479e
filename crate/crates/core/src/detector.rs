//! The unfolded AMP-GNN detector.
//!
//! Each layer runs the AMP linear module, hands `(r, Sigma)` to a posterior
//! refiner (the MPNN in production, the AMP denoiser in the wiring harness),
//! turns the refiner's logits into a pmf over the PAM alphabet, and feeds the
//! pmf's mean and variance back to the next linear step.

use nalgebra::DVector;

use crate::amp::{posterior_log_weights, AmpOperator, AmpState, AwgnObservation};
use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::mpnn::{gnn_forward, MpnnParams, MpnnState, NodeAttributes, Tensor};
use crate::system::RealSystem;

pub use crate::amp::VARIANCE_FLOOR;

#[derive(Debug, Clone, PartialEq)]
pub struct AmpGnnConfig {
    pub layers: usize,
    pub rounds: usize,
    pub constellation: Constellation,
    pub params: MpnnParams,
}

impl AmpGnnConfig {
    pub fn new(constellation: Constellation, params: MpnnParams) -> Self {
        Self { layers: 10, rounds: 2, constellation, params }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.rounds == 0 {
            return Err(Error::InvalidConfig("layers and rounds must be at least 1".into()));
        }
        if self.params.dims.sqrt_q != self.constellation.sqrt_order() {
            return Err(Error::DimensionMismatch(format!(
                "readout has {} outputs, constellation has {} amplitudes",
                self.params.dims.sqrt_q,
                self.constellation.sqrt_order()
            )));
        }
        Ok(())
    }
}

/// Produces per-node logits over the PAM alphabet from the AMP linear output.
pub trait PosteriorRefiner {
    type Carry;

    fn refine(
        &self,
        attrs: &NodeAttributes,
        r: &DVector<f64>,
        sigma: &DVector<f64>,
        carry: Option<Self::Carry>,
    ) -> Result<(Tensor, Self::Carry)>;
}

/// The trained MPNN with `rounds` message-passing rounds per layer.
pub struct MpnnRefiner<'a> {
    pub params: &'a MpnnParams,
    pub rounds: usize,
}

impl PosteriorRefiner for MpnnRefiner<'_> {
    type Carry = MpnnState;

    fn refine(
        &self,
        attrs: &NodeAttributes,
        r: &DVector<f64>,
        sigma: &DVector<f64>,
        carry: Option<MpnnState>,
    ) -> Result<(Tensor, MpnnState)> {
        gnn_forward(attrs, &node_attributes(r, sigma), carry, self.params, self.rounds)
    }
}

/// Reproduces the AMP denoiser: logits are the Gaussian log-likelihoods of
/// each PAM point. With it, the unfolded detector must track plain AMP.
pub struct AmpDenoiserStub<'a> {
    pub constellation: &'a Constellation,
}

impl PosteriorRefiner for AmpDenoiserStub<'_> {
    type Carry = ();

    fn refine(
        &self,
        _attrs: &NodeAttributes,
        r: &DVector<f64>,
        sigma: &DVector<f64>,
        _carry: Option<()>,
    ) -> Result<(Tensor, ())> {
        let k = self.constellation.sqrt_order();
        let uniform = Constellation::new(self.constellation.order())?;
        let mut logits = Tensor::zeros(k, r.len());
        for (n, mut col) in logits.column_iter_mut().enumerate() {
            // likelihood only; the prior is applied by the refinement step
            posterior_log_weights(
                AwgnObservation { r: r[n], sigma: sigma[n] },
                &uniform,
                col.as_mut_slice(),
            );
        }
        Ok((logits, ()))
    }
}

/// `d_n = [r_n, Sigma_n]` as a `2 x n` matrix.
pub fn node_attributes(r: &DVector<f64>, sigma: &DVector<f64>) -> Tensor {
    Tensor::from_fn(2, r.len(), |row, c| if row == 0 { r[c] } else { sigma[c] })
}

/// Max-subtracted softmax of one logit vector.
pub fn softmax_pmf(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Multiplies a pmf by the symbol prior and renormalizes. Identity for a
/// uniform prior.
pub fn refine_with_prior(pmf: &mut [f64], constellation: &Constellation) {
    if constellation.is_uniform() {
        return;
    }
    let mut z = 0.0;
    for (p, q) in pmf.iter_mut().zip(constellation.prior()) {
        *p *= q;
        z += *p;
    }
    for p in pmf.iter_mut() {
        *p /= z;
    }
}

/// Mean and variance of a pmf over the PAM alphabet.
pub fn moments_from_pmf(pmf: &[f64], constellation: &Constellation) -> (f64, f64) {
    let pam = constellation.pam_points();
    let mean: f64 = pmf.iter().zip(pam).map(|(p, s)| p * s).sum();
    let var: f64 = pmf.iter().zip(pam).map(|(p, s)| p * (s - mean) * (s - mean)).sum();
    (mean, var)
}

/// Soft detector output per real dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftOutput {
    /// `sqrt(Q) x 2N`, one pmf per column.
    pub pmf: Tensor,
    pub x_hat: DVector<f64>,
    pub v_hat: DVector<f64>,
}

impl SoftOutput {
    /// Per-dimension argmax of the pmf.
    pub fn decisions(&self) -> Vec<usize> {
        self.pmf
            .column_iter()
            .map(|col| {
                let mut best = 0;
                for i in 1..col.len() {
                    if col[i] > col[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AmpGnnOutput {
    pub soft: SoftOutput,
    pub decisions: Vec<usize>,
    /// AMP quantities per layer, with `x_hat`/`v_hat` taken from the refined pmf.
    pub trajectory: Vec<AmpState>,
    /// Real multiplications spent, from the closed-form operation count.
    pub multiplications: u64,
}

/// Unfolded detection with an arbitrary refiner.
pub fn run_unfolded<R: PosteriorRefiner>(
    system: &RealSystem,
    constellation: &Constellation,
    layers: usize,
    refiner: &R,
) -> Result<(SoftOutput, Vec<AmpState>)> {
    if layers == 0 {
        return Err(Error::InvalidConfig("at least one layer is required".into()));
    }
    let attrs = NodeAttributes::from_system(system);
    let op = AmpOperator::new(system);
    let mut state = op.init();
    let mut carry = None;
    let mut trajectory = Vec::with_capacity(layers);
    let n = system.cols();
    let mut pmf = Tensor::zeros(constellation.sqrt_order(), n);
    for _ in 0..layers {
        let lin = op.linear_step(&state)?;
        let layer = state.layer + 1;
        let (logits, next) = refiner.refine(&attrs, &lin.r, &lin.sigma, carry.take())?;
        carry = Some(next);
        if logits.shape() != pmf.shape() {
            return Err(Error::DimensionMismatch(format!(
                "refiner produced {:?} logits, expected {:?}",
                logits.shape(),
                pmf.shape()
            )));
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer, quantity: "GNN logits" });
        }
        let mut x_hat = DVector::zeros(n);
        let mut v_hat = DVector::zeros(n);
        for k in 0..n {
            let mut p = softmax_pmf(logits.column(k).as_slice());
            refine_with_prior(&mut p, constellation);
            let (m, v) = moments_from_pmf(&p, constellation);
            x_hat[k] = m;
            v_hat[k] = v.max(VARIANCE_FLOOR);
            pmf.column_mut(k).copy_from_slice(&p);
        }
        state = AmpState { x_hat, v_hat, z: lin.z, v: lin.v, r: lin.r, sigma: lin.sigma, layer };
        trajectory.push(state.clone());
    }
    Ok((SoftOutput { pmf, x_hat: state.x_hat, v_hat: state.v_hat }, trajectory))
}

pub fn amp_gnn_detect(system: &RealSystem, config: &AmpGnnConfig) -> Result<AmpGnnOutput> {
    config.validate()?;
    let refiner = MpnnRefiner { params: &config.params, rounds: config.rounds };
    let (soft, trajectory) = run_unfolded(system, &config.constellation, config.layers, &refiner)?;
    let ops = crate::complexity::count_ops(&crate::complexity::OpCountSpec {
        m: system.rows() / 2,
        n: system.cols() / 2,
        sqrt_q: config.constellation.sqrt_order(),
        layers: config.layers,
        rounds: config.rounds,
        dims: config.params.dims,
    });
    Ok(AmpGnnOutput {
        decisions: soft.decisions(),
        soft,
        trajectory,
        multiplications: ops.amp_gnn_total(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amp::amp_detect;
    use crate::mpnn::MpnnDims;
    use crate::system::{generate_sample, stream_rng};

    fn qpsk() -> Constellation {
        Constellation::new(4).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_pmf(&[0.3, 0.3]), vec![0.5, 0.5]);
        let p = softmax_pmf(&[0.0, 20.0]);
        let small = 1.0 / (1.0 + 20f64.exp());
        assert!((p[0] - small).abs() < 1e-22);
        assert!((p[0] - 2.06e-9).abs() < 1e-11);
        let shifted = softmax_pmf(&[1e3, 1e3 + 20.0]);
        assert!((shifted[0] - p[0]).abs() < 1e-15 && (shifted[1] - p[1]).abs() < 1e-15);
    }

    #[test]
    fn moment_examples() {
        let c = qpsk();
        let a = 0.5f64.sqrt();
        let (m, v) = moments_from_pmf(&[1.0, 0.0], &c);
        assert!((m + a).abs() < 1e-16 && v.abs() < 1e-16);
        let (m, v) = moments_from_pmf(&[0.5, 0.5], &c);
        assert!(m.abs() < 1e-16 && (v - 0.5).abs() < 1e-15);
        let (m, v) = moments_from_pmf(&[0.25, 0.75], &c);
        assert!((m - 0.5 * a).abs() < 1e-15);
        assert!((v - 0.375).abs() < 1e-15);
    }

    #[test]
    fn prior_refinement() {
        let c = qpsk().with_prior(vec![0.25, 0.75]).unwrap();
        let mut p = vec![0.5, 0.5];
        refine_with_prior(&mut p, &c);
        assert!((p[0] - 0.25).abs() < 1e-15);
        let mut q = vec![0.3, 0.7];
        refine_with_prior(&mut q, &qpsk());
        assert_eq!(q, vec![0.3, 0.7]);
    }

    #[test]
    fn stub_refiner_tracks_amp() {
        let c = Constellation::new(16).unwrap();
        let mut rng = stream_rng(3, 0, 0);
        let s = generate_sample(8, 6, &c, 18.0, &mut rng);
        let sys = s.system.real();
        let amp = amp_detect(sys, &c, 10).unwrap();
        let (_, traj) = run_unfolded(sys, &c, 10, &AmpDenoiserStub { constellation: &c }).unwrap();
        for (a, b) in amp.trajectory.iter().zip(&traj) {
            assert!((&a.r - &b.r).amax() < 1e-9);
            assert!((&a.x_hat - &b.x_hat).amax() < 1e-9);
        }
    }

    #[test]
    fn random_params_give_valid_pmfs() {
        let c = qpsk();
        let cfg = AmpGnnConfig::new(c.clone(), MpnnParams::init(MpnnDims::new(2), 4));
        let mut rng = stream_rng(5, 0, 0);
        let s = generate_sample(8, 8, &c, 15.0, &mut rng);
        let out = amp_gnn_detect(s.system.real(), &cfg).unwrap();
        assert_eq!(out.trajectory.len(), 10);
        for col in out.soft.pmf.column_iter() {
            assert!(col.iter().all(|&p| p >= 0.0));
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
        assert!(out.soft.v_hat.iter().all(|&v| v >= VARIANCE_FLOOR));
        assert!(out.multiplications > 0);
        let again = amp_gnn_detect(s.system.real(), &cfg).unwrap();
        assert_eq!(again.soft, out.soft);
    }

    #[test]
    fn one_parameter_set_serves_any_size() {
        let c = qpsk();
        let mut cfg = AmpGnnConfig::new(c.clone(), MpnnParams::init(MpnnDims::new(2), 4));
        let mut rng = stream_rng(6, 0, 0);
        for (m, n, t) in [(4, 2, 1), (16, 12, 3), (6, 6, 10)] {
            cfg.layers = t;
            let s = generate_sample(m, n, &c, 10.0, &mut rng);
            let out = amp_gnn_detect(s.system.real(), &cfg).unwrap();
            assert_eq!(out.decisions.len(), 2 * n);
        }
    }

    #[test]
    fn readout_size_must_match_constellation() {
        let cfg = AmpGnnConfig::new(Constellation::new(16).unwrap(), MpnnParams::init(MpnnDims::new(2), 1));
        assert!(cfg.validate().is_err());
    }
}
