//! Approximate message passing on the real-embedded system, with the
//! discrete-prior scalar denoiser.

use nalgebra::{DMatrix, DVector};

use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::system::{LinearSystem, RealSystem, C64};

/// Floor applied to the posterior variances fed back to the linear step, so
/// that a one-hot posterior does not make `sigma^2 + V` collapse. Shared by
/// plain AMP and AMP-GNN.
pub const VARIANCE_FLOOR: f64 = 1e-13;

/// Equivalent scalar AWGN observation `r = x + w`, `w ~ N(0, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AwgnObservation {
    pub r: f64,
    pub sigma: f64,
}

/// Unnormalized log posterior of every PAM point given `obs`:
/// `-(s - r)^2 / (2 sigma) + ln p(s)`.
pub fn posterior_log_weights(obs: AwgnObservation, constellation: &Constellation, out: &mut [f64]) {
    let inv = 0.5 / obs.sigma;
    for ((w, &s), &p) in out.iter_mut().zip(constellation.pam_points()).zip(constellation.prior()) {
        let d = s - obs.r;
        *w = -d * d * inv + p.ln();
    }
}

/// Posterior mean and variance of a PAM symbol seen through `obs`.
pub fn denoise_pam(obs: AwgnObservation, constellation: &Constellation) -> (f64, f64) {
    let mut logw = [0.0; 8];
    let k = constellation.sqrt_order();
    posterior_log_weights(obs, constellation, &mut logw[..k]);
    let max = logw[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for w in logw[..k].iter_mut() {
        *w = (*w - max).exp();
        z += *w;
    }
    for w in logw[..k].iter_mut() {
        *w /= z;
    }
    let pam = constellation.pam_points();
    let mean: f64 = logw[..k].iter().zip(pam).map(|(p, s)| p * s).sum();
    // central second moment; E[s^2] - mean^2 loses everything near one-hot
    let var: f64 = logw[..k].iter().zip(pam).map(|(p, s)| p * (s - mean) * (s - mean)).sum();
    (mean, var)
}

/// AMP quantities after a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpState {
    /// Posterior means fed to the next layer.
    pub x_hat: DVector<f64>,
    /// Posterior variances fed to the next layer.
    pub v_hat: DVector<f64>,
    /// Onsager-corrected estimate of `Ax`.
    pub z: DVector<f64>,
    /// Variance of `Ax`.
    pub v: DVector<f64>,
    /// Equivalent AWGN observations of this layer.
    pub r: DVector<f64>,
    /// Equivalent noise variances of this layer.
    pub sigma: DVector<f64>,
    pub layer: usize,
}

/// Output of the AMP linear module.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOutput {
    pub r: DVector<f64>,
    pub sigma: DVector<f64>,
    pub z: DVector<f64>,
    pub v: DVector<f64>,
}

/// `A` with its entrywise square, built once per detection.
#[derive(Debug, Clone)]
pub struct AmpOperator<'a> {
    pub system: &'a RealSystem,
    pub a_sq: DMatrix<f64>,
}

impl<'a> AmpOperator<'a> {
    pub fn new(system: &'a RealSystem) -> Self {
        Self { a_sq: system.a.map(|v| v * v), system }
    }

    pub fn init(&self) -> AmpState {
        let (m, n) = (self.system.rows(), self.system.cols());
        // N/M per complex user, split evenly over its two real dimensions
        let v_hat = DVector::from_element(n, n as f64 / (2.0 * m as f64));
        let v = &self.a_sq * &v_hat;
        AmpState {
            x_hat: DVector::zeros(n),
            z: self.system.y.clone(),
            v,
            v_hat,
            r: DVector::zeros(n),
            sigma: DVector::from_element(n, f64::INFINITY),
            layer: 0,
        }
    }

    /// Linear module: `V`, Onsager-corrected `Z`, `Sigma`, `r`.
    pub fn linear_step(&self, state: &AmpState) -> Result<LinearOutput> {
        let sys = self.system;
        let s2 = sys.sigma2;
        let v = &self.a_sq * &state.v_hat;
        let ax = &sys.a * &state.x_hat;
        let z = DVector::from_fn(v.len(), |m, _| {
            ax[m] - v[m] * (sys.y[m] - state.z[m]) / (s2 + state.v[m])
        });
        let inv_d = v.map(|vm| 1.0 / (s2 + vm));
        let e = DVector::from_fn(v.len(), |m, _| (sys.y[m] - z[m]) * inv_d[m]);
        let prec = self.a_sq.tr_mul(&inv_d);
        let corr = sys.a.tr_mul(&e);
        let sigma = prec.map(|p| 1.0 / p);
        let r = DVector::from_fn(sigma.len(), |k, _| state.x_hat[k] + sigma[k] * corr[k]);
        let layer = state.layer + 1;
        if !z.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { layer, quantity: "Z" });
        }
        if !sigma.iter().all(|x| x.is_finite() && *x > 0.0) {
            return Err(Error::NonFinite { layer, quantity: "Sigma" });
        }
        if !r.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { layer, quantity: "r" });
        }
        Ok(LinearOutput { r, sigma, z, v })
    }
}

pub fn amp_init(system: &RealSystem) -> AmpState {
    AmpOperator::new(system).init()
}

pub fn amp_linear_step(state: &AmpState, system: &RealSystem) -> Result<LinearOutput> {
    AmpOperator::new(system).linear_step(state)
}

#[derive(Debug, Clone)]
pub struct AmpOutput {
    pub x_hat: DVector<f64>,
    pub v_hat: DVector<f64>,
    /// Per-dimension PAM decisions.
    pub decisions: Vec<usize>,
    /// One entry per layer.
    pub trajectory: Vec<AmpState>,
}

pub fn amp_detect(
    system: &RealSystem,
    constellation: &Constellation,
    layers: usize,
) -> Result<AmpOutput> {
    if layers == 0 {
        return Err(Error::InvalidConfig("AMP needs at least one layer".into()));
    }
    let op = AmpOperator::new(system);
    let mut state = op.init();
    let mut trajectory = Vec::with_capacity(layers);
    for _ in 0..layers {
        let lin = op.linear_step(&state)?;
        let mut x_hat = DVector::zeros(lin.r.len());
        let mut v_hat = DVector::zeros(lin.r.len());
        for k in 0..lin.r.len() {
            let (m, v) = denoise_pam(AwgnObservation { r: lin.r[k], sigma: lin.sigma[k] }, constellation);
            x_hat[k] = m;
            v_hat[k] = v.max(VARIANCE_FLOOR);
        }
        state = AmpState {
            x_hat,
            v_hat,
            z: lin.z,
            v: lin.v,
            r: lin.r,
            sigma: lin.sigma,
            layer: state.layer + 1,
        };
        trajectory.push(state.clone());
    }
    Ok(AmpOutput {
        decisions: constellation.slice(state.x_hat.as_slice()),
        x_hat: state.x_hat,
        v_hat: state.v_hat,
        trajectory,
    })
}

/// One layer of complex-domain AMP, for cross-checking the real path.
#[derive(Debug, Clone)]
pub struct ComplexAmpLayer {
    pub r: DVector<C64>,
    pub sigma: DVector<f64>,
    pub x_hat: DVector<C64>,
    pub v_hat: DVector<f64>,
}

/// AMP run directly on the complex system, with the complex Gaussian
/// denoiser summed over all `Q` constellation points.
pub fn complex_amp_detect(
    system: &LinearSystem,
    constellation: &Constellation,
    layers: usize,
) -> Result<Vec<ComplexAmpLayer>> {
    let h = &system.h;
    let (m, n) = h.shape();
    let s2 = system.sigma2;
    let h_sq = h.map(|v| v.norm_sqr());
    let mut x_hat = DVector::<C64>::zeros(n);
    let mut v_hat = DVector::from_element(n, n as f64 / m as f64);
    let mut z = system.y.clone();
    let mut v_prev = &h_sq * &v_hat;
    let mut out = Vec::with_capacity(layers);
    for t in 1..=layers {
        let v = &h_sq * &v_hat;
        let hx = h * &x_hat;
        let z_new = DVector::from_fn(m, |i, _| {
            hx[i] - (system.y[i] - z[i]) * (v[i] / (s2 + v_prev[i]))
        });
        let inv_d = v.map(|vm| 1.0 / (s2 + vm));
        let e = DVector::from_fn(m, |i, _| (system.y[i] - z_new[i]) * inv_d[i]);
        let sigma = h_sq.tr_mul(&inv_d).map(|p| 1.0 / p);
        let corr = h.ad_mul(&e);
        let r = DVector::from_fn(n, |k, _| x_hat[k] + corr[k] * sigma[k]);
        if !sigma.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::NonFinite { layer: t, quantity: "Sigma" });
        }
        for k in 0..n {
            let logw: Vec<f64> = constellation
                .complex_points()
                .iter()
                .map(|s| -(s - r[k]).norm_sqr() / sigma[k])
                .collect();
            let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mut zsum, mut m1, mut m2) = (0.0, C64::new(0.0, 0.0), 0.0);
            for (lw, s) in logw.iter().zip(constellation.complex_points()) {
                let w = (lw - max).exp();
                zsum += w;
                m1 += s * w;
                m2 += s.norm_sqr() * w;
            }
            x_hat[k] = m1 / zsum;
            v_hat[k] = (m2 / zsum - x_hat[k].norm_sqr()).max(0.0);
        }
        z = z_new;
        v_prev = v;
        out.push(ComplexAmpLayer { r, sigma, x_hat: x_hat.clone(), v_hat: v_hat.clone() });
    }
    Ok(out)
}
