//! Reference detectors: the regularized linear (MMSE) detector and OAMP.

use nalgebra::{DMatrix, DVector};

use crate::amp::{denoise_pam, AwgnObservation};
use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::system::RealSystem;

/// Floor for OAMP's noise-level tracker `v2`.
pub const OAMP_V2_FLOOR: f64 = 1e-13;

/// Per-dimension prior mean and variance of the PAM alphabet.
fn prior_moments(c: &Constellation) -> (f64, f64) {
    let mean: f64 = c.pam_points().iter().zip(c.prior()).map(|(s, p)| s * p).sum();
    let var = c.pam_points().iter().zip(c.prior()).map(|(s, p)| p * (s - mean) * (s - mean)).sum();
    (mean, var)
}

/// Soft estimate with hard per-dimension decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub x_hat: DVector<f64>,
    pub decisions: Vec<usize>,
}

/// `x = mu + (A^T A + sigma2/Es I)^{-1} A^T (y - A mu)`.
///
/// For a complex system with unit-energy symbols this is the familiar
/// `(H^H H + sigma^2 I)^{-1} H^H y`.
pub fn mmse_detect(system: &RealSystem, constellation: &Constellation) -> Result<Estimate> {
    let (mu, es) = prior_moments(constellation);
    let n = system.cols();
    let mut gram = system.a.tr_mul(&system.a);
    for k in 0..n {
        gram[(k, k)] += system.sigma2 / es;
    }
    let centered = &system.y - &system.a * DVector::from_element(n, mu);
    let rhs = system.a.tr_mul(&centered);
    let chol = gram
        .cholesky()
        .ok_or(Error::NonFinite { layer: 0, quantity: "regularized Gram matrix" })?;
    let x_hat = chol.solve(&rhs).add_scalar(mu);
    if !x_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { layer: 0, quantity: "MMSE estimate" });
    }
    let decisions = constellation.slice(x_hat.as_slice());
    Ok(Estimate { x_hat, decisions })
}

/// One OAMP iteration's trackers.
#[derive(Debug, Clone, PartialEq)]
pub struct OampState {
    /// Posterior mean after this iteration.
    pub x_hat: DVector<f64>,
    /// Linear-module output fed to the denoiser.
    pub r: DVector<f64>,
    /// De-correlated LMMSE matrix `W` (`2N x 2M`).
    pub w: DMatrix<f64>,
    /// Variance of `r - x` assumed by the denoiser.
    pub tau2: f64,
    /// Error variance of the extrinsic estimate, used for the next `W`.
    pub v2: f64,
    /// `tr(I - W A)`, zero up to round-off when `W` is de-correlated.
    pub decorrelation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OampOutput {
    pub x_hat: DVector<f64>,
    pub decisions: Vec<usize>,
    pub iterations: Vec<OampState>,
}

/// Orthogonal AMP with the LMMSE linear module and a divergence-free
/// denoiser.
///
/// Per iteration, with `n = 2N` real unknowns and `m = 2M` observations:
/// `W_hat = v2 A^T (v2 A A^T + sigma2 I)^{-1}`, `W = n W_hat / tr(W_hat A)`,
/// `r = x + W (y - A x)`, `B = I - W A`,
/// `tau2 = tr(B B^T) v2 / n + tr(W W^T) sigma2 / n`. The PAM posterior on
/// `(r, tau2)` gives the mean `x_post` and average variance `v_post`; the
/// divergence-free (extrinsic) output `x = v2 (x_post / v_post - r / tau2)`
/// with `v2 = 1 / (1 / v_post - 1 / tau2)` feeds the next iteration.
/// `v2` starts at the prior variance and `x` at the prior mean; decisions
/// slice the final posterior mean.
pub fn oamp_detect(system: &RealSystem, constellation: &Constellation, iterations: usize) -> Result<OampOutput> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("OAMP needs at least one iteration".into()));
    }
    let (m, n) = (system.rows(), system.cols());
    let a = &system.a;
    let s2 = system.sigma2;
    let (mu, es) = prior_moments(constellation);
    let aat = a * a.transpose();

    let mut x_hat = DVector::from_element(n, mu);
    let mut v2 = es;
    let mut post_mean = x_hat.clone();
    let mut history = Vec::with_capacity(iterations);
    for layer in 1..=iterations {
        let mut inner = &aat * v2;
        for k in 0..m {
            inner[(k, k)] += s2;
        }
        let chol = inner
            .cholesky()
            .ok_or(Error::NonFinite { layer, quantity: "LMMSE matrix" })?;
        // W_hat^T = (v2 A A^T + s2 I)^{-1} A v2
        let w_hat = chol.solve(&(a * v2)).transpose();
        let wa_hat = &w_hat * a;
        let scale = n as f64 / wa_hat.trace();
        let w = w_hat * scale;
        let wa = wa_hat * scale;

        let resid = &system.y - a * &x_hat;
        let r = &x_hat + &w * resid;
        let b = DMatrix::<f64>::identity(n, n) - &wa;
        let decorrelation = b.trace();
        let tau2 = b.norm_squared() * v2 / n as f64 + w.norm_squared() * s2 / n as f64;
        if !(tau2.is_finite() && tau2 > 0.0) || !r.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer, quantity: "OAMP linear output" });
        }
        let post: Vec<(f64, f64)> =
            r.iter().map(|&ri| denoise_pam(AwgnObservation { r: ri, sigma: tau2 }, constellation)).collect();
        post_mean = DVector::from_fn(n, |k, _| post[k].0);
        let v_post = (post.iter().map(|p| p.1).sum::<f64>() / n as f64).max(OAMP_V2_FLOOR);
        let v_ext = 1.0 / (1.0 / v_post - 1.0 / tau2);
        if v_ext.is_finite() && v_ext > 0.0 {
            v2 = v_ext.max(OAMP_V2_FLOOR);
            x_hat = DVector::from_fn(n, |k, _| v2 * (post[k].0 / v_post - r[k] / tau2));
        } else {
            // the posterior is no tighter than the input: keep it as is
            v2 = v_post;
            x_hat = post_mean.clone();
        }
        history.push(OampState { x_hat: post_mean.clone(), r, w, tau2, v2, decorrelation });
    }
    let decisions = constellation.slice(post_mean.as_slice());
    Ok(OampOutput { x_hat: post_mean, decisions, iterations: history })
}
