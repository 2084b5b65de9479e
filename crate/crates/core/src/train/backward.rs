//! Reverse-mode gradients through the whole unfolded detector.
//!
//! The forward pass records every intermediate of every layer (AMP linear
//! step, GNN rounds, readout, pmf moments); the backward pass walks the
//! layers in reverse, carrying gradients for `x_hat`, `v_hat`, the Onsager
//! inputs `Z`, `V`, and the GNN carry `(u, g)` across layer boundaries.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::amp::AmpOperator;
use crate::constellation::Constellation;
use crate::detector::{moments_from_pmf, node_attributes, refine_with_prior, softmax_pmf, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::mpnn::{
    node_init, node_init_backward, readout_backward, readout_cached, round_backward, round_forward,
    MpnnParams, MpnnState, NodeAttributes, ReadoutCache, RoundCache, Tensor,
};
use crate::system::{RealSystem, Sample};

use super::loss_l2;

/// One gradient tensor per parameter tensor, same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub MpnnParams);

impl GradientSet {
    pub fn zeros_like(params: &MpnnParams) -> Self {
        Self(MpnnParams::zeros(params.dims))
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.0.tensors() {
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.0.tensors_mut() {
            *t *= factor;
        }
    }
}

struct AmpTape {
    z_prev: DVector<f64>,
    v_prev: DVector<f64>,
    v: DVector<f64>,
    z: DVector<f64>,
    inv_d: DVector<f64>,
    sigma: DVector<f64>,
    corr: DVector<f64>,
}

struct LayerTape {
    amp: AmpTape,
    rounds: Vec<RoundCache>,
    u_final: Tensor,
    readout: ReadoutCache,
    pmf: Tensor,
    mean: DVector<f64>,
    clamped: Vec<bool>,
}

struct Tape {
    layers: Vec<LayerTape>,
    x_hat: DVector<f64>,
}

fn forward_recorded(
    system: &RealSystem,
    attrs: &NodeAttributes,
    constellation: &Constellation,
    params: &MpnnParams,
    layers: usize,
    rounds: usize,
) -> Result<Tape> {
    let op = AmpOperator::new(system);
    let mut state = op.init();
    let n = system.cols();
    let mut carry: Option<MpnnState> = None;
    let mut tapes = Vec::with_capacity(layers);
    for layer in 1..=layers {
        let lin = op.linear_step(&state)?;
        let inv_d = lin.v.map(|v| 1.0 / (system.sigma2 + v));
        let e = DVector::from_fn(lin.z.len(), |m, _| (system.y[m] - lin.z[m]) * inv_d[m]);
        let corr = system.a.tr_mul(&e);

        let d = node_attributes(&lin.r, &lin.sigma);
        let mut gnn = match carry.take() {
            Some(s) => s,
            None => node_init(attrs, params),
        };
        let mut round_tapes = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let (next, cache) = round_forward(&gnn, attrs, &d, params);
            round_tapes.push(cache);
            gnn = next;
        }
        let readout = readout_cached(&gnn.u, params);
        if !readout.logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer, quantity: "GNN logits" });
        }

        let mut pmf = Tensor::zeros(constellation.sqrt_order(), n);
        let mut x_hat = DVector::zeros(n);
        let mut v_hat = DVector::zeros(n);
        let mut clamped = vec![false; n];
        for k in 0..n {
            let mut p = softmax_pmf(readout.logits.column(k).as_slice());
            refine_with_prior(&mut p, constellation);
            let (m, v) = moments_from_pmf(&p, constellation);
            x_hat[k] = m;
            clamped[k] = v < VARIANCE_FLOOR;
            v_hat[k] = v.max(VARIANCE_FLOOR);
            pmf.column_mut(k).copy_from_slice(&p);
        }

        tapes.push(LayerTape {
            amp: AmpTape {
                z_prev: state.z.clone(),
                v_prev: state.v.clone(),
                v: lin.v.clone(),
                z: lin.z.clone(),
                inv_d,
                sigma: lin.sigma.clone(),
                corr,
            },
            rounds: round_tapes,
            u_final: gnn.u.clone(),
            readout,
            pmf,
            mean: x_hat.clone(),
            clamped,
        });
        carry = Some(gnn);
        state = crate::amp::AmpState { x_hat, v_hat, z: lin.z, v: lin.v, r: lin.r, sigma: lin.sigma, layer };
    }
    Ok(Tape { layers: tapes, x_hat: state.x_hat })
}

/// Gradients with respect to the inputs of one AMP linear step.
struct AmpGrads {
    x_in: DVector<f64>,
    v_hat_in: DVector<f64>,
    z_prev: DVector<f64>,
    v_prev: DVector<f64>,
}

fn amp_linear_backward(
    op: &AmpOperator,
    tape: &AmpTape,
    g_r: &DVector<f64>,
    g_sigma: &DVector<f64>,
    g_z_out: &DVector<f64>,
    g_v_out: &DVector<f64>,
) -> AmpGrads {
    let sys = op.system;
    let s2 = sys.sigma2;
    let rows = sys.rows();

    let g_sigma_tot = DVector::from_fn(g_r.len(), |k, _| g_sigma[k] + g_r[k] * tape.corr[k]);
    let g_corr = g_r.component_mul(&tape.sigma);
    let g_e = &sys.a * &g_corr;
    let g_prec = DVector::from_fn(g_r.len(), |k, _| -g_sigma_tot[k] * tape.sigma[k] * tape.sigma[k]);
    let g_inv_d_from_prec = &op.a_sq * &g_prec;

    let mut g_z = g_z_out.clone();
    let mut g_v = g_v_out.clone();
    let mut g_w = DVector::zeros(rows);
    let mut g_z_prev = DVector::zeros(rows);
    let mut g_v_prev = DVector::zeros(rows);
    for m in 0..rows {
        let resid = sys.y[m] - tape.z[m];
        let g_inv_d = g_inv_d_from_prec[m] + g_e[m] * resid;
        g_z[m] -= g_e[m] * tape.inv_d[m];
        g_v[m] += -g_inv_d * tape.inv_d[m] * tape.inv_d[m];
        // Z = A x - V w,  w = (y - Z_prev) / (s2 + V_prev)
        let denom = s2 + tape.v_prev[m];
        let w = (sys.y[m] - tape.z_prev[m]) / denom;
        g_v[m] -= g_z[m] * w;
        g_w[m] = -g_z[m] * tape.v[m];
        g_z_prev[m] = -g_w[m] / denom;
        g_v_prev[m] = -g_w[m] * w / denom;
    }
    let mut g_x = g_r.clone();
    g_x += sys.a.tr_mul(&g_z);
    AmpGrads { x_in: g_x, v_hat_in: op.a_sq.tr_mul(&g_v), z_prev: g_z_prev, v_prev: g_v_prev }
}

/// Loss of one sample and its gradient, accumulated into `grads`.
pub fn sample_gradient(
    sample: &Sample,
    constellation: &Constellation,
    params: &MpnnParams,
    layers: usize,
    rounds: usize,
    grads: &mut GradientSet,
) -> Result<f64> {
    let system = sample.system.real();
    let attrs = NodeAttributes::from_system(system);
    let tape = forward_recorded(system, &attrs, constellation, params, layers, rounds)?;
    let loss = loss_l2(tape.x_hat.as_slice(), sample.x_true_real.as_slice());

    let op = AmpOperator::new(system);
    let n = system.cols();
    let rows = system.rows();
    let pam = constellation.pam_points();
    let g = &mut grads.0;

    let mut g_x = (&tape.x_hat - &sample.x_true_real) * 2.0;
    let mut g_v = DVector::zeros(n);
    let mut g_z = DVector::zeros(rows);
    let mut g_vv = DVector::zeros(rows);
    let mut g_u_carry = Tensor::zeros(params.dims.n_u, n);
    let mut g_g_carry = Tensor::zeros(params.dims.n_h1, n);

    for (idx, lt) in tape.layers.iter().enumerate().rev() {
        // moments and softmax
        let mut g_logits = Tensor::zeros(constellation.sqrt_order(), n);
        for k in 0..n {
            let p = lt.pmf.column(k);
            let mean = lt.mean[k];
            let gv = if lt.clamped[k] { 0.0 } else { g_v[k] };
            let gp: Vec<f64> = pam.iter().map(|&s| g_x[k] * s + gv * (s * s - 2.0 * mean * s)).collect();
            let avg: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
            for i in 0..p.len() {
                g_logits[(i, k)] = p[i] * (gp[i] - avg);
            }
        }
        g_u_carry += readout_backward(&lt.readout, &lt.u_final, &g_logits, params, g);

        let mut g_d = Tensor::zeros(2, n);
        for cache in lt.rounds.iter().rev() {
            let (gu, gg, gd) = round_backward(cache, &attrs, &g_u_carry, &g_g_carry, params, g);
            g_u_carry = gu;
            g_g_carry = gg;
            g_d += gd;
        }
        if idx == 0 {
            node_init_backward(&attrs, &g_u_carry, g);
            break;
        }

        let g_r = g_d.row(0).transpose();
        let g_sigma = g_d.row(1).transpose();
        let ag = amp_linear_backward(&op, &lt.amp, &g_r, &g_sigma, &g_z, &g_vv);
        g_x = ag.x_in;
        g_v = ag.v_hat_in;
        g_z = ag.z_prev;
        g_vv = ag.v_prev;
    }
    Ok(loss)
}

/// Mean loss over `samples` and the gradient of that mean.
///
/// Samples are processed in parallel; per-sample gradients are summed in
/// sample order so the result does not depend on scheduling.
pub fn backward(
    samples: &[Sample],
    constellation: &Constellation,
    params: &MpnnParams,
    layers: usize,
    rounds: usize,
) -> Result<(f64, GradientSet)> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let parts: Vec<Result<(f64, GradientSet)>> = samples
        .par_iter()
        .map(|s| {
            let mut gs = GradientSet::zeros_like(params);
            let loss = sample_gradient(s, constellation, params, layers, rounds, &mut gs)?;
            Ok((loss, gs))
        })
        .collect();
    let mut total = GradientSet::zeros_like(params);
    let mut loss = 0.0;
    for part in parts {
        let (l, gs) = part?;
        loss += l;
        total.0.axpy(1.0, &gs.0);
    }
    let inv = 1.0 / samples.len() as f64;
    total.scale(inv);
    total.check_finite()?;
    Ok((loss * inv, total))
}

/// Mean loss via the inference path, for finite differences and validation.
pub fn batch_loss(
    samples: &[Sample],
    constellation: &Constellation,
    params: &MpnnParams,
    layers: usize,
    rounds: usize,
) -> Result<f64> {
    let cfg = crate::detector::AmpGnnConfig {
        layers,
        rounds,
        constellation: constellation.clone(),
        params: params.clone(),
    };
    let mut total = 0.0;
    for s in samples {
        let out = crate::detector::amp_gnn_detect(s.system.real(), &cfg)?;
        total += loss_l2(out.soft.x_hat.as_slice(), s.x_true_real.as_slice());
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{amp_gnn_detect, AmpGnnConfig};
    use crate::mpnn::MpnnDims;
    use crate::system::{generate_batch, stream_rng};

    #[test]
    fn recorded_forward_matches_inference() {
        let c = Constellation::new(4).unwrap();
        let params = MpnnParams::init(MpnnDims::new(2), 2);
        let mut rng = stream_rng(1, 0, 0);
        let batch = generate_batch(3, 6, 4, &c, 12.0, &mut rng);
        let cfg = AmpGnnConfig { layers: 4, rounds: 2, constellation: c.clone(), params: params.clone() };
        for s in &batch {
            let sys = s.system.real();
            let tape = forward_recorded(sys, &NodeAttributes::from_system(sys), &c, &params, 4, 2).unwrap();
            let out = amp_gnn_detect(sys, &cfg).unwrap();
            assert_eq!(tape.x_hat, out.soft.x_hat);
        }
    }

    #[test]
    fn zeroed_readout_blocks_upstream_gradients() {
        let c = Constellation::new(4).unwrap();
        let mut params = MpnnParams::init(MpnnDims::new(2), 2);
        params.read_w3.fill(0.0);
        let mut rng = stream_rng(2, 0, 0);
        let batch = generate_batch(2, 4, 2, &c, 10.0, &mut rng);
        let (loss, g) = backward(&batch, &c, &params, 3, 1).unwrap();
        assert!(loss.is_finite());
        // logits no longer depend on anything before the last readout layer
        for (name, t) in g.0.tensors() {
            if !name.starts_with("readout.w3") && !name.starts_with("readout.b3") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(g.0.read_w3.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batch_gradient_is_mean_of_samples() {
        let c = Constellation::new(4).unwrap();
        let params = MpnnParams::init(MpnnDims::new(2), 3);
        let mut rng = stream_rng(3, 0, 0);
        let batch = generate_batch(2, 4, 2, &c, 10.0, &mut rng);
        let (loss, g) = backward(&batch, &c, &params, 2, 1).unwrap();
        let mut acc = GradientSet::zeros_like(&params);
        let mut l = 0.0;
        for s in &batch {
            l += sample_gradient(s, &c, &params, 2, 1, &mut acc).unwrap();
        }
        acc.scale(0.5);
        assert!((loss - l / 2.0).abs() < 1e-15);
        for ((_, a), (_, b)) in g.0.tensors().iter().zip(acc.0.tensors()) {
            assert!((*a - b).amax() < 1e-15);
        }
    }
}
