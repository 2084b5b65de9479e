//! Closed-form real-multiplication counts per detected vector.
//!
//! Conventions: one complex multiply is four real multiplies, a real times a
//! complex is two; divisions, exponentials and additions are not counted.
//! AMP is counted in its complex form (the real embedding doubles every
//! dimension and would count the same products twice). The GNN is counted as
//! implemented: `2N` real-dimension nodes on a complete graph.

use crate::mpnn::MpnnDims;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpCountSpec {
    /// Receive antennas.
    pub m: usize,
    /// Users.
    pub n: usize,
    pub sqrt_q: usize,
    pub layers: usize,
    pub rounds: usize,
    pub dims: MpnnDims,
}

impl OpCountSpec {
    pub fn new(m: usize, n: usize, sqrt_q: usize) -> Self {
        Self { m, n, sqrt_q, layers: 10, rounds: 2, dims: MpnnDims::new(sqrt_q) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCountReport {
    /// `|h|^2` table, computed once.
    pub amp_setup: u64,
    /// Linear module over all layers.
    pub amp_linear: u64,
    /// Scalar denoiser over all layers (plain AMP only).
    pub amp_denoiser: u64,
    /// Gram matrix for the edge attributes plus the encoder, once.
    pub gnn_setup: u64,
    /// Per-edge work over all layers and rounds; grows as `2N (2N - 1)`.
    pub gnn_edge: u64,
    /// Per-node work (edge-MLP node parts, GRU, update) over all layers and rounds.
    pub gnn_node: u64,
    /// Readout and pmf moments over all layers.
    pub gnn_readout: u64,
    /// Regularized linear solve, once.
    pub mmse: u64,
    /// OAMP with an `M x M` LMMSE matrix per iteration.
    pub oamp: u64,
    /// LMMSE (`N x N` inverse per layer) linear module with the same GNN, as a
    /// GEPNet-style reference.
    pub lmmse_gnn: u64,
}

impl OpCountReport {
    pub fn amp_total(&self) -> u64 {
        self.amp_setup + self.amp_linear + self.amp_denoiser
    }

    pub fn gnn_total(&self) -> u64 {
        self.gnn_setup + self.gnn_edge + self.gnn_node + self.gnn_readout
    }

    pub fn amp_gnn_total(&self) -> u64 {
        self.amp_setup + self.amp_linear + self.gnn_total()
    }
}

pub fn count_ops(spec: &OpCountSpec) -> OpCountReport {
    let (m, n, q) = (spec.m as u64, spec.n as u64, spec.sqrt_q as u64);
    let t = spec.layers as u64;
    let l = spec.rounds as u64;
    let (u, h1, h2) = (spec.dims.n_u as u64, spec.dims.n_h1 as u64, spec.dims.n_h2 as u64);

    // |a|^2 v (mn), H x (4mn), Onsager (3m), |a|^2/(s2+V) (mn), H^H e (4mn),
    // e scaling (2m), Sigma * correction (2n)
    let amp_linear_layer = 10 * m * n + 5 * m + 2 * n;
    let nodes = 2 * n;
    // per real dimension: sqrt(Q) squared distances, scalings, first and
    // central second moments, plus normalization
    let denoise_layer = nodes * (5 * q + 2);

    let edges = nodes * nodes.saturating_sub(1);
    let gram = nodes * (nodes + 1) / 2 * (2 * m);
    let encoder = nodes * 3 * u;
    // gram-attribute column plus the second edge layer; the first layer's
    // node parts and the (linear) third layer are applied per node
    let edge_round = edges * (h1 + h1 * h2);
    let gru = 3 * h1 * (u + 2) + 3 * h1 * h1 + 3 * h1;
    let node_round = nodes * (2 * u * h1 + h2 * u + gru + u * h1) + h1;
    let readout_layer = nodes * (u * h1 + h1 * h2 + h2 * q + 3 * q);

    let mmse = 4 * m * n * n + 4 * n * n * n / 3 + 4 * m * n + 8 * n * n;
    let oamp_iter = 4 * m * m * m + 4 * n * m * m + 4 * n * n * m + 8 * m * n + denoise_layer;
    let lmmse_layer = 4 * n * n * n + 8 * m * n + 4 * n * n;

    let report = OpCountReport {
        amp_setup: 2 * m * n,
        amp_linear: t * amp_linear_layer,
        amp_denoiser: t * denoise_layer,
        gnn_setup: gram + encoder,
        gnn_edge: t * l * edge_round,
        gnn_node: t * l * node_round,
        gnn_readout: t * readout_layer,
        mmse,
        oamp: 4 * m * m * n + t * oamp_iter,
        lmmse_gnn: 0,
    };
    OpCountReport {
        lmmse_gnn: 4 * m * n * n + t * lmmse_layer + report.gnn_total(),
        ..report
    }
}
