//! Message-passing GNN over the complete graph of real dimensions.
//!
//! Node `n` carries a hidden vector `u_n` and a GRU state `g_n`. Each round an
//! edge MLP turns `[u_n, u_j, f_jn]` into the message `m_jn` (sender `j`,
//! receiver `n`), messages are summed per receiver in ascending sender order,
//! concatenated with the node attribute `d_n = [r_n, Sigma_n]`, and fed to a
//! GRU whose state is projected back to `u_n`. A readout MLP maps `u_n` to
//! logits over the PAM alphabet.
//!
//! Matrices are stored feature-major: column `k` of a `features x nodes`
//! matrix belongs to node `k`. Directed edges are indexed receiver-major,
//! see [`edge_index`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::system::RealSystem;

pub type Tensor = DMatrix<f64>;

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpnnDims {
    /// Hidden vector size `N_u`.
    pub n_u: usize,
    /// First hidden width `N_h1`, also the GRU state size.
    pub n_h1: usize,
    /// Second hidden width `N_h2`.
    pub n_h2: usize,
    /// Readout size, `sqrt(Q)`.
    pub sqrt_q: usize,
}

impl MpnnDims {
    pub fn new(sqrt_q: usize) -> Self {
        Self { n_u: 8, n_h1: 16, n_h2: 8, sqrt_q }
    }

    pub fn gru_input(&self) -> usize {
        self.n_u + 2
    }

    /// Closed-form count of learnable scalars.
    pub fn param_count(&self) -> usize {
        let (u, h1, h2, q) = (self.n_u, self.n_h1, self.n_h2, self.sqrt_q);
        let encoder = 3 * u + u;
        let edge = (2 * u + 2) * h1 + h1 + h1 * h2 + h2 + h2 * u + u;
        let gru = 3 * h1 * (u + 2) + 3 * h1 * h1 + 6 * h1;
        let update = u * h1 + u;
        let readout = u * h1 + h1 + h1 * h2 + h2 + h2 * q + q;
        encoder + edge + gru + update + readout
    }
}

/// Every learnable tensor. One instance is shared by all unfolded layers and
/// has no dependence on the number of users or antennas.
#[derive(Debug, Clone, PartialEq)]
pub struct MpnnParams {
    pub dims: MpnnDims,
    /// Encoder `W1` (`N_u x 3`), `b1`.
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    /// Edge MLP `(2 N_u + 2) -> N_h1 -> N_h2 -> N_u`.
    pub edge_w1: Tensor,
    pub edge_b1: Tensor,
    pub edge_w2: Tensor,
    pub edge_b2: Tensor,
    pub edge_w3: Tensor,
    pub edge_b3: Tensor,
    /// GRU, gate blocks stacked `[reset; update; candidate]`.
    pub gru_w_ih: Tensor,
    pub gru_w_hh: Tensor,
    pub gru_b_ih: Tensor,
    pub gru_b_hh: Tensor,
    /// `W2`, `b2`: GRU state to hidden vector.
    pub upd_w: Tensor,
    pub upd_b: Tensor,
    /// Readout MLP `N_u -> N_h1 -> N_h2 -> sqrt(Q)`.
    pub read_w1: Tensor,
    pub read_b1: Tensor,
    pub read_w2: Tensor,
    pub read_b2: Tensor,
    pub read_w3: Tensor,
    pub read_b3: Tensor,
}

pub const TENSOR_NAMES: [&str; 20] = [
    "encoder.w",
    "encoder.b",
    "edge.w1",
    "edge.b1",
    "edge.w2",
    "edge.b2",
    "edge.w3",
    "edge.b3",
    "gru.w_ih",
    "gru.w_hh",
    "gru.b_ih",
    "gru.b_hh",
    "update.w",
    "update.b",
    "readout.w1",
    "readout.b1",
    "readout.w2",
    "readout.b2",
    "readout.w3",
    "readout.b3",
];

impl MpnnParams {
    pub fn zeros(dims: MpnnDims) -> Self {
        let (u, h1, h2, q) = (dims.n_u, dims.n_h1, dims.n_h2, dims.sqrt_q);
        let z = Tensor::zeros;
        Self {
            dims,
            enc_w: z(u, 3),
            enc_b: z(u, 1),
            edge_w1: z(h1, 2 * u + 2),
            edge_b1: z(h1, 1),
            edge_w2: z(h2, h1),
            edge_b2: z(h2, 1),
            edge_w3: z(u, h2),
            edge_b3: z(u, 1),
            gru_w_ih: z(3 * h1, u + 2),
            gru_w_hh: z(3 * h1, h1),
            gru_b_ih: z(3 * h1, 1),
            gru_b_hh: z(3 * h1, 1),
            upd_w: z(u, h1),
            upd_b: z(u, 1),
            read_w1: z(h1, u),
            read_b1: z(h1, 1),
            read_w2: z(h2, h1),
            read_b2: z(h2, 1),
            read_w3: z(q, h2),
            read_b3: z(q, 1),
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization; biases share their layer's bound.
    pub fn init(dims: MpnnDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let fan_in = |name: &str| match name {
            "encoder.w" | "encoder.b" => 3,
            "edge.w1" | "edge.b1" => 2 * dims.n_u + 2,
            "readout.w1" | "readout.b1" => dims.n_u,
            "edge.w3" | "edge.b3" | "readout.w3" | "readout.b3" => dims.n_h2,
            // GRU blocks, update projection, second hidden layers
            _ => dims.n_h1,
        };
        let bounds: Vec<f64> = TENSOR_NAMES.iter().map(|n| (1.0 / fan_in(n) as f64).sqrt()).collect();
        for ((_, t), bound) in p.tensors_mut().into_iter().zip(bounds) {
            for v in t.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 20] {
        let t = [
            &self.enc_w, &self.enc_b, &self.edge_w1, &self.edge_b1, &self.edge_w2, &self.edge_b2,
            &self.edge_w3, &self.edge_b3, &self.gru_w_ih, &self.gru_w_hh, &self.gru_b_ih,
            &self.gru_b_hh, &self.upd_w, &self.upd_b, &self.read_w1, &self.read_b1, &self.read_w2,
            &self.read_b2, &self.read_w3, &self.read_b3,
        ];
        let mut i = 0;
        t.map(|x| {
            i += 1;
            (TENSOR_NAMES[i - 1], x)
        })
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 20] {
        let t = [
            &mut self.enc_w, &mut self.enc_b, &mut self.edge_w1, &mut self.edge_b1,
            &mut self.edge_w2, &mut self.edge_b2, &mut self.edge_w3, &mut self.edge_b3,
            &mut self.gru_w_ih, &mut self.gru_w_hh, &mut self.gru_b_ih, &mut self.gru_b_hh,
            &mut self.upd_w, &mut self.upd_b, &mut self.read_w1, &mut self.read_b1,
            &mut self.read_w2, &mut self.read_b2, &mut self.read_w3, &mut self.read_b3,
        ];
        let mut i = 0;
        t.map(|x| {
            i += 1;
            (TENSOR_NAMES[i - 1], x)
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &MpnnParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.zip_apply(b, |x, y| *x += alpha * y);
        }
    }
}

/// Per-graph constants: the encoder input per node and the edge attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeAttributes {
    /// `3 x n`: `[y^T a_n, a_n^T a_n, sigma^2]` per node.
    pub init_feat: Tensor,
    /// `n x n` Gram matrix; edge `j -> n` has attribute `[gram[(n, j)], sigma^2]`.
    pub gram: Tensor,
    pub sigma2: f64,
}

impl NodeAttributes {
    pub fn from_system(system: &RealSystem) -> Self {
        let gram = system.a.tr_mul(&system.a);
        let ya = system.a.tr_mul(&system.y);
        let n = system.cols();
        let init_feat = Tensor::from_fn(3, n, |r, c| match r {
            0 => ya[c],
            1 => gram[(c, c)],
            _ => system.sigma2,
        });
        Self { init_feat, gram, sigma2: system.sigma2 }
    }

    pub fn nodes(&self) -> usize {
        self.gram.nrows()
    }

    /// `f_jn` for the edge from `sender` to `receiver`.
    pub fn edge_attr(&self, sender: usize, receiver: usize) -> [f64; 2] {
        [self.gram[(receiver, sender)], self.sigma2]
    }

    /// Relabels nodes: node `k` of the result is node `perm[k]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let n = self.nodes();
        Self {
            init_feat: Tensor::from_fn(3, n, |r, c| self.init_feat[(r, perm[c])]),
            gram: Tensor::from_fn(n, n, |a, b| self.gram[(perm[a], perm[b])]),
            sigma2: self.sigma2,
        }
    }
}

/// Index of the directed edge `sender -> receiver` among the `n (n - 1)` edges.
pub fn edge_index(nodes: usize, sender: usize, receiver: usize) -> usize {
    debug_assert_ne!(sender, receiver);
    receiver * (nodes - 1) + if sender < receiver { sender } else { sender - 1 }
}

/// Per-node carried GNN state.
#[derive(Debug, Clone, PartialEq)]
pub struct MpnnState {
    /// `N_u x n` hidden vectors.
    pub u: Tensor,
    /// `N_h1 x n` GRU states.
    pub g: Tensor,
}

impl MpnnState {
    pub fn nodes(&self) -> usize {
        self.u.ncols()
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        Self { u: permute_cols(&self.u, perm), g: permute_cols(&self.g, perm) }
    }
}

pub fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn(t.nrows(), perm.len(), |r, c| t[(r, perm[c])])
}

fn add_bias(t: &mut Tensor, b: &Tensor) {
    for mut col in t.column_iter_mut() {
        col += b.column(0);
    }
}

fn dense(w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
    let mut out = w * x;
    add_bias(&mut out, b);
    out
}

fn relu_in_place(t: &mut Tensor) {
    for v in t.iter_mut() {
        *v = v.max(0.0);
    }
}

fn row_sums(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.nrows(), 1, |r, _| t.row(r).sum())
}

/// Accumulates `grad += delta * input^T` and the matching bias gradient.
fn accumulate_dense(gw: &mut Tensor, gb: &mut Tensor, delta: &Tensor, input: &Tensor) {
    gw.gemm(1.0, delta, &input.transpose(), 1.0);
    *gb += row_sums(delta);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Encoder: `u_n = W1 [y^T a_n, a_n^T a_n, sigma^2]^T + b1`, `g_n = 0`.
pub fn node_init(attrs: &NodeAttributes, params: &MpnnParams) -> MpnnState {
    MpnnState {
        u: dense(&params.enc_w, &params.enc_b, &attrs.init_feat),
        g: Tensor::zeros(params.dims.n_h1, attrs.nodes()),
    }
}

/// Every directed message `m_jn`, as an `N_u x n(n-1)` matrix in
/// [`edge_index`] order.
pub fn propagate(state: &MpnnState, attrs: &NodeAttributes, params: &MpnnParams) -> Tensor {
    let n = state.nodes();
    let n_u = params.dims.n_u;
    let mut input = Tensor::zeros(2 * n_u + 2, n * n.saturating_sub(1));
    for recv in 0..n {
        for send in (0..n).filter(|&j| j != recv) {
            let e = edge_index(n, send, recv);
            let f = attrs.edge_attr(send, recv);
            let mut col = input.column_mut(e);
            col.rows_mut(0, n_u).copy_from(&state.u.column(recv));
            col.rows_mut(n_u, n_u).copy_from(&state.u.column(send));
            col[2 * n_u] = f[0];
            col[2 * n_u + 1] = f[1];
        }
    }
    let mut h = dense(&params.edge_w1, &params.edge_b1, &input);
    relu_in_place(&mut h);
    let mut h = dense(&params.edge_w2, &params.edge_b2, &h);
    relu_in_place(&mut h);
    dense(&params.edge_w3, &params.edge_b3, &h)
}

/// Sum incoming messages, append `d`, run the GRU, project to `u`.
pub fn aggregate(state: &MpnnState, messages: &Tensor, d: &Tensor, params: &MpnnParams) -> MpnnState {
    let n = state.nodes();
    let n_u = params.dims.n_u;
    let mut x = Tensor::zeros(n_u + 2, n);
    for recv in 0..n {
        let mut col = x.column_mut(recv);
        for send in (0..n).filter(|&j| j != recv) {
            let e = edge_index(n, send, recv);
            for k in 0..n_u {
                col[k] += messages[(k, e)];
            }
        }
        col[n_u] = d[(0, recv)];
        col[n_u + 1] = d[(1, recv)];
    }
    let g = gru_forward(params, &x, &state.g).g;
    MpnnState { u: dense(&params.upd_w, &params.upd_b, &g), g }
}

struct GruOut {
    g: Tensor,
    reset: Tensor,
    update: Tensor,
    cand: Tensor,
    /// `W_hn g + b_hn`, needed for the reset-gate gradient.
    hn: Tensor,
}

fn gru_forward(params: &MpnnParams, x: &Tensor, g_prev: &Tensor) -> GruOut {
    let h = params.dims.n_h1;
    let n = x.ncols();
    let ai = dense(&params.gru_w_ih, &params.gru_b_ih, x);
    let ah = dense(&params.gru_w_hh, &params.gru_b_hh, g_prev);
    let reset = Tensor::from_fn(h, n, |k, c| sigmoid(ai[(k, c)] + ah[(k, c)]));
    let update = Tensor::from_fn(h, n, |k, c| sigmoid(ai[(h + k, c)] + ah[(h + k, c)]));
    let hn = ah.rows(2 * h, h).into_owned();
    let cand = Tensor::from_fn(h, n, |k, c| (ai[(2 * h + k, c)] + reset[(k, c)] * hn[(k, c)]).tanh());
    let g = Tensor::from_fn(h, n, |k, c| {
        let z = update[(k, c)];
        (1.0 - z) * cand[(k, c)] + z * g_prev[(k, c)]
    });
    GruOut { g, reset, update, cand, hn }
}

/// Readout MLP: `N_u -> N_h1 -> N_h2 -> sqrt(Q)` logits per node.
pub fn readout(state: &MpnnState, params: &MpnnParams) -> Tensor {
    readout_cached(&state.u, params).logits
}

pub(crate) struct ReadoutCache {
    pub h1: Tensor,
    pub h2: Tensor,
    pub logits: Tensor,
}

pub(crate) fn readout_cached(u: &Tensor, params: &MpnnParams) -> ReadoutCache {
    let mut h1 = dense(&params.read_w1, &params.read_b1, u);
    relu_in_place(&mut h1);
    let mut h2 = dense(&params.read_w2, &params.read_b2, &h1);
    relu_in_place(&mut h2);
    let logits = dense(&params.read_w3, &params.read_b3, &h2);
    ReadoutCache { h1, h2, logits }
}

/// Returns the gradient with respect to `u`.
pub(crate) fn readout_backward(
    cache: &ReadoutCache,
    u: &Tensor,
    d_logits: &Tensor,
    params: &MpnnParams,
    grads: &mut MpnnParams,
) -> Tensor {
    accumulate_dense(&mut grads.read_w3, &mut grads.read_b3, d_logits, &cache.h2);
    let mut d2 = params.read_w3.transpose() * d_logits;
    d2.zip_apply(&cache.h2, |d, h| if h <= 0.0 { *d = 0.0 });
    accumulate_dense(&mut grads.read_w2, &mut grads.read_b2, &d2, &cache.h1);
    let mut d1 = params.read_w2.transpose() * &d2;
    d1.zip_apply(&cache.h1, |d, h| if h <= 0.0 { *d = 0.0 });
    accumulate_dense(&mut grads.read_w1, &mut grads.read_b1, &d1, u);
    params.read_w1.transpose() * &d1
}

/// Everything one propagate/aggregate round needs for its backward pass.
pub(crate) struct RoundCache {
    u_in: Tensor,
    g_in: Tensor,
    /// `N_h1 x E` post-ReLU first edge layer.
    h1: Tensor,
    /// `N_h2 x E` post-ReLU second edge layer.
    h2: Tensor,
    /// `N_h2 x n` per-receiver sum of `h2`.
    s: Tensor,
    x: Tensor,
    gru: GruOut,
}

struct EdgeInputs<'a> {
    n: usize,
    /// `N_h1 x n` receiver part of the first edge layer, bias included.
    recv_part: &'a [f64],
    /// `N_h1 x n` sender part.
    send_part: &'a [f64],
    /// First-layer weights of the gram attribute.
    w_gram: &'a [f64],
    gram: &'a Tensor,
    /// Column-major `N_h2 x N_h1`: the weights of input `k` are contiguous.
    w2: &'a [f64],
    b2: &'a [f64],
}

/// Width `W` if it is a compile-time constant, otherwise the runtime width.
/// Instantiating the edge kernels with the default widths lets the compiler
/// unroll and vectorize the per-edge loops; `0` selects the generic path.
#[inline(always)]
fn width<const W: usize>(runtime: usize) -> usize {
    if W > 0 {
        W
    } else {
        runtime
    }
}

/// First two edge layers for every edge plus the per-receiver sum of the
/// second layer. Returns `(h1, h2, s)`.
fn edge_forward<const H1: usize, const H2: usize>(
    inp: &EdgeInputs,
    h1w: usize,
    h2w: usize,
) -> (Tensor, Tensor, Tensor) {
    let (h1w, h2w) = (width::<H1>(h1w), width::<H2>(h2w));
    let n = inp.n;
    let edges = n * n.saturating_sub(1);
    let mut h1 = Tensor::zeros(h1w, edges);
    let mut h2 = Tensor::zeros(h2w, edges);
    let mut s = Tensor::zeros(h2w, n);
    let h1s = h1.as_mut_slice();
    let h2s = h2.as_mut_slice();
    let ss = s.as_mut_slice();
    for recv in 0..n {
        let r = &inp.recv_part[recv * h1w..(recv + 1) * h1w];
        let acc = &mut ss[recv * h2w..(recv + 1) * h2w];
        for send in (0..n).filter(|&j| j != recv) {
            let e = edge_index(n, send, recv);
            let gval = inp.gram[(recv, send)];
            let sp = &inp.send_part[send * h1w..(send + 1) * h1w];
            let a1 = &mut h1s[e * h1w..(e + 1) * h1w];
            for k in 0..h1w {
                a1[k] = (r[k] + sp[k] + inp.w_gram[k] * gval).max(0.0);
            }
            let out = &mut h2s[e * h2w..(e + 1) * h2w];
            out.copy_from_slice(&inp.b2[..h2w]);
            for k in 0..h1w {
                let hk = a1[k];
                let wk = &inp.w2[k * h2w..(k + 1) * h2w];
                for j in 0..h2w {
                    out[j] += wk[j] * hk;
                }
            }
            for j in 0..h2w {
                out[j] = out[j].max(0.0);
                acc[j] += out[j];
            }
        }
    }
    (h1, h2, s)
}

struct EdgeBackInputs<'a> {
    n: usize,
    h1: &'a [f64],
    h2: &'a [f64],
    /// `N_h2 x n` gradient of the per-receiver sums.
    d_s: &'a [f64],
    gram: &'a Tensor,
    w2: &'a [f64],
}

/// Backward of [`edge_forward`]: accumulates the `W2`/`b2` gradients and
/// returns the first-layer pre-activation gradients summed per receiver and
/// per sender, and the gram-weight gradient.
fn edge_backward<const H1: usize, const H2: usize>(
    inp: &EdgeBackInputs,
    hw: usize,
    h2w: usize,
    grads: &mut MpnnParams,
) -> (Tensor, Tensor, Vec<f64>) {
    let (hw, h2w) = (width::<H1>(hw), width::<H2>(h2w));
    let n = inp.n;
    let mut d_recv = Tensor::zeros(hw, n);
    let mut d_send = Tensor::zeros(hw, n);
    let mut d_wgram = vec![0.0; hw];
    let gw2 = grads.edge_w2.as_mut_slice();
    let gb2 = grads.edge_b2.as_mut_slice();
    let mut dz2 = vec![0.0; h2w];
    let mut dz1 = vec![0.0; hw];
    let d_recv_s = d_recv.as_mut_slice();
    let d_send_s = d_send.as_mut_slice();
    for recv in 0..n {
        let ds = &inp.d_s[recv * h2w..(recv + 1) * h2w];
        for send in (0..n).filter(|&j| j != recv) {
            let e = edge_index(n, send, recv);
            let h2e = &inp.h2[e * h2w..(e + 1) * h2w];
            for j in 0..h2w {
                dz2[j] = if h2e[j] > 0.0 { ds[j] } else { 0.0 };
                gb2[j] += dz2[j];
            }
            let h1e = &inp.h1[e * hw..(e + 1) * hw];
            for k in 0..hw {
                let hk = h1e[k];
                let wk = &inp.w2[k * h2w..(k + 1) * h2w];
                let gk = &mut gw2[k * h2w..(k + 1) * h2w];
                let mut acc = 0.0;
                for j in 0..h2w {
                    gk[j] += dz2[j] * hk;
                    acc += wk[j] * dz2[j];
                }
                dz1[k] = if hk > 0.0 { acc } else { 0.0 };
            }
            let gval = inp.gram[(recv, send)];
            let rc = &mut d_recv_s[recv * hw..(recv + 1) * hw];
            for k in 0..hw {
                rc[k] += dz1[k];
                d_wgram[k] += dz1[k] * gval;
            }
            let sc = &mut d_send_s[send * hw..(send + 1) * hw];
            for k in 0..hw {
                sc[k] += dz1[k];
            }
        }
    }
    (d_recv, d_send, d_wgram)
}

/// One fused round. The last edge layer is linear, so it is applied once to
/// the per-receiver sum of second-layer activations instead of per edge; the
/// first edge layer is split into receiver, sender and edge-attribute parts.
pub(crate) fn round_forward(
    state: &MpnnState,
    attrs: &NodeAttributes,
    d: &Tensor,
    params: &MpnnParams,
) -> (MpnnState, RoundCache) {
    let n = state.nodes();
    let dims = params.dims;
    let (n_u, h1w, h2w) = (dims.n_u, dims.n_h1, dims.n_h2);
    let w1 = &params.edge_w1;
    let mut recv_part = w1.columns(0, n_u) * &state.u;
    let send_part = w1.columns(n_u, n_u) * &state.u;
    let w_gram = w1.column(2 * n_u);
    for mut col in recv_part.column_iter_mut() {
        for k in 0..h1w {
            col[k] += params.edge_b1[(k, 0)] + w1[(k, 2 * n_u + 1)] * attrs.sigma2;
        }
    }

    let w_gram: Vec<f64> = w_gram.iter().copied().collect();
    let edge_in = EdgeInputs {
        n,
        recv_part: recv_part.as_slice(),
        send_part: send_part.as_slice(),
        w_gram: &w_gram,
        gram: &attrs.gram,
        w2: params.edge_w2.as_slice(),
        b2: params.edge_b2.as_slice(),
    };
    let (h1, h2, s) = if (h1w, h2w) == (16, 8) {
        edge_forward::<16, 8>(&edge_in, h1w, h2w)
    } else {
        edge_forward::<0, 0>(&edge_in, h1w, h2w)
    };
    let mut msum = &params.edge_w3 * &s;
    let deg = n.saturating_sub(1) as f64;
    for mut col in msum.column_iter_mut() {
        col.axpy(deg, &params.edge_b3.column(0), 1.0);
    }

    let mut x = Tensor::zeros(n_u + 2, n);
    x.rows_mut(0, n_u).copy_from(&msum);
    x.rows_mut(n_u, 2).copy_from(d);
    let gru = gru_forward(params, &x, &state.g);
    let u = dense(&params.upd_w, &params.upd_b, &gru.g);
    let next = MpnnState { u, g: gru.g.clone() };
    let cache = RoundCache { u_in: state.u.clone(), g_in: state.g.clone(), h1, h2, s, x, gru };
    (next, cache)
}

/// Backward through one round. Takes gradients with respect to the round's
/// output `(u, g)`, returns gradients with respect to its input `(u, g)` and
/// to the node attributes `d` (`2 x n`).
pub(crate) fn round_backward(
    cache: &RoundCache,
    attrs: &NodeAttributes,
    d_u_out: &Tensor,
    d_g_out: &Tensor,
    params: &MpnnParams,
    grads: &mut MpnnParams,
) -> (Tensor, Tensor, Tensor) {
    let n = cache.u_in.ncols();
    let dims = params.dims;
    let (n_u, hw, h2w) = (dims.n_u, dims.n_h1, dims.n_h2);
    let gru = &cache.gru;

    accumulate_dense(&mut grads.upd_w, &mut grads.upd_b, d_u_out, &gru.g);
    let mut dg = params.upd_w.transpose() * d_u_out;
    dg += d_g_out;

    let mut da_i = Tensor::zeros(3 * hw, n);
    let mut da_h = Tensor::zeros(3 * hw, n);
    let mut dg_prev = Tensor::zeros(hw, n);
    for c in 0..n {
        for k in 0..hw {
            let (r, z, nc, hn) = (gru.reset[(k, c)], gru.update[(k, c)], gru.cand[(k, c)], gru.hn[(k, c)]);
            let dgo = dg[(k, c)];
            let dn = dgo * (1.0 - z) * (1.0 - nc * nc);
            let dz = dgo * (cache.g_in[(k, c)] - nc) * z * (1.0 - z);
            let dr = dn * hn * r * (1.0 - r);
            dg_prev[(k, c)] = dgo * z;
            da_i[(k, c)] = dr;
            da_h[(k, c)] = dr;
            da_i[(hw + k, c)] = dz;
            da_h[(hw + k, c)] = dz;
            da_i[(2 * hw + k, c)] = dn;
            da_h[(2 * hw + k, c)] = dn * r;
        }
    }
    accumulate_dense(&mut grads.gru_w_ih, &mut grads.gru_b_ih, &da_i, &cache.x);
    accumulate_dense(&mut grads.gru_w_hh, &mut grads.gru_b_hh, &da_h, &cache.g_in);
    dg_prev += params.gru_w_hh.transpose() * &da_h;
    let dx = params.gru_w_ih.transpose() * &da_i;
    let d_msum = dx.rows(0, n_u).into_owned();
    let d_attr = dx.rows(n_u, 2).into_owned();

    grads.edge_w3.gemm(1.0, &d_msum, &cache.s.transpose(), 1.0);
    let deg = n.saturating_sub(1) as f64;
    grads.edge_b3.zip_apply(&row_sums(&d_msum), |x, y| *x += deg * y);
    let d_s = params.edge_w3.transpose() * &d_msum;

    // Per edge: mask the receiver's gradient by the second layer's ReLU,
    // accumulate the W2/b2 gradients, pull back through W2 and the first
    // ReLU, and scatter into receiver, sender and gram-weight gradients.
    let back_in = EdgeBackInputs {
        n,
        h1: cache.h1.as_slice(),
        h2: cache.h2.as_slice(),
        d_s: d_s.as_slice(),
        gram: &attrs.gram,
        w2: params.edge_w2.as_slice(),
    };
    let (d_recv, d_send, d_wgram) = if (hw, h2w) == (16, 8) {
        edge_backward::<16, 8>(&back_in, hw, h2w, grads)
    } else {
        edge_backward::<0, 0>(&back_in, hw, h2w, grads)
    };
    let d_bias = row_sums(&d_recv);
    grads.edge_b1 += &d_bias;
    {
        let mut gw = grads.edge_w1.columns_mut(0, n_u);
        gw.gemm(1.0, &d_recv, &cache.u_in.transpose(), 1.0);
    }
    {
        let mut gw = grads.edge_w1.columns_mut(n_u, n_u);
        gw.gemm(1.0, &d_send, &cache.u_in.transpose(), 1.0);
    }
    for k in 0..hw {
        grads.edge_w1[(k, 2 * n_u)] += d_wgram[k];
        grads.edge_w1[(k, 2 * n_u + 1)] += d_bias[(k, 0)] * attrs.sigma2;
    }
    let w1 = &params.edge_w1;
    let mut du = w1.columns(0, n_u).transpose() * &d_recv;
    du += w1.columns(n_u, n_u).transpose() * &d_send;
    (du, dg_prev, d_attr)
}

/// Encoder backward; the encoder input is data, so nothing flows further.
pub(crate) fn node_init_backward(attrs: &NodeAttributes, d_u0: &Tensor, grads: &mut MpnnParams) {
    accumulate_dense(&mut grads.enc_w, &mut grads.enc_b, d_u0, &attrs.init_feat);
}

/// `L` rounds of message passing followed by the readout.
///
/// `carry = None` starts from the encoder (first unfolded layer); otherwise
/// the carried `(u, g)` from the previous layer is used. Returns the
/// `sqrt(Q) x n` logits and the state to carry forward.
pub fn gnn_forward(
    attrs: &NodeAttributes,
    d: &Tensor,
    carry: Option<MpnnState>,
    params: &MpnnParams,
    rounds: usize,
) -> Result<(Tensor, MpnnState)> {
    if rounds == 0 {
        return Err(Error::InvalidConfig("GNN needs at least one round".into()));
    }
    let n = attrs.nodes();
    if d.shape() != (2, n) {
        return Err(Error::DimensionMismatch(format!("node attributes {:?} for {n} nodes", d.shape())));
    }
    let mut state = match carry {
        None => node_init(attrs, params),
        Some(s) => {
            if s.u.shape() != (params.dims.n_u, n) || s.g.shape() != (params.dims.n_h1, n) {
                return Err(Error::DimensionMismatch(format!(
                    "carried state has {} nodes, graph has {n}",
                    s.nodes()
                )));
            }
            s
        }
    };
    for _ in 0..rounds {
        state = round_forward(&state, attrs, d, params).0;
    }
    Ok((readout(&state, params), state))
}
