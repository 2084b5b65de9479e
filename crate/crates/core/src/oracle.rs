//! Exhaustive-enumeration oracles for small systems: exact posterior
//! marginals and the maximum-a-posteriori vector.
//!
//! Candidates are visited in lexicographic order of their PAM index vectors
//! (dimension 0 most significant). The squared residual is updated
//! incrementally as digits change and recomputed exactly at the start of
//! every block of candidates; blocks are processed in parallel and reduced
//! in block order, so results do not depend on scheduling.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::mpnn::Tensor;
use crate::system::RealSystem;

/// Largest candidate count the oracles accept.
pub const ORACLE_BOUND: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Exact marginal pmf per real dimension, `sqrt(Q) x 2N`.
    pub marginals: Tensor,
    /// PAM indices of the most probable vector.
    pub map: Vec<usize>,
    /// Number of candidate vectors scored.
    pub evaluations: u64,
}

impl OracleResult {
    /// Per-dimension argmax of the marginals.
    pub fn marginal_decisions(&self) -> Vec<usize> {
        self.marginals
            .column_iter()
            .map(|col| (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b }))
            .collect()
    }
}

fn candidate_count(sqrt_q: usize, n: usize) -> Result<u64> {
    let count = (sqrt_q as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if count > ORACLE_BOUND {
        return Err(Error::TooLarge { candidates: count, bound: ORACLE_BOUND });
    }
    Ok(count as u64)
}

struct Problem<'a> {
    system: &'a RealSystem,
    gram: DMatrix<f64>,
    pam: &'a [f64],
    log_prior: Vec<f64>,
    n: usize,
    q: usize,
}

/// Per-block accumulator. Marginal sums are kept relative to `max`.
struct Block {
    max: f64,
    best: Vec<usize>,
    sums: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(system: &'a RealSystem, c: &'a Constellation) -> Self {
        Self {
            system,
            gram: system.a.tr_mul(&system.a),
            pam: c.pam_points(),
            log_prior: c.prior().iter().map(|p| p.ln()).collect(),
            n: system.cols(),
            q: c.sqrt_order(),
        }
    }

    fn log_weight(&self, q2: f64, digits: &[usize]) -> f64 {
        let prior: f64 = digits.iter().map(|&d| self.log_prior[d]).sum();
        -q2 / (2.0 * self.system.sigma2) + prior
    }

    /// Scores candidates `[start, start + len)`.
    fn run_block(&self, start: u64, len: u64, marginals: bool) -> Block {
        let (n, q) = (self.n, self.q);
        let mut digits = vec![0usize; n];
        let mut rest = start;
        for k in (0..n).rev() {
            digits[k] = (rest % q as u64) as usize;
            rest /= q as u64;
        }
        let x = DVector::from_fn(n, |k, _| self.pam[digits[k]]);
        let resid = &self.system.y - &self.system.a * &x;
        // c = A^T (y - A x), q2 = ||y - A x||^2
        let mut corr = self.system.a.tr_mul(&resid);
        let mut q2 = resid.norm_squared();

        let mut block = Block { max: f64::NEG_INFINITY, best: digits.clone(), sums: vec![0.0; if marginals { n * q } else { 0 }] };
        for i in 0..len {
            if i > 0 {
                // odometer increment, updating (q2, c) per changed digit
                let mut k = n - 1;
                loop {
                    let old = digits[k];
                    let new = if old + 1 == q { 0 } else { old + 1 };
                    digits[k] = new;
                    let delta = self.pam[new] - self.pam[old];
                    q2 += -2.0 * delta * corr[k] + delta * delta * self.gram[(k, k)];
                    corr.axpy(-delta, &self.gram.column(k), 1.0);
                    if new != 0 || k == 0 {
                        break;
                    }
                    k -= 1;
                }
            }
            let w = self.log_weight(q2, &digits);
            if w > block.max {
                if marginals && block.max > f64::NEG_INFINITY {
                    let scale = (block.max - w).exp();
                    block.sums.iter_mut().for_each(|s| *s *= scale);
                }
                block.max = w;
                block.best.copy_from_slice(&digits);
            }
            if marginals {
                let e = (w - block.max).exp();
                for (k, &d) in digits.iter().enumerate() {
                    block.sums[k * q + d] += e;
                }
            }
        }
        block
    }

    fn solve(&self, marginals: bool) -> Result<OracleResult> {
        let total = candidate_count(self.q, self.n)?;
        let block_len = total.min(1 << 14);
        let blocks = total.div_ceil(block_len);
        let parts: Vec<Block> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let start = b * block_len;
                self.run_block(start, block_len.min(total - start), marginals)
            })
            .collect();
        let max = parts.iter().map(|b| b.max).fold(f64::NEG_INFINITY, f64::max);
        // first block attaining the maximum keeps lexicographic tie-breaking
        let map = parts.iter().find(|b| b.max == max).expect("at least one block").best.clone();
        let mut marg = Tensor::zeros(self.q, self.n);
        if marginals {
            let mut sums = vec![0.0; self.n * self.q];
            for b in &parts {
                let scale = (b.max - max).exp();
                for (s, v) in sums.iter_mut().zip(&b.sums) {
                    *s += v * scale;
                }
            }
            for k in 0..self.n {
                let z: f64 = sums[k * self.q..(k + 1) * self.q].iter().sum();
                for d in 0..self.q {
                    marg[(d, k)] = sums[k * self.q + d] / z;
                }
            }
        }
        Ok(OracleResult { marginals: marg, map, evaluations: total })
    }
}

/// Exact marginals `p(x_k | y)` by enumerating every candidate vector.
pub fn oracle_marginals(system: &RealSystem, constellation: &Constellation) -> Result<OracleResult> {
    Problem::new(system, constellation).solve(true)
}

/// Exact MAP vector (minimum distance for a uniform prior), as PAM indices.
pub fn map_detect(system: &RealSystem, constellation: &Constellation) -> Result<Vec<usize>> {
    Ok(Problem::new(system, constellation).solve(false)?.map)
}
