//! Linear MIMO system model `y = Hx + n`, its real-valued embedding, and
//! random instance generation.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::constellation::Constellation;
use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Real-valued system `y = A x + n`, `n ~ N(0, sigma2 I)`.
///
/// Every detector in the crate consumes this form. For an embedded complex
/// system `sigma2` is the per-real-dimension variance, i.e. half of the
/// complex noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSystem {
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma2: f64,
}

impl RealSystem {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>, sigma2: f64) -> Result<Self> {
        if a.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {} rows, observation has {}",
                a.nrows(),
                y.len()
            )));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidConfig(format!("noise variance must be positive, got {sigma2}")));
        }
        Ok(Self { a, y, sigma2 })
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    /// Same system with columns reordered: column `k` of the result is column
    /// `perm[k]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let a = DMatrix::from_fn(self.rows(), self.cols(), |m, k| self.a[(m, perm[k])]);
        Self { a, y: self.y.clone(), sigma2: self.sigma2 }
    }
}

/// Complex system together with its real embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub h: DMatrix<C64>,
    pub y: DVector<C64>,
    pub sigma2: f64,
    real: RealSystem,
}

impl LinearSystem {
    pub fn new(h: DMatrix<C64>, y: DVector<C64>, sigma2: f64) -> Result<Self> {
        if h.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "channel has {} rows, observation has {}",
                h.nrows(),
                y.len()
            )));
        }
        let real = RealSystem::new(embed_matrix(&h), embed_vector(&y), sigma2 / 2.0)?;
        Ok(Self { h, y, sigma2, real })
    }

    pub fn real(&self) -> &RealSystem {
        &self.real
    }

    /// Receive antennas `M`.
    pub fn antennas(&self) -> usize {
        self.h.nrows()
    }

    /// Users `N`.
    pub fn users(&self) -> usize {
        self.h.ncols()
    }

    /// Relabels users: user `k` of the result is user `perm[k]` of `self`.
    pub fn permute_users(&self, perm: &[usize]) -> Self {
        let h = DMatrix::from_fn(self.antennas(), self.users(), |m, k| self.h[(m, perm[k])]);
        Self::new(h, self.y.clone(), self.sigma2).expect("permutation keeps a valid system")
    }

    /// Imperfect-CSI view: the detector sees `H + E` with `E ~ CN(0, error_var)`
    /// entrywise while `y` stays the one generated through the true `H`.
    pub fn with_channel_error(&self, error_var: f64, rng: &mut impl Rng) -> Self {
        if error_var == 0.0 {
            return self.clone();
        }
        let sd = (error_var / 2.0).sqrt();
        let h = self.h.map(|v| v + C64::new(sd * gauss(rng), sd * gauss(rng)));
        Self::new(h, self.y.clone(), self.sigma2).expect("perturbed system stays valid")
    }
}

/// `[[Re H, -Im H], [Im H, Re H]]`.
pub fn embed_matrix(h: &DMatrix<C64>) -> DMatrix<f64> {
    let (m, n) = h.shape();
    DMatrix::from_fn(2 * m, 2 * n, |r, c| {
        let v = h[(r % m, c % n)];
        match (r < m, c < n) {
            (true, true) | (false, false) => v.re,
            (true, false) => -v.im,
            (false, true) => v.im,
        }
    })
}

/// `[Re v; Im v]`.
pub fn embed_vector(v: &DVector<C64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// Inverse of [`embed_vector`].
pub fn unembed_vector(v: &DVector<f64>) -> DVector<C64> {
    let n = v.len() / 2;
    DVector::from_fn(n, |i, _| C64::new(v[i], v[n + i]))
}

/// Real-node permutation induced by a user permutation: users and their
/// imaginary parts move together.
pub fn real_permutation(user_perm: &[usize]) -> Vec<usize> {
    let n = user_perm.len();
    user_perm.iter().copied().chain(user_perm.iter().map(|&p| p + n)).collect()
}

pub(crate) fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rayleigh channel with i.i.d. `CN(0, 1/M)` entries (unit expected column norm).
pub fn sample_channel(m: usize, n: usize, rng: &mut impl Rng) -> DMatrix<C64> {
    let sd = (0.5 / m as f64).sqrt();
    DMatrix::from_fn(m, n, |_, _| C64::new(sd * gauss(rng), sd * gauss(rng)))
}

/// Complex noise variance giving `SNR = E||Hx||^2 / E||n||^2` for unit-energy
/// symbols and `CN(0, 1/M)` channels.
pub fn sigma2_for_snr(snr_db: f64, m: usize, n: usize) -> f64 {
    n as f64 / (m as f64 * 10f64.powf(snr_db / 10.0))
}

/// One transmitted vector and what the receiver sees.
#[derive(Debug, Clone)]
pub struct Sample {
    pub system: LinearSystem,
    pub x_true: DVector<C64>,
    pub x_true_real: DVector<f64>,
    /// PAM index of every real dimension of `x_true_real`.
    pub labels: Vec<usize>,
}

impl Sample {
    /// Complex-symbol errors: a symbol is wrong if either of its real
    /// dimensions is.
    pub fn symbol_errors(&self, decisions: &[usize]) -> usize {
        let n = self.labels.len() / 2;
        (0..n)
            .filter(|&k| decisions[k] != self.labels[k] || decisions[k + n] != self.labels[k + n])
            .count()
    }
}

fn draw_index(prior: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    prior.len() - 1
}

/// Draws a transmission through a given channel.
pub fn transmit(
    h: DMatrix<C64>,
    constellation: &Constellation,
    sigma2: f64,
    rng: &mut impl Rng,
) -> Sample {
    let (m, n) = h.shape();
    let pam = constellation.pam_points();
    let mut labels = vec![0; 2 * n];
    for l in labels.iter_mut() {
        *l = draw_index(constellation.prior(), rng);
    }
    let x_true = DVector::from_fn(n, |k, _| C64::new(pam[labels[k]], pam[labels[k + n]]));
    let sd = (sigma2 / 2.0).sqrt();
    let noise = DVector::from_fn(m, |_, _| C64::new(sd * gauss(rng), sd * gauss(rng)));
    let y = &h * &x_true + noise;
    let x_true_real = embed_vector(&x_true);
    let system = LinearSystem::new(h, y, sigma2).expect("generated system is valid");
    Sample { system, x_true, x_true_real, labels }
}

/// Fresh channel, symbols and noise.
pub fn generate_sample(
    m: usize,
    n: usize,
    constellation: &Constellation,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Sample {
    let h = sample_channel(m, n, rng);
    transmit(h, constellation, sigma2_for_snr(snr_db, m, n), rng)
}

pub fn generate_batch(
    count: usize,
    m: usize,
    n: usize,
    constellation: &Constellation,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Vec<Sample> {
    (0..count).map(|_| generate_sample(m, n, constellation, snr_db, rng)).collect()
}

/// Independent RNG stream keyed by `(seed, a, b)`.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(a.wrapping_add(0x9e37))));
    rng.set_stream(b);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
