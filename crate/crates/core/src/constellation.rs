//! Square QAM constellations and their per-dimension PAM alphabets.

use nalgebra::Complex;

use crate::error::{Error, Result};

/// A unit-energy square Q-QAM constellation.
///
/// All detection in this crate runs per real dimension, so the PAM alphabet
/// (`pam_points`) and its prior are the quantities most code touches. The
/// complex points are the Cartesian product `pam[i] + j·pam[k]` with index
/// `i * sqrt_q + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    order: usize,
    complex_points: Vec<Complex<f64>>,
    pam_points: Vec<f64>,
    prior: Vec<f64>,
}

impl Constellation {
    pub fn new(order: usize) -> Result<Self> {
        let side = match order {
            4 => 2,
            16 => 4,
            64 => 8,
            other => return Err(Error::UnsupportedOrder(other)),
        };
        // E|s|^2 = 2 * E[pam^2] = 1 for odd-integer amplitudes scaled by this.
        let scale = (3.0 / (2.0 * (order as f64 - 1.0))).sqrt();
        let pam_points: Vec<f64> = (0..side)
            .map(|i| (2.0 * i as f64 - (side as f64 - 1.0)) * scale)
            .collect();
        let complex_points = pam_points
            .iter()
            .flat_map(|&re| pam_points.iter().map(move |&im| Complex::new(re, im)))
            .collect();
        Ok(Self {
            order,
            complex_points,
            prior: vec![1.0 / side as f64; side],
            pam_points,
        })
    }

    /// Parses the CLI modulation names (`qpsk`, `16qam`, `64qam`, or a bare order).
    pub fn from_name(name: &str) -> Result<Self> {
        let order = match name.to_ascii_lowercase().as_str() {
            "qpsk" | "4qam" | "4" => 4,
            "16qam" | "16" => 16,
            "64qam" | "64" => 64,
            _ => return Err(Error::InvalidConfig(format!("unknown modulation `{name}`"))),
        };
        Self::new(order)
    }

    /// Replaces the per-dimension prior. Must be non-negative and sum to one.
    pub fn with_prior(mut self, prior: Vec<f64>) -> Result<Self> {
        if prior.len() != self.pam_points.len() {
            return Err(Error::DimensionMismatch(format!(
                "prior has {} entries, alphabet has {}",
                prior.len(),
                self.pam_points.len()
            )));
        }
        let total: f64 = prior.iter().sum();
        if prior.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig("prior must be a probability vector".into()));
        }
        self.prior = prior;
        Ok(self)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of PAM amplitudes per real dimension, `sqrt(Q)`.
    pub fn sqrt_order(&self) -> usize {
        self.pam_points.len()
    }

    pub fn complex_points(&self) -> &[Complex<f64>] {
        &self.complex_points
    }

    pub fn pam_points(&self) -> &[f64] {
        &self.pam_points
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn is_uniform(&self) -> bool {
        let p0 = self.prior[0];
        self.prior.iter().all(|&p| p == p0)
    }

    /// Largest squared amplitude; bounds any posterior variance.
    pub fn max_pam_energy(&self) -> f64 {
        self.pam_points.iter().map(|s| s * s).fold(0.0, f64::max)
    }

    /// Minimum-distance PAM index for a real value.
    pub fn nearest_index(&self, value: f64) -> usize {
        let side = self.pam_points.len();
        let step = self.pam_points[1] - self.pam_points[0];
        let pos = ((value - self.pam_points[0]) / step).round();
        if pos.is_nan() || pos <= 0.0 {
            0
        } else {
            (pos as usize).min(side - 1)
        }
    }

    /// Hard PAM decisions for every entry of `values`.
    pub fn slice(&self, values: &[f64]) -> Vec<usize> {
        values.iter().map(|&v| self.nearest_index(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qpsk_alphabet() {
        let c = Constellation::new(4).unwrap();
        let a = 0.5f64.sqrt();
        assert_eq!(c.sqrt_order(), 2);
        assert!((c.pam_points()[0] + a).abs() < 1e-15);
        assert!((c.pam_points()[1] - a).abs() < 1e-15);
    }

    #[test]
    fn qam16_alphabet() {
        let c = Constellation::new(16).unwrap();
        let s = 10f64.sqrt();
        let expected = [-3.0 / s, -1.0 / s, 1.0 / s, 3.0 / s];
        for (p, e) in c.pam_points().iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_energy_for_every_order() {
        for q in [4, 16, 64] {
            let c = Constellation::new(q).unwrap();
            assert_eq!(c.complex_points().len(), q);
            let energy: f64 =
                c.complex_points().iter().map(|s| s.norm_sqr()).sum::<f64>() / q as f64;
            assert!((energy - 1.0).abs() < 1e-12, "Q={q}: {energy}");
            let psum: f64 = c.prior().iter().sum();
            assert!((psum - 1.0).abs() < 1e-15);
            let pam = c.pam_points();
            for i in 0..pam.len() {
                assert!((pam[i] + pam[pam.len() - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn complex_points_are_cartesian_product() {
        let c = Constellation::new(16).unwrap();
        let pam = c.pam_points();
        for (idx, s) in c.complex_points().iter().enumerate() {
            assert_eq!(s.re, pam[idx / 4]);
            assert_eq!(s.im, pam[idx % 4]);
        }
    }

    #[test]
    fn rejects_unsupported_order() {
        assert!(matches!(Constellation::new(8), Err(Error::UnsupportedOrder(8))));
        assert!(Constellation::from_name("8psk").is_err());
    }

    #[test]
    fn nearest_point_slicing() {
        let c = Constellation::new(16).unwrap();
        assert_eq!(c.nearest_index(-10.0), 0);
        assert_eq!(c.nearest_index(10.0), 3);
        assert_eq!(c.nearest_index(0.01), 2);
        assert_eq!(c.nearest_index(-0.01), 1);
        for (i, &p) in c.pam_points().iter().enumerate() {
            assert_eq!(c.nearest_index(p), i);
        }
    }

    #[test]
    fn prior_validation() {
        let c = Constellation::new(4).unwrap();
        assert!(c.clone().with_prior(vec![0.3, 0.7]).is_ok());
        assert!(c.clone().with_prior(vec![0.3, 0.6]).is_err());
        assert!(c.with_prior(vec![1.0]).is_err());
    }
}
