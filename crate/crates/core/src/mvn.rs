//! Multivariate normal CDF by Genz's separation of variables.
//!
//! After Cholesky factorisation `Sigma = L L^T` the integral over
//! `{z <= x}` becomes an integral over the unit cube of a product of
//! univariate normal CDFs. The first variable is integrated exactly; the
//! remaining `d - 1` are averaged over a fixed, shifted Richtmyer lattice
//! with the tent (baker's) periodisation, so results are deterministic to
//! the bit.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

pub const DEFAULT_POINTS: usize = 1 << 14;
const LATTICE_SEED: u64 = 0x5EED_C0DE;
const PRIMES: [f64; 8] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// CDF evaluator for one `N(mu, sigma)`; factorisation and lattice are built once.
#[derive(Debug, Clone)]
pub struct MvnCdf {
    mu: Vec<f64>,
    chol: Vec<Vec<f64>>,
    /// `points` rows of `d - 1` coordinates, row-major.
    lattice: Vec<f64>,
    points: usize,
}

impl MvnCdf {
    pub fn new(mu: &[f64], sigma: &[Vec<f64>]) -> Result<Self> {
        Self::with_points(mu, sigma, DEFAULT_POINTS)
    }

    pub fn with_points(mu: &[f64], sigma: &[Vec<f64>], points: usize) -> Result<Self> {
        let d = mu.len();
        if d == 0 || d > PRIMES.len() + 1 {
            return Err(Error::InvalidParameter(format!("unsupported dimension {d}")));
        }
        if points == 0 {
            return Err(Error::InvalidParameter("lattice needs at least one point".into()));
        }
        if sigma.len() != d || sigma.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: sigma.len(),
            });
        }
        let asymmetric = (0..d).any(|i| {
            (0..i).any(|j| {
                let (a, b) = (sigma[i][j], sigma[j][i]);
                (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0)
            })
        });
        if asymmetric {
            return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
        }
        let m = DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorisation failed".into()))?
            .l();
        let chol: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| chol[(i, j)]).collect()).collect();
        if chol.iter().enumerate().any(|(i, r)| !r[i].is_finite() || r[i] <= 0.0) {
            return Err(Error::NotPositiveDefinite("singular covariance".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(LATTICE_SEED);
        let shift: Vec<f64> = (0..d - 1).map(|_| rng.random::<f64>()).collect();
        let alpha: Vec<f64> = PRIMES[..d - 1].iter().map(|p| p.sqrt().fract()).collect();
        let mut lattice = Vec::with_capacity(points * (d - 1));
        for j in 1..=points {
            for k in 0..d - 1 {
                let u = (j as f64 * alpha[k] + shift[k]).fract();
                lattice.push((2.0 * u - 1.0).abs());
            }
        }
        Ok(Self {
            mu: mu.to_vec(),
            chol,
            lattice,
            points,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `P(Z <= x)` componentwise.
    pub fn cdf(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidParameter("NaN in CDF argument".into()));
        }
        if x.contains(&f64::NEG_INFINITY) {
            return Ok(0.0);
        }
        let b: Vec<f64> = x.iter().zip(&self.mu).map(|(x, m)| x - m).collect();
        let l = &self.chol;
        let e0 = norm_cdf(b[0] / l[0][0]);
        if d == 1 || e0 == 0.0 {
            return Ok(e0);
        }

        let mut y = [0.0; PRIMES.len() + 1];
        let mut total = 0.0;
        for w in self.lattice.chunks_exact(d - 1) {
            let mut f = e0;
            let mut e = e0;
            for k in 1..d {
                y[k - 1] = norm_quantile((w[k - 1] * e).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0));
                let s: f64 = l[k][..k].iter().zip(&y[..k]).map(|(a, b)| a * b).sum();
                e = norm_cdf((b[k] - s) / l[k][k]);
                f *= e;
                if f == 0.0 {
                    break;
                }
            }
            total += f;
        }
        Ok((total / self.points as f64).clamp(0.0, 1.0))
    }
}

/// One-shot `P(Z <= x)` for `Z ~ N(mu, sigma)`.
pub fn mvn_cdf(x: &[f64], mu: &[f64], sigma: &[Vec<f64>]) -> Result<f64> {
    MvnCdf::new(mu, sigma)?.cdf(x)
}
