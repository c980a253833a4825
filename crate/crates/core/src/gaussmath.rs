//! Multivariate Gaussian utilities: factorization, conditioning of the
//! unobserved block on the observed block, sampling, and the
//! log-supermodularity test.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const PIVOT_FLOOR: f64 = 1e-12;
pub const SUPERMOD_TOL: f64 = 1e-9;

const SAMPLE_CHUNK: usize = 4096;

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Lower Cholesky factor. Fails on asymmetric input or when a pivot
/// (squared diagonal before the square root) falls to `PIVOT_FLOOR` or below.
pub fn cholesky(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let asym = max_asymmetry(cov);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let n = cov.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = cov[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > PIVOT_FLOOR) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = cov[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky(cov)?;
    let n = l.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::NotPositiveDefinite { index: 0, pivot: 0.0 })?;
    let inv = linv.transpose() * linv;
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Joint law of `(Z, U)` with `Z` occupying the first `dz` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianJoint {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub dz: usize,
    pub du: usize,
}

impl GaussianJoint {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, dz: usize, du: usize) -> Result<Self> {
        let d = dz + du;
        if dz == 0 || du == 0 || mean.len() != d || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "dims ({dz}, {du}) against mean {} and cov {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        cholesky(&cov)?;
        Ok(Self { mean, cov, dz, du })
    }

    /// Zero-mean joint assembled from its three blocks.
    pub fn from_blocks(sigma_z: &DMatrix<f64>, sigma_u: &DMatrix<f64>, sigma_zu: &DMatrix<f64>) -> Result<Self> {
        let dz = sigma_z.nrows();
        let du = sigma_u.nrows();
        if sigma_zu.nrows() != dz || sigma_zu.ncols() != du {
            return Err(Error::DimensionMismatch(format!(
                "cross block is {}x{}, expected {dz}x{du}",
                sigma_zu.nrows(),
                sigma_zu.ncols()
            )));
        }
        let mut cov = DMatrix::zeros(dz + du, dz + du);
        cov.view_mut((0, 0), (dz, dz)).copy_from(sigma_z);
        cov.view_mut((dz, dz), (du, du)).copy_from(sigma_u);
        cov.view_mut((0, dz), (dz, du)).copy_from(sigma_zu);
        cov.view_mut((dz, 0), (du, dz)).copy_from(&sigma_zu.transpose());
        Self::new(DVector::zeros(dz + du), cov, dz, du)
    }

    pub fn dim(&self) -> usize {
        self.dz + self.du
    }

    pub fn sigma_z(&self) -> DMatrix<f64> {
        self.cov.view((0, 0), (self.dz, self.dz)).into_owned()
    }

    pub fn sigma_u(&self) -> DMatrix<f64> {
        self.cov.view((self.dz, self.dz), (self.du, self.du)).into_owned()
    }

    /// `Cov(Z, U)`, shape `dz x du`.
    pub fn sigma_zu(&self) -> DMatrix<f64> {
        self.cov.view((0, self.dz), (self.dz, self.du)).into_owned()
    }

    pub fn mean_z(&self) -> DVector<f64> {
        self.mean.rows(0, self.dz).into_owned()
    }

    pub fn mean_u(&self) -> DVector<f64> {
        self.mean.rows(self.dz, self.du).into_owned()
    }
}

/// `U | Z = z ~ N(A z + b, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussian {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub chol: DMatrix<f64>,
}

impl ConditionalGaussian {
    pub fn mean_at(&self, z: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(z) + &self.b
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.cov)
    }
}

pub fn condition_on_z(joint: &GaussianJoint) -> Result<ConditionalGaussian> {
    let sz = joint.sigma_z();
    let szu = joint.sigma_zu();
    let sz_inv = spd_inverse(&sz)?;
    let a = szu.transpose() * sz_inv;
    let b = joint.mean_u() - &a * joint.mean_z();
    let cov = joint.sigma_u() - &a * &szu;
    let cov = (&cov + cov.transpose()) * 0.5;
    let chol = cholesky(&cov)?;
    Ok(ConditionalGaussian { a, b, cov, chol })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermodularVerdict {
    pub holds: bool,
    /// Index pair with the largest positive precision off-diagonal, when the verdict fails.
    pub offending: Option<(usize, usize)>,
    pub max_off_diagonal: f64,
}

/// A Gaussian density is log-supermodular iff every off-diagonal entry of
/// its precision matrix is non-positive; entries up to `tol` are accepted.
pub fn is_log_supermodular_gaussian(cov: &DMatrix<f64>, tol: f64) -> Result<SupermodularVerdict> {
    let p = spd_inverse(cov)?;
    let mut worst = f64::NEG_INFINITY;
    let mut at = None;
    for i in 0..p.nrows() {
        for j in (i + 1)..p.ncols() {
            if p[(i, j)] > worst {
                worst = p[(i, j)];
                at = Some((i, j));
            }
        }
    }
    if at.is_none() {
        worst = 0.0;
    }
    let holds = worst <= tol;
    Ok(SupermodularVerdict {
        holds,
        offending: if holds { None } else { at },
        max_off_diagonal: worst,
    })
}

/// Draw `n` rows from `N(mean, L Lᵀ)` given the lower factor `l`.
pub fn sample_mvn_chol(mean: &DVector<f64>, l: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
    let d = mean.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(SAMPLE_CHUNK)
        .map(|start| (start, SAMPLE_CHUNK.min(n - start)))
        .collect();
    let parts: Vec<Vec<f64>> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, &(_, len))| {
            let mut rng = rng_from(derive_seed(seed, c as u64));
            let mut out = Vec::with_capacity(len * d);
            let mut e = vec![0.0; d];
            for _ in 0..len {
                for v in e.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                for i in 0..d {
                    let mut s = mean[i];
                    for k in 0..=i {
                        s += l[(i, k)] * e[k];
                    }
                    out.push(s);
                }
            }
            out
        })
        .collect();
    let flat: Vec<f64> = parts.into_iter().flatten().collect();
    DMatrix::from_row_slice(n, d, &flat)
}

/// `n x d` sample matrix, one draw per row.
pub fn sample_mvn(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if cov.nrows() != mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "mean has length {}, cov is {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let l = cholesky(cov)?;
    Ok(sample_mvn_chol(mean, &l, n, seed))
}

/// Log density of `N(mean, cov)` at `x`, up to nothing (fully normalized).
pub fn log_density(x: &[f64], mean: &DVector<f64>, chol: &DMatrix<f64>) -> f64 {
    let d = mean.len();
    let r = DVector::from_iterator(d, x.iter().zip(mean.iter()).map(|(a, b)| a - b));
    let w = chol.solve_lower_triangular(&r).expect("factor is non-singular");
    let logdet: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>() * 2.0;
    -0.5 * (w.norm_squared() + logdet + d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Equicorrelated covariance `s2 I + t2 11ᵀ`.
pub fn equicorrelated(d: usize, s2: f64, t2: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i == j { s2 + t2 } else { t2 })
}
