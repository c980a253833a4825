//! Logistic propensity models fitted by IRLS, out-of-fold prediction, and the
//! marginal propensity `π(z) = P(X = 1 | Z = z)` of a Gaussian SCM.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::column_moments;
use crate::error::{Error, Result};
use crate::gaussmath::cholesky;
use crate::rng::{derive_seed, rng_from};
use crate::scm::{dot, GaussianScm};
use crate::stats::{sigmoid, softplus};

pub const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub standardize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { ridge: 1e-6, max_iter: 100, tol: 1e-8, standardize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Intercept followed by one slope per feature, on the standardized scale.
    pub coef_std: Vec<f64>,
    /// Same model expressed on the raw feature scale.
    pub coef: Vec<f64>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub ridge: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Penalized negative log-likelihood at the start and after every iteration.
    pub loss_trace: Vec<f64>,
}

impl LogisticModel {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.coef[0] + dot(&self.coef[1..], row)
    }

    /// Kept inside the open unit interval even when the logit saturates in `f64`.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(row)).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Vec<f64> {
        (0..features.nrows())
            .map(|i| {
                let row: Vec<f64> = features.row(i).iter().copied().collect();
                self.predict_row(&row)
            })
            .collect()
    }
}

fn penalized_loss(design: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = design * beta;
    let nll: f64 = eta.iter().zip(y).map(|(e, yi)| softplus(*e) - yi * e).sum();
    nll + 0.5 * ridge * beta.rows(1, beta.len() - 1).norm_squared()
}

/// Ridge-penalized logistic regression by Newton/IRLS with step halving.
/// The intercept is not penalized.
pub fn fit_logistic(features: &DMatrix<f64>, labels: &[u8], opts: &FitOptions) -> Result<LogisticModel> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} rows but {} labels", labels.len())));
    }
    let ones = labels.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == n {
        return Err(Error::DegenerateLabels);
    }
    let (center, scale) = if opts.standardize {
        column_moments(features)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let design = DMatrix::from_fn(n, d + 1, |i, k| if k == 0 { 1.0 } else { (features[(i, k - 1)] - center[k - 1]) / scale[k - 1] });
    let y: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
    let ybar = ones as f64 / n as f64;
    let mut beta = DVector::zeros(d + 1);
    beta[0] = (ybar / (1.0 - ybar)).ln();
    let mut loss = penalized_loss(&design, &y, &beta, opts.ridge);
    let mut trace = vec![loss];
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let eta = &design * &beta;
        let p: Vec<f64> = eta.iter().map(|e| sigmoid(*e)).collect();
        let w: Vec<f64> = p.iter().map(|pi| (pi * (1.0 - pi)).max(1e-12)).collect();
        let resid = DVector::from_iterator(n, p.iter().zip(&y).map(|(pi, yi)| pi - yi));
        let mut grad = design.transpose() * resid;
        let mut hess = DMatrix::zeros(d + 1, d + 1);
        for i in 0..n {
            let row = design.row(i);
            for a in 0..=d {
                let ra = row[a] * w[i];
                for b in 0..=a {
                    hess[(a, b)] += ra * row[b];
                }
            }
        }
        for a in 0..=d {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        for k in 1..=d {
            grad[k] += opts.ridge * beta[k];
            hess[(k, k)] += opts.ridge;
        }
        let l = cholesky(&hess).map_err(|_| Error::SingularHessian(iterations))?;
        let step = l
            .solve_lower_triangular(&grad)
            .and_then(|v| l.transpose().solve_upper_triangular(&v))
            .ok_or(Error::SingularHessian(iterations))?;
        let mut t = 1.0;
        let mut candidate = &beta - &step * t;
        let mut new_loss = penalized_loss(&design, &y, &candidate, opts.ridge);
        let mut halvings = 0;
        while !(new_loss <= loss) && halvings < 40 {
            t *= 0.5;
            candidate = &beta - &step * t;
            new_loss = penalized_loss(&design, &y, &candidate, opts.ridge);
            halvings += 1;
        }
        if !(new_loss <= loss) {
            // No descent along the Newton direction: already at the optimum to machine precision.
            trace.push(loss);
            converged = true;
            break;
        }
        let rel = (0..=d)
            .map(|k| (candidate[k] - beta[k]).abs() / beta[k].abs().max(1.0))
            .fold(0.0, f64::max);
        beta = candidate;
        loss = new_loss;
        trace.push(loss);
        if rel < opts.tol {
            converged = true;
            break;
        }
    }
    let coef_std: Vec<f64> = beta.iter().copied().collect();
    let mut coef = vec![0.0; d + 1];
    coef[0] = coef_std[0];
    for k in 0..d {
        coef[k + 1] = coef_std[k + 1] / scale[k];
        coef[0] -= coef_std[k + 1] * center[k] / scale[k];
    }
    Ok(LogisticModel { coef_std, coef, center, scale, ridge: opts.ridge, converged, iterations, loss_trace: trace })
}

pub const FOLD_ATTEMPTS: usize = 10;

/// Fold label per unit: seeded shuffle, then round-robin. Retries until every
/// training complement contains both classes.
pub fn fold_assignment(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("need 2 <= k <= n, got k = {k}, n = {n}")));
    }
    let total_ones = labels.iter().filter(|&&v| v == 1).count();
    for attempt in 0..FOLD_ATTEMPTS {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(derive_seed(seed, attempt as u64)));
        let mut fold = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            fold[i] = pos % k;
        }
        let mut ones = vec![0usize; k];
        let mut sizes = vec![0usize; k];
        for i in 0..n {
            sizes[fold[i]] += 1;
            ones[fold[i]] += labels[i] as usize;
        }
        let ok = (0..k).all(|f| {
            let train_n = n - sizes[f];
            let train_ones = total_ones - ones[f];
            train_ones > 0 && train_ones < train_n
        });
        if ok {
            return Ok(fold);
        }
    }
    Err(Error::FoldDegenerate(FOLD_ATTEMPTS))
}

/// Out-of-fold predicted propensities: each unit is scored by the model fitted on the other folds.
pub fn cv_predict(features: &DMatrix<f64>, labels: &[u8], k: usize, seed: u64, opts: &FitOptions) -> Result<Vec<f64>> {
    let n = features.nrows();
    let fold = fold_assignment(labels, k, seed)?;
    let preds: Vec<Vec<(usize, f64)>> = (0..k)
        .into_par_iter()
        .map(|f| -> Result<Vec<(usize, f64)>> {
            let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
            let xt = features.select_rows(&train);
            let yt: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
            let model = fit_logistic(&xt, &yt, opts)?;
            Ok(test
                .iter()
                .map(|&i| {
                    let row: Vec<f64> = features.row(i).iter().copied().collect();
                    (i, model.predict_row(&row))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out = vec![f64::NAN; n];
    for (i, p) in preds.into_iter().flatten() {
        out[i] = p;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "nodes", rename_all = "snake_case")]
pub enum Marginalization {
    /// Integrates over the scalar `γᵀU | z`, which is Gaussian; trapezoid rule on ±12 sd.
    Projection,
    /// Tensor Gauss–Hermite grid over all of `U`.
    GaussHermite(usize),
}

impl Default for Marginalization {
    fn default() -> Self {
        Marginalization::Projection
    }
}

/// Nodes and weights for `∫ f(x) e^{-x²} dx` via Golub–Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

const PROJ_HALF_WIDTH: f64 = 12.0;
const PROJ_STEP: f64 = 0.05;

/// `π(z) = E[σ(α + βᵀz + γᵀU) | Z = z]`.
pub fn true_propensity_z(scm: &GaussianScm, z: &[f64], method: Marginalization) -> f64 {
    let base = scm.alpha() + dot(scm.beta(), z);
    let mu = scm.cond.mean_at(z);
    let gamma = DVector::from_column_slice(scm.gamma());
    let m = gamma.dot(&mu);
    let var = (scm.cond.cov.clone() * &gamma).dot(&gamma);
    if var <= 0.0 {
        return sigmoid(base + m);
    }
    match method {
        Marginalization::Projection => {
            let s = var.sqrt();
            let steps = (2.0 * PROJ_HALF_WIDTH / PROJ_STEP).round() as usize;
            let mut acc = 0.0;
            for i in 0..=steps {
                let t = -PROJ_HALF_WIDTH + PROJ_STEP * i as f64;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                acc += w * (-0.5 * t * t).exp() * sigmoid(base + m + s * t);
            }
            acc * PROJ_STEP / (2.0 * std::f64::consts::PI).sqrt()
        }
        Marginalization::GaussHermite(nodes) => {
            let (x, w) = gauss_hermite(nodes);
            let du = scm.du();
            let l = &scm.cond.chol;
            let lg = l.transpose() * &gamma;
            let total = nodes.pow(du as u32);
            let mut acc = 0.0;
            for idx in 0..total {
                let mut t = idx;
                let mut weight = 1.0;
                let mut shift = 0.0;
                for k in 0..du {
                    let a = t % nodes;
                    t /= nodes;
                    weight *= w[a];
                    shift += lg[k] * std::f64::consts::SQRT_2 * x[a];
                }
                acc += weight * sigmoid(base + m + shift);
            }
            acc / std::f64::consts::PI.powf(du as f64 / 2.0)
        }
    }
}
