//! Effect of treatment on the treated: outcome-regression estimate with a
//! bootstrap interval, and the counterfactual value on simulated models.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::propensity::{fit_logistic, FitOptions};
use crate::rng::{derive_seed, rng_from};
use crate::scm::OutcomeScm;
use crate::stats::{mean, quantile_sorted, se};

pub const DEFAULT_BOOTSTRAP_REPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EttEstimate {
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub adjustment: Vec<String>,
    pub n_treated: usize,
    pub bootstrap_reps: usize,
    /// Bootstrap standard deviation of the estimate.
    pub bootstrap_sd: f64,
}

impl EttEstimate {
    pub fn covers(&self, v: f64) -> bool {
        self.ci_lo <= v && v <= self.ci_hi
    }
}

fn point_estimate(features: &DMatrix<f64>, x: &[u8], y: &[u8], rows: &[usize]) -> Result<f64> {
    let (treated, untreated): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i] == 1);
    let pick = |idx: &[usize]| DMatrix::from_fn(idx.len(), features.ncols(), |r, c| features[(idx[r], c)]);
    let model = fit_logistic(&pick(&untreated), &untreated.iter().map(|&i| y[i]).collect::<Vec<_>>(), &FitOptions::default())?;
    let mu0 = model.predict(&pick(&treated));
    Ok(treated.iter().zip(&mu0).map(|(&i, m)| y[i] as f64 - m).sum::<f64>() / treated.len() as f64)
}

/// Fits `P(Y = 1 | adjustment)` among untreated units, averages `Y − μ̂₀`
/// over treated units, and reports a percentile interval from resampling
/// units within each arm.
pub fn estimate_ett(ds: &Dataset, adjustment: &[String], reps: usize, seed: u64) -> Result<EttEstimate> {
    let treated = ds.treated();
    let untreated = ds.untreated();
    if treated.is_empty() {
        return Err(Error::EmptyArm(1));
    }
    if untreated.is_empty() {
        return Err(Error::EmptyArm(0));
    }
    let features = ds.columns(adjustment)?;
    let all: Vec<usize> = (0..ds.n()).collect();
    let estimate = point_estimate(&features, &ds.x, &ds.y, &all)?;
    let boots: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_from(derive_seed(seed, r as u64));
            let mut rows = Vec::with_capacity(ds.n());
            for arm in [&treated, &untreated] {
                rows.extend((0..arm.len()).map(|_| arm[rng.random_range(0..arm.len())]));
            }
            point_estimate(&features, &ds.x, &ds.y, &rows)
        })
        .collect::<Result<_>>()?;
    let (mut lo, mut hi, mut sd) = (estimate, estimate, 0.0);
    if reps >= 2 {
        let mut sorted = boots.clone();
        sorted.sort_by(f64::total_cmp);
        lo = quantile_sorted(&sorted, 0.025).min(estimate);
        hi = quantile_sorted(&sorted, 0.975).max(estimate);
        sd = se(&boots) * (reps as f64).sqrt();
    }
    Ok(EttEstimate {
        estimate,
        ci_lo: lo,
        ci_hi: hi,
        adjustment: adjustment.to_vec(),
        n_treated: treated.len(),
        bootstrap_reps: reps,
        bootstrap_sd: sd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEtt {
    pub value: f64,
    pub se: f64,
    pub n_treated: usize,
}

/// Mean over simulated treated units of `P(Y=1 | z, u, x=1) − P(Y=1 | z, u, x=0)`.
pub fn true_ett<S: OutcomeScm>(scm: &S, n: usize, seed: u64) -> Result<TrueEtt> {
    let ds = scm.simulate(n, seed)?;
    let u = ds.u.as_ref().ok_or(Error::MissingOracleU)?;
    let treated = ds.treated();
    if treated.is_empty() {
        return Err(Error::EmptyArm(1));
    }
    let diffs: Vec<f64> = treated
        .par_iter()
        .map(|&i| {
            let z = ds.z_row(i);
            let ur: Vec<f64> = u.row(i).iter().copied().collect();
            scm.outcome_prob(&z, &ur, 1) - scm.outcome_prob(&z, &ur, 0)
        })
        .collect();
    Ok(TrueEtt { value: mean(&diffs), se: se(&diffs), n_treated: treated.len() })
}
