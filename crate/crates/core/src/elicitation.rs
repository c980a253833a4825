//! Candidate extraction for a pair, the uniform single-selection model, and
//! the AUC-based summaries (κ and the linearized utility).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matching::Pair;
use crate::rng::{counter_uniform, derive_path};
use crate::stats::midranks;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extraction {
    Perfect,
    Noisy { hallucination_rate: f64, omission_rate: f64, seed: u64 },
}

/// Variables an annotator puts forward for pair `(i, j)`, in column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub i: usize,
    pub j: usize,
    pub observed: Vec<String>,
    pub unobserved: Vec<String>,
    pub provenance: Extraction,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.observed.is_empty() && self.unobserved.is_empty()
    }

    pub fn len(&self) -> usize {
        self.observed.len() + self.unobserved.len()
    }
}

/// Strict exceedance indicators `Z_i > Z_j` and `U_i > U_j`.
fn exceedance(ds: &Dataset, i: usize, j: usize) -> Result<(Vec<bool>, Vec<bool>)> {
    let u = ds.u.as_ref().ok_or(Error::MissingOracleU)?;
    let zi = (0..ds.dz()).map(|k| ds.z[(i, k)] > ds.z[(j, k)]).collect();
    let ui = (0..ds.du()).map(|l| u[(i, l)] > u[(j, l)]).collect();
    Ok((zi, ui))
}

fn check_index(ds: &Dataset, i: usize, j: usize) -> Result<()> {
    if i >= ds.n() || j >= ds.n() {
        return Err(Error::InvalidArgument(format!("pair ({i}, {j}) outside 0..{}", ds.n())));
    }
    Ok(())
}

pub fn extract_perfect(ds: &Dataset, i: usize, j: usize) -> Result<CandidateSet> {
    check_index(ds, i, j)?;
    let (zx, ux) = exceedance(ds, i, j)?;
    let pick = |flags: &[bool], names: &[String]| -> Vec<String> {
        flags.iter().zip(names).filter(|(f, _)| **f).map(|(_, n)| n.clone()).collect()
    };
    Ok(CandidateSet {
        i,
        j,
        observed: pick(&zx, &ds.z_names),
        unobserved: pick(&ux, &ds.u_names),
        provenance: Extraction::Perfect,
    })
}

/// Perfect extraction with independent omissions of genuine candidates and
/// hallucinations of non-candidates. Variable `k` (Z columns first, then U)
/// of pair `(i, j)` uses the counter draw `(seed, i, j, k)`.
pub fn extract_noisy(ds: &Dataset, i: usize, j: usize, hallucination_rate: f64, omission_rate: f64, seed: u64) -> Result<CandidateSet> {
    for r in [hallucination_rate, omission_rate] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("rate {r} outside [0, 1]")));
        }
    }
    check_index(ds, i, j)?;
    let (zx, ux) = exceedance(ds, i, j)?;
    let stream = derive_path(seed, &[i as u64, j as u64]);
    let keep = |k: usize, genuine: bool| -> bool {
        let v = counter_uniform(stream, k as u64, 0);
        if genuine { v >= omission_rate } else { v < hallucination_rate }
    };
    let observed = zx.iter().enumerate().filter(|(k, g)| keep(*k, **g)).map(|(k, _)| ds.z_names[k].clone()).collect();
    let dz = ds.dz();
    let unobserved = ux.iter().enumerate().filter(|(l, g)| keep(dz + *l, **g)).map(|(l, _)| ds.u_names[l].clone()).collect();
    Ok(CandidateSet {
        i,
        j,
        observed,
        unobserved,
        provenance: Extraction::Noisy { hallucination_rate, omission_rate, seed },
    })
}

/// Probability the annotator picks an unobserved variable, and whether the set was empty.
pub fn selection_probability(c: &CandidateSet) -> (f64, bool) {
    if c.is_empty() {
        return (0.0, true);
    }
    (c.unobserved.len() as f64 / c.len() as f64, false)
}

pub fn success_probability(n: usize, d: usize) -> f64 {
    if n + d == 0 { 0.0 } else { n as f64 / (n + d) as f64 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationOutcome {
    pub i: usize,
    pub j: usize,
    /// Unobserved drivers: hidden columns with `U_i > U_j`.
    pub n: usize,
    /// Observed competitors: covariates with `Z_i > Z_j`.
    pub d: usize,
    pub p_select_unobserved: f64,
    /// Probability the selected variable is a genuine driver.
    pub p_accurate: f64,
    pub lambda: f64,
    /// Candidate set was empty; `lambda` and the probabilities are 0.
    pub empty: bool,
}

pub fn evaluate_pair(ds: &Dataset, c: &CandidateSet) -> Result<ElicitationOutcome> {
    let (zx, ux) = exceedance(ds, c.i, c.j)?;
    let n = ux.iter().filter(|f| **f).count();
    let d = zx.iter().filter(|f| **f).count();
    let (p_sel, empty) = selection_probability(c);
    let genuine = c
        .unobserved
        .iter()
        .filter(|name| ds.u_names.iter().position(|u| u == *name).is_some_and(|l| ux[l]))
        .count();
    let p_accurate = if empty { 0.0 } else { genuine as f64 / c.len() as f64 };
    Ok(ElicitationOutcome { i: c.i, j: c.j, n, d, p_select_unobserved: p_sel, p_accurate, lambda: success_probability(n, d), empty })
}

/// Perfect-extraction outcomes for each pair, in input order.
pub fn evaluate_pairs(ds: &Dataset, pairs: &[Pair]) -> Result<Vec<ElicitationOutcome>> {
    if ds.u.is_none() {
        return Err(Error::MissingOracleU);
    }
    pairs.par_iter().map(|p| extract_perfect(ds, p.i, p.j).and_then(|c| evaluate_pair(ds, &c))).collect()
}

pub fn write_outcomes_csv(path: &Path, outcomes: &[ElicitationOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for o in outcomes {
        w.serialize(o)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_outcomes_csv(path: &Path) -> Result<Vec<ElicitationOutcome>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `P(V_i > V_j) + P(V_i = V_j)/2` for treated `i`, untreated `j`, via midranks.
pub fn auc_sel(values: &[f64], treatment: &[u8]) -> Result<f64> {
    if values.len() != treatment.len() {
        return Err(Error::DimensionMismatch(format!("{} values, {} labels", values.len(), treatment.len())));
    }
    let n1 = treatment.iter().filter(|&&t| t == 1).count();
    let n0 = treatment.len() - n1;
    if n1 == 0 {
        return Err(Error::EmptyArm(1));
    }
    if n0 == 0 {
        return Err(Error::EmptyArm(0));
    }
    let ranks = midranks(values);
    let r1: f64 = ranks.iter().zip(treatment).filter(|(_, t)| **t == 1).map(|(r, _)| r).sum();
    let (n1, n0) = (n1 as f64, n0 as f64);
    Ok((r1 - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

pub fn utility_alpha(mean_n: f64, mean_d: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be > 0".into()));
    }
    Ok(mean_n - alpha * mean_d)
}

pub const KAPPA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub auc_z: Vec<f64>,
    pub auc_u: Vec<f64>,
}

impl AucSummary {
    pub fn excess_z(&self) -> f64 {
        self.auc_z.iter().map(|a| a - 0.5).sum()
    }

    pub fn excess_u(&self) -> f64 {
        self.auc_u.iter().map(|a| a - 0.5).sum()
    }

    pub fn kappa(&self) -> Result<f64> {
        let den = self.excess_z();
        if !(den > KAPPA_FLOOR) {
            return Err(Error::DegenerateDenominator(den));
        }
        Ok(self.excess_u() / den)
    }
}

pub fn auc_summary(ds: &Dataset) -> Result<AucSummary> {
    let u = ds.u.as_ref().ok_or(Error::MissingOracleU)?;
    let col = |m: &nalgebra::DMatrix<f64>, k: usize| -> Vec<f64> { m.column(k).iter().copied().collect() };
    let auc_z = (0..ds.dz()).into_par_iter().map(|k| auc_sel(&col(&ds.z, k), &ds.x)).collect::<Result<_>>()?;
    let auc_u = (0..ds.du()).into_par_iter().map(|l| auc_sel(&col(u, l), &ds.x)).collect::<Result<_>>()?;
    Ok(AucSummary { auc_z, auc_u })
}

/// Ratio of excess hidden AUC mass to excess observed AUC mass.
pub fn kappa(ds: &Dataset) -> Result<f64> {
    auc_summary(ds)?.kappa()
}
