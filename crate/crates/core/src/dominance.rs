//! Empirical and analytic checks of the orderings behind the strategies:
//! upper-orthant comparisons of samples, the four-point condition on
//! densities, and cross-partial conditions for logistic-Gaussian models.
//!
//! The orthant test is a necessary-condition surrogate for the multivariate
//! stochastic order. A "reversed" or failing grid point refutes dominance;
//! passing only supports it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussmath::{log_density, sample_mvn};
use crate::rng::derive_seed;
use crate::scm::GaussianScm;
use crate::stats::{mean, quantile_sorted, se, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Dominates,
    Reversed,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthantPoint {
    pub threshold: Vec<f64>,
    pub p_a: f64,
    pub p_b: f64,
    pub diff: f64,
    pub se: f64,
}

impl OrthantPoint {
    fn z(&self) -> f64 {
        if self.se > 0.0 {
            self.diff / self.se
        } else if self.diff == 0.0 {
            0.0
        } else {
            self.diff.signum() * f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub grid: Vec<OrthantPoint>,
    pub verdict: Verdict,
    /// Grid point with the most negative standardized difference.
    pub worst: usize,
    pub n_a: usize,
    pub n_b: usize,
}

impl DominanceReport {
    pub fn worst_point(&self) -> &OrthantPoint {
        &self.grid[self.worst]
    }
}

const SCREEN_SE: f64 = 3.0;

/// Per-coordinate deciles of the pooled sample: full product grid for
/// `d <= 3`, otherwise the nine diagonal decile points plus every single-axis
/// threshold with other coordinates unconstrained.
pub fn decile_grid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let d = a.ncols();
    let deciles: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let mut v: Vec<f64> = a.column(k).iter().chain(b.column(k).iter()).copied().collect();
            v.sort_by(f64::total_cmp);
            (1..10).map(|q| quantile_sorted(&v, q as f64 / 10.0)).collect()
        })
        .collect();
    if d <= 3 {
        let mut grid = vec![Vec::new()];
        for axis in &deciles {
            grid = grid.into_iter().flat_map(|p| axis.iter().map(move |&t| [p.clone(), vec![t]].concat())).collect();
        }
        return grid;
    }
    let mut grid: Vec<Vec<f64>> = (0..9).map(|q| (0..d).map(|k| deciles[k][q]).collect()).collect();
    for k in 0..d {
        for q in 0..9 {
            let mut t = vec![f64::NEG_INFINITY; d];
            t[k] = deciles[k][q];
            grid.push(t);
        }
    }
    grid
}

fn orthant_share(m: &DMatrix<f64>, t: &[f64]) -> f64 {
    let hits = (0..m.nrows()).filter(|&i| t.iter().enumerate().all(|(k, &tk)| m[(i, k)] > tk)).count();
    hits as f64 / m.nrows() as f64
}

/// Compares `P(A > t)` and `P(B > t)` coordinatewise at each grid point.
pub fn orthant_dominance_test(a: &DMatrix<f64>, b: &DMatrix<f64>, grid: Option<Vec<Vec<f64>>>) -> Result<DominanceReport> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!("samples have {} and {} columns", a.ncols(), b.ncols())));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidArgument("samples must be non-empty".into()));
    }
    let grid = grid.unwrap_or_else(|| decile_grid(a, b));
    if grid.iter().any(|t| t.len() != a.ncols()) {
        return Err(Error::DimensionMismatch("grid point dimension differs from samples".into()));
    }
    let (na, nb) = (a.nrows() as f64, b.nrows() as f64);
    let points: Vec<OrthantPoint> = grid
        .into_par_iter()
        .map(|t| {
            let p_a = orthant_share(a, &t);
            let p_b = orthant_share(b, &t);
            let se = (p_a * (1.0 - p_a) / na + p_b * (1.0 - p_b) / nb).sqrt();
            OrthantPoint { threshold: t, p_a, p_b, diff: p_a - p_b, se }
        })
        .collect();
    let zs: Vec<f64> = points.iter().map(OrthantPoint::z).collect();
    let worst = (0..zs.len()).min_by(|&x, &y| zs[x].total_cmp(&zs[y])).unwrap_or(0);
    let up = |p: &OrthantPoint, z: f64| p.diff > 0.0 && z >= SCREEN_SE;
    let down = |p: &OrthantPoint, z: f64| p.diff < 0.0 && z <= -SCREEN_SE;
    let verdict = if zs.iter().all(|&z| z >= -SCREEN_SE) && points.iter().zip(&zs).any(|(p, &z)| up(p, z)) {
        Verdict::Dominates
    } else if zs.iter().all(|&z| z <= SCREEN_SE) && points.iter().zip(&zs).any(|(p, &z)| down(p, z)) {
        Verdict::Reversed
    } else {
        Verdict::Inconclusive
    };
    Ok(DominanceReport { grid: points, verdict, worst, n_a: a.nrows(), n_b: b.nrows() })
}

// ---------------------------------------------------------------------------
// Four-point condition.

pub const FOURPOINT_TOL: f64 = 1e-9;
pub const DEFAULT_GRID_PER_AXIS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourPointReport {
    pub holds: bool,
    /// Smallest `log f0(u∧u′) + log f1(u∨u′) − log f0(u) − log f1(u′)` over the grid.
    pub worst_margin: f64,
    pub violation: Option<(Vec<f64>, Vec<f64>)>,
    pub pairs_checked: usize,
}

/// `k` evenly spaced points on `[lo, hi]` per axis.
pub fn box_axes(lo: &[f64], hi: &[f64], k: usize) -> Vec<Vec<f64>> {
    lo.iter()
        .zip(hi)
        .map(|(&a, &b)| if k == 1 { vec![(a + b) / 2.0] } else { (0..k).map(|s| a + (b - a) * s as f64 / (k - 1) as f64).collect() })
        .collect()
}

fn product_indices(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &s in sizes {
        out = out.into_iter().flat_map(|p| (0..s).map(move |v| [p.clone(), vec![v]].concat())).collect();
    }
    out
}

/// Checks `f0(u) f1(u′) <= f0(u ∧ u′) f1(u ∨ u′)` on log scale over every
/// ordered pair of grid points. With `log_f1 = None` the same density is
/// used on both sides, which is log-supermodularity.
pub fn kr_fourpoint_check<F0, F1>(log_f0: F0, log_f1: Option<F1>, axes: &[Vec<f64>], tol: f64) -> Result<FourPointReport>
where
    F0: Fn(&[f64]) -> f64 + Sync,
    F1: Fn(&[f64]) -> f64 + Sync,
{
    if axes.iter().any(|a| a.is_empty() || a.windows(2).any(|w| !(w[0] < w[1]))) {
        return Err(Error::InvalidArgument("grid axes must be non-empty and strictly increasing".into()));
    }
    let idx = product_indices(&axes.iter().map(Vec::len).collect::<Vec<_>>());
    let point = |ix: &[usize]| -> Vec<f64> { ix.iter().zip(axes).map(|(&i, a)| a[i]).collect() };
    let eval = |ix: &[usize], which: u8| -> Result<f64> {
        let p = point(ix);
        let v = match (&log_f1, which) {
            (Some(f1), 1) => f1(&p),
            _ => log_f0(&p),
        };
        if !v.is_finite() {
            return Err(Error::NonFiniteDensity);
        }
        Ok(v)
    };
    // Densities on the grid, keyed by flat index.
    let sizes: Vec<usize> = axes.iter().map(Vec::len).collect();
    let flat = |ix: &[usize]| ix.iter().zip(&sizes).fold(0usize, |acc, (&i, &s)| acc * s + i);
    let f0: Vec<f64> = idx.par_iter().map(|ix| eval(ix, 0)).collect::<Result<_>>()?;
    let f1: Vec<f64> = if log_f1.is_some() { idx.par_iter().map(|ix| eval(ix, 1)).collect::<Result<_>>()? } else { f0.clone() };
    let worst = idx
        .par_iter()
        .map(|u| {
            let mut best = (f64::INFINITY, 0usize, 0usize);
            for v in &idx {
                let meet: Vec<usize> = u.iter().zip(v).map(|(a, b)| *a.min(b)).collect();
                let join: Vec<usize> = u.iter().zip(v).map(|(a, b)| *a.max(b)).collect();
                let m = f0[flat(&meet)] + f1[flat(&join)] - f0[flat(u)] - f1[flat(v)];
                if m < best.0 {
                    best = (m, flat(u), flat(v));
                }
            }
            best
        })
        .reduce(|| (f64::INFINITY, 0, 0), |a, b| if b.0 < a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) { b } else { a });
    let holds = worst.0 >= -tol;
    Ok(FourPointReport {
        holds,
        worst_margin: worst.0,
        violation: (!holds).then(|| (point(&idx[worst.1]), point(&idx[worst.2]))),
        pairs_checked: idx.len() * idx.len(),
    })
}

// ---------------------------------------------------------------------------
// Cross-partial conditions for logistic-Gaussian models.

pub const FD_STEP: f64 = 1e-4;
pub const CONDITION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Derivatives {
    ClosedForm,
    FiniteDifference,
}

/// Mixed second derivative `∂²f/∂x_a∂x_b` by central differences.
pub fn mixed_partial<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], a: usize, b: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut at = |da: f64, db: f64| {
        p.copy_from_slice(x);
        p[a] += da;
        p[b] += db;
        f(&p)
    };
    (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub x: u8,
    pub method: Derivatives,
    pub grid_points: usize,
    /// Minimum over the grid and `j != k` of `∂²log h/∂u_j∂u_k` (must be `>= -tol`).
    pub uu_min: f64,
    pub uu_argmin: Vec<f64>,
    /// Maximum over the grid of `∂²log h/∂z_l∂u_j` (must be `<= tol`).
    pub zu_max: f64,
    pub zu_argmax: Vec<f64>,
    pub uu_holds: bool,
    pub zu_holds: bool,
    /// Share of grid points where the across-Z-U inequality fails.
    pub zu_fail_share: f64,
    /// Bounding box `(lo, hi)` of the failing points, if any.
    pub zu_fail_region: Option<(Vec<f64>, Vec<f64>)>,
}

impl ConditionReport {
    pub fn holds(&self) -> bool {
        self.uu_holds && self.zu_holds
    }
}

/// `log P(X = x | z, u) + log P(u | z)` at `w = (z, u)`.
pub fn log_h(scm: &GaussianScm, x: u8, w: &[f64]) -> f64 {
    let (z, u) = w.split_at(scm.dz());
    let eta = scm.logit(z, u);
    let lp = if x == 1 { -crate::stats::softplus(-eta) } else { -crate::stats::softplus(eta) };
    lp + log_density(u, &scm.cond.mean_at(z), &scm.cond.chol)
}

/// Cross-partials of `log h` at one point: the `(u_j, u_k)` block for
/// `j < k` and the full `(z_l, u_j)` block.
fn cross_partials(scm: &GaussianScm, x: u8, w: &[f64], method: Derivatives, prec: &DMatrix<f64>, pa: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let (dz, du) = (scm.dz(), scm.du());
    match method {
        Derivatives::ClosedForm => {
            let (z, u) = w.split_at(dz);
            let s = sigmoid(scm.logit(z, u));
            let v = s * (1.0 - s);
            let (beta, gamma) = (scm.beta(), scm.gamma());
            let mut uu = Vec::new();
            for j in 0..du {
                for k in j + 1..du {
                    uu.push(-gamma[j] * gamma[k] * v - prec[(j, k)]);
                }
            }
            let mut zu = Vec::with_capacity(dz * du);
            for l in 0..dz {
                for j in 0..du {
                    zu.push(-beta[l] * gamma[j] * v + pa[(j, l)]);
                }
            }
            (uu, zu)
        }
        Derivatives::FiniteDifference => {
            let f = |p: &[f64]| log_h(scm, x, p);
            let mut uu = Vec::new();
            for j in 0..du {
                for k in j + 1..du {
                    uu.push(mixed_partial(&f, w, dz + j, dz + k, FD_STEP));
                }
            }
            let mut zu = Vec::with_capacity(dz * du);
            for l in 0..dz {
                for j in 0..du {
                    zu.push(mixed_partial(&f, w, l, dz + j, FD_STEP));
                }
            }
            (uu, zu)
        }
    }
}

/// Cross-partials of `log h` at `w = (z, u)`: `(u_j, u_k)` for `j < k` in
/// row order, then `(z_l, u_j)` with `l` outer.
pub fn cross_partials_at(scm: &GaussianScm, x: u8, w: &[f64], method: Derivatives) -> Result<(Vec<f64>, Vec<f64>)> {
    if w.len() != scm.dz() + scm.du() {
        return Err(Error::DimensionMismatch(format!("point has {} coordinates", w.len())));
    }
    let prec = scm.cond.precision()?;
    let pa = &prec * &scm.cond.a;
    Ok(cross_partials(scm, x, w, method, &prec, &pa))
}

/// Evaluates both cross-partial inequalities on a product grid over the
/// box `[lo, hi]` in `(z, u)` coordinates (`grid` points per axis).
pub fn zdom_condition_check(scm: &GaussianScm, x: u8, lo: &[f64], hi: &[f64], grid: usize, method: Derivatives) -> Result<ConditionReport> {
    let dim = scm.dz() + scm.du();
    if lo.len() != dim || hi.len() != dim {
        return Err(Error::DimensionMismatch(format!("box has {} / {} coordinates, model has {dim}", lo.len(), hi.len())));
    }
    let prec = scm.cond.precision()?;
    let pa = &prec * &scm.cond.a;
    let axes = box_axes(lo, hi, grid.max(1));
    let idx = product_indices(&vec![axes[0].len(); dim]);
    let evals: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = idx
        .par_iter()
        .map(|ix| {
            let w: Vec<f64> = ix.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
            let (uu, zu) = cross_partials(scm, x, &w, method, &prec, &pa);
            (w, uu, zu)
        })
        .collect();
    let mut uu_min = (f64::INFINITY, Vec::new());
    let mut zu_max = (f64::NEG_INFINITY, Vec::new());
    let mut fails = 0usize;
    let mut region: Option<(Vec<f64>, Vec<f64>)> = None;
    for (w, uu, zu) in &evals {
        let m = uu.iter().copied().fold(f64::INFINITY, f64::min);
        if m < uu_min.0 {
            uu_min = (m, w.clone());
        }
        let mx = zu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if mx > zu_max.0 {
            zu_max = (mx, w.clone());
        }
        if mx > CONDITION_TOL {
            fails += 1;
            region = Some(match region {
                None => (w.clone(), w.clone()),
                Some((l, h)) => (
                    l.iter().zip(w).map(|(a, b)| a.min(*b)).collect(),
                    h.iter().zip(w).map(|(a, b)| a.max(*b)).collect(),
                ),
            });
        }
    }
    // With d_U = 1 there are no within-U pairs.
    let uu_min_v = if uu_min.0.is_finite() { uu_min.0 } else { 0.0 };
    let zu_max_v = if zu_max.0.is_finite() { zu_max.0 } else { 0.0 };
    Ok(ConditionReport {
        x,
        method,
        grid_points: evals.len(),
        uu_min: uu_min_v,
        uu_argmin: uu_min.1,
        zu_max: zu_max_v,
        zu_argmax: zu_max.1,
        uu_holds: uu_min_v >= -CONDITION_TOL,
        zu_holds: fails == 0,
        zu_fail_share: fails as f64 / evals.len() as f64,
        zu_fail_region: region,
    })
}

/// Symmetric box `mean ± k·sd` over `(z, u)`.
pub fn sd_box(scm: &GaussianScm, k: f64) -> (Vec<f64>, Vec<f64>) {
    let j = &scm.spec.joint;
    let lo = (0..j.dim()).map(|i| j.mean[i] - k * j.cov[(i, i)].sqrt()).collect();
    let hi = (0..j.dim()).map(|i| j.mean[i] + k * j.cov[(i, i)].sqrt()).collect();
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "region", content = "s", rename_all = "snake_case")]
pub enum BoundaryRegion {
    /// Decision boundary, `σ = 1/2`.
    Boundary,
    /// A point where the propensity equals `s`.
    Level(f64),
}

pub const BISECTION_TOL: f64 = 1e-10;

/// Largest correlation satisfying `ρ/(1−ρ²) <= βγ·s(1−s)` in the 1-d logistic-Gaussian model.
pub fn logistic_gaussian_boundary(beta_gamma: f64, region: BoundaryRegion) -> Result<f64> {
    if !(beta_gamma > 0.0) {
        return Err(Error::InvalidArgument("beta*gamma must be > 0".into()));
    }
    let s = match region {
        BoundaryRegion::Boundary => 0.5,
        BoundaryRegion::Level(s) if (0.0..=1.0).contains(&s) => s,
        BoundaryRegion::Level(s) => return Err(Error::InvalidArgument(format!("level {s} outside [0, 1]"))),
    };
    let target = beta_gamma * s * (1.0 - s);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if mid / (1.0 - mid * mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Propensity-level analogue.

pub const PI_WINDOW: f64 = 0.005;
const KERNEL_REACH: f64 = 4.0;
const MIN_LEVEL_SET: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiDomConfig {
    pub x: u8,
    pub p_grid: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub u_grid: usize,
    /// Gaussian kernel bandwidth on the propensity scale.
    pub window: f64,
    pub n_pop: usize,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiDomPoint {
    pub p: f64,
    pub u: Vec<f64>,
    /// `∂²log h/∂u_j∂u_k`, `j < k`: mean and SE across replicate populations.
    pub uu: Vec<(f64, f64)>,
    /// `∂²log h/∂p∂u_j`.
    pub pu: Vec<(f64, f64)>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiDomReport {
    pub config: PiDomConfig,
    pub points: Vec<PiDomPoint>,
    pub holds: bool,
    pub min_level_set: usize,
}

/// Population draw reduced to what `h_π` needs: propensity, observed logit
/// part and conditional mean of U per unit.
struct LevelPopulation {
    pi: Vec<f64>,
    eta_z: Vec<f64>,
    mu: Vec<DVector<f64>>,
}

impl LevelPopulation {
    fn draw(scm: &GaussianScm, n: usize, seed: u64) -> Result<Self> {
        let j = &scm.spec.joint;
        let dz = scm.dz();
        let zs = sample_mvn(&j.mean_z(), &j.sigma_z(), n, seed)?;
        let method = crate::propensity::Marginalization::default();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| zs.row(i).iter().copied().collect()).collect();
        let pi: Vec<f64> = rows.par_iter().map(|z| crate::propensity::true_propensity_z(scm, z, method)).collect();
        let eta_z = rows.iter().map(|z| scm.alpha() + (0..dz).map(|l| scm.beta()[l] * z[l]).sum::<f64>()).collect();
        let mu = rows.iter().map(|z| scm.cond.mean_at(z)).collect();
        Ok(Self { pi, eta_z, mu })
    }
}

/// `log Σ_i K((π_i − p)/bw) P(X=x | z_i, u) φ(u; μ_i, Σ_{U|Z})` up to a constant.
fn log_h_pi(scm: &GaussianScm, pop: &LevelPopulation, near: &[usize], x: u8, p: f64, u: &[f64], bw: f64, prec: &DMatrix<f64>) -> f64 {
    let gu: f64 = scm.gamma().iter().zip(u).map(|(g, v)| g * v).sum();
    let du = u.len();
    let terms: Vec<f64> = near
        .iter()
        .map(|&i| {
            let t = (pop.pi[i] - p) / bw;
            let eta = pop.eta_z[i] + gu;
            let lp = if x == 1 { -crate::stats::softplus(-eta) } else { -crate::stats::softplus(eta) };
            let mut q = 0.0;
            for a in 0..du {
                for b in 0..du {
                    q += (u[a] - pop.mu[i][a]) * prec[(a, b)] * (u[b] - pop.mu[i][b]);
                }
            }
            -0.5 * t * t + lp - 0.5 * q
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Cross-partials of the level-set-marginalized `log h_π(p, u)` on a
/// `(p, u)` grid, with SEs from independent replicate populations.
pub fn pi_dom_condition_check(scm: &GaussianScm, cfg: &PiDomConfig) -> Result<PiDomReport> {
    let du = scm.du();
    if cfg.u_lo.len() != du || cfg.u_hi.len() != du {
        return Err(Error::DimensionMismatch("u box does not match d_U".into()));
    }
    if cfg.reps < 2 || !(cfg.window > 0.0) {
        return Err(Error::InvalidArgument("need reps >= 2 and a positive window".into()));
    }
    let prec = scm.cond.precision()?;
    let u_axes = box_axes(&cfg.u_lo, &cfg.u_hi, cfg.u_grid.max(1));
    let u_points: Vec<Vec<f64>> = product_indices(&vec![u_axes[0].len(); du])
        .into_iter()
        .map(|ix| ix.iter().zip(&u_axes).map(|(&i, a)| a[i]).collect())
        .collect();
    let h = FD_STEP;
    let pops: Vec<LevelPopulation> =
        (0..cfg.reps).map(|r| LevelPopulation::draw(scm, cfg.n_pop, derive_seed(cfg.seed, r as u64))).collect::<Result<_>>()?;
    let reach = KERNEL_REACH * cfg.window + h;
    let mut min_level = usize::MAX;
    let mut points = Vec::new();
    for &p in &cfg.p_grid {
        let near: Vec<Vec<usize>> = pops.iter().map(|pop| (0..pop.pi.len()).filter(|&i| (pop.pi[i] - p).abs() <= reach).collect()).collect();
        let inner = pops
            .iter()
            .map(|pop| pop.pi.iter().filter(|v| (**v - p).abs() <= cfg.window).count())
            .min()
            .unwrap_or(0);
        if inner < MIN_LEVEL_SET {
            return Err(Error::LevelSetEmpty(p));
        }
        min_level = min_level.min(inner);
        let rows: Vec<PiDomPoint> = u_points
            .par_iter()
            .map(|u| {
                // Per replicate: uu pairs then pu entries.
                let per_rep: Vec<Vec<f64>> = pops
                    .iter()
                    .zip(&near)
                    .map(|(pop, nr)| {
                        let f = |w: &[f64]| log_h_pi(scm, pop, nr, cfg.x, w[0], &w[1..], cfg.window, &prec);
                        let w: Vec<f64> = std::iter::once(p).chain(u.iter().copied()).collect();
                        let mut out = Vec::new();
                        for j in 0..du {
                            for k in j + 1..du {
                                out.push(mixed_partial(&f, &w, 1 + j, 1 + k, h));
                            }
                        }
                        for j in 0..du {
                            out.push(mixed_partial(&f, &w, 0, 1 + j, h));
                        }
                        out
                    })
                    .collect();
                let stat = |c: usize| {
                    let v: Vec<f64> = per_rep.iter().map(|r| r[c]).collect();
                    (mean(&v), se(&v))
                };
                let n_uu = du * (du - 1) / 2;
                let uu: Vec<(f64, f64)> = (0..n_uu).map(stat).collect();
                let pu: Vec<(f64, f64)> = (n_uu..n_uu + du).map(stat).collect();
                let holds = uu.iter().all(|(m, s)| *m >= -CONDITION_TOL - SCREEN_SE * s)
                    && pu.iter().all(|(m, s)| *m <= CONDITION_TOL + SCREEN_SE * s);
                PiDomPoint { p, u: u.clone(), uu, pu, holds }
            })
            .collect();
        points.extend(rows);
    }
    let holds = points.iter().all(|p| p.holds);
    Ok(PiDomReport { config: cfg.clone(), points, holds, min_level_set: min_level })
}
