//! Desk-scale experiment drivers: the two dominance panels, the κ sweep,
//! budget curves and propensity-gap strata. Each run yields an
//! [`ExperimentReport`] that embeds its configuration and model hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::elicitation::{auc_summary, evaluate_pairs, ElicitationOutcome};
use crate::error::{Error, Result};
use crate::matching::{propose, Pair, StrategyConfig, StrategyKind};
use crate::propensity::{cv_predict, true_propensity_z, FitOptions, Marginalization};
use crate::rng::{derive_path, rng_from};
use crate::scm::{build_panel_scm, rejection_sample_u, simulate, spec_hash, CrossCov, DEFAULT_PROPOSAL_CAP};
use crate::stats::{mean, ols_slope, sd, spearman};

pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub series: String,
    pub x: f64,
    pub estimate: f64,
    pub se: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub n: usize,
}

impl CurvePoint {
    /// Mean of replicate values with a normal 95% interval from their spread.
    pub fn from_reps(series: &str, x: f64, values: &[f64]) -> Self {
        let m = mean(values);
        if values.len() < 2 {
            return Self { series: series.into(), x, estimate: m, se: None, lo: None, hi: None, n: values.len() };
        }
        let se = sd(values) / (values.len() as f64).sqrt();
        Self { series: series.into(), x, estimate: m, se: Some(se), lo: Some(m - Z95 * se), hi: Some(m + Z95 * se), n: values.len() }
    }

    pub fn se_or_zero(&self) -> f64 {
        self.se.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub scm_hash: String,
    pub seed: u64,
    pub reps: usize,
    pub points: Vec<CurvePoint>,
    pub summary: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub wall_clock_secs: f64,
    pub outputs: Vec<String>,
}

impl ExperimentReport {
    fn new<C: Serialize>(experiment: &str, config: &C, scm_hash: String, seed: u64, reps: usize) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        let config_hash = spec_hash(&(experiment, &config));
        Self {
            experiment: experiment.into(),
            config,
            config_hash,
            scm_hash,
            seed,
            reps,
            points: Vec::new(),
            summary: BTreeMap::new(),
            notes: Vec::new(),
            wall_clock_secs: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn series(&self, name: &str) -> Vec<&CurvePoint> {
        self.points.iter().filter(|p| p.series == name).collect()
    }

    pub fn point(&self, name: &str, x: f64) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.series == name && p.x == x)
    }

    /// Hash of the report with timing and output paths blanked.
    pub fn fingerprint(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        r.outputs.clear();
        spec_hash(&r)
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-{}", self.experiment, &self.config_hash[..12]))
    }

    /// Writes `curves.csv` and `report.json` under the run directory.
    pub fn write(&mut self, root: &Path) -> Result<PathBuf> {
        let dir = self.run_dir(root);
        std::fs::create_dir_all(&dir)?;
        let csv_path = dir.join("curves.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["series", "x", "estimate", "se", "lo", "hi", "n"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for p in &self.points {
            w.write_record([
                p.series.clone(),
                format!("{:?}", p.x),
                format!("{:?}", p.estimate),
                opt(p.se),
                opt(p.lo),
                opt(p.hi),
                p.n.to_string(),
            ])?;
        }
        w.flush()?;
        let json_path = dir.join("report.json");
        self.outputs = vec![csv_path.display().to_string(), json_path.display().to_string()];
        std::fs::write(&json_path, serde_json::to_vec_pretty(self)?)?;
        Ok(dir)
    }
}

// ---------------------------------------------------------------------------
// Z-dominance panels.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelZdomConfig {
    pub rho: f64,
    pub delta_grid: Vec<f64>,
    pub n_pairs: usize,
    pub reps: usize,
    pub seed: u64,
    pub proposal_cap: u64,
}

impl Default for PanelZdomConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            delta_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5],
            n_pairs: 20_000,
            reps: 20,
            seed: 0,
            proposal_cap: DEFAULT_PROPOSAL_CAP,
        }
    }
}

/// Share of pairs with at least one hidden coordinate where row `i` of `a` exceeds row `i` of `b`.
fn share_any_exceed(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    let hits = (0..a.nrows()).filter(|&i| (0..a.ncols()).any(|l| a[(i, l)] > b[(i, l)])).count();
    hits as f64 / a.nrows() as f64
}

/// `E[A]` for treated units at `z′ = −δ·1` against untreated units at `z = 0`.
/// Both strategies have no observed competitors, so `A = 1{N >= 1}`; the
/// Z-match curve is the δ = 0 point repeated.
pub fn run_panel_zdom(cfg: &PanelZdomConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let scm = build_panel_scm(CrossCov::RhoIdentity(cfg.rho), &[1.0; 3], &[1.0; 3])?;
    let mut report = ExperimentReport::new("panel_zdom", cfg, scm.spec_hash(), cfg.seed, cfg.reps);
    let dz = scm.dz();
    let mut grid = cfg.delta_grid.clone();
    if !grid.contains(&0.0) {
        grid.insert(0, 0.0);
    }
    let per_delta: Vec<Vec<f64>> = grid
        .iter()
        .enumerate()
        .map(|(di, &delta)| {
            (0..cfg.reps)
                .into_par_iter()
                .map(|r| {
                    let zi = vec![-delta; dz];
                    let a = rejection_sample_u(&scm, &zi, 1, cfg.n_pairs, derive_path(cfg.seed, &[di as u64, r as u64, 1]), cfg.proposal_cap)?;
                    let b = rejection_sample_u(&scm, &vec![0.0; dz], 0, cfg.n_pairs, derive_path(cfg.seed, &[di as u64, r as u64, 0]), cfg.proposal_cap)?;
                    Ok(share_any_exceed(&a.samples, &b.samples))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let zero = grid.iter().position(|&d| d == 0.0).expect("grid has 0");
    for (k, &delta) in grid.iter().enumerate() {
        if !cfg.delta_grid.contains(&delta) && delta == 0.0 {
            continue;
        }
        report.points.push(CurvePoint::from_reps("z_dom", delta, &per_delta[k]));
        report.points.push(CurvePoint::from_reps("z_match", delta, &per_delta[zero]));
        let diffs: Vec<f64> = per_delta[k].iter().zip(&per_delta[zero]).map(|(a, b)| a - b).collect();
        report.points.push(CurvePoint::from_reps("z_dom_minus_z_match", delta, &diffs));
    }
    report.summary.insert("supermodular".into(), scm.supermodular.holds as u8 as f64);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

// ---------------------------------------------------------------------------
// κ sweep.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelPiConfig {
    pub c_grid: Vec<f64>,
    pub n_pop: usize,
    pub n_pairs: usize,
    pub gap_tol: f64,
    pub reps: usize,
    pub seed: u64,
}

impl Default for PanelPiConfig {
    fn default() -> Self {
        Self {
            c_grid: (0..12).map(|k| 0.43 * k as f64 / 11.0).collect(),
            n_pop: 100_000,
            n_pairs: 20_000,
            gap_tol: 0.005,
            reps: 20,
            seed: 0,
        }
    }
}

/// Mean `(N, D)` over pairs, from the oracle columns.
fn mean_n_d(ds: &Dataset, u: &nalgebra::DMatrix<f64>, pairs: &[(usize, usize)]) -> (f64, f64) {
    let (mut n, mut d) = (0usize, 0usize);
    for &(i, j) in pairs {
        n += (0..u.ncols()).filter(|&l| u[(i, l)] > u[(j, l)]).count();
        d += (0..ds.dz()).filter(|&k| ds.z[(i, k)] > ds.z[(j, k)]).count();
    }
    let m = pairs.len() as f64;
    (n as f64 / m, d as f64 / m)
}

#[derive(Debug, Clone, Copy)]
struct PiRep {
    kappa: f64,
    auc_z_sum: f64,
    auc_u_sum: f64,
    matched: (f64, f64),
    random: (f64, f64),
}

const PAIR_PROPOSAL_CAP: u64 = 200_000_000;

/// Random cross pairs, optionally restricted to propensity gaps below `tol`.
fn sample_cross_pairs(treated: &[usize], untreated: &[usize], pi: Option<(&[f64], f64)>, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(n);
    let mut proposals = 0u64;
    while out.len() < n {
        if proposals >= PAIR_PROPOSAL_CAP {
            return Err(Error::AcceptanceTooLow { accepted: out.len(), proposals });
        }
        proposals += 1;
        let i = treated[rng.random_range(0..treated.len())];
        let j = untreated[rng.random_range(0..untreated.len())];
        if let Some((p, tol)) = pi {
            if (p[i] - p[j]).abs() >= tol {
                continue;
            }
        }
        out.push((i, j));
    }
    Ok(out)
}

/// Sweeps `Σ_ZU = c·11ᵀ` with `β = 0.2·1`, `γ = 0` and compares `E[N − D]`
/// under propensity matching and random pairing against the AUC ratio κ.
pub fn run_panel_pi(cfg: &PanelPiConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let scms = cfg
        .c_grid
        .iter()
        .map(|&c| build_panel_scm(CrossCov::AllOnes(c), &[0.2; 3], &[0.0; 3]))
        .collect::<Result<Vec<_>>>()?;
    let hashes: Vec<String> = scms.iter().map(|s| s.spec_hash()).collect();
    let mut report = ExperimentReport::new("panel_pi", cfg, spec_hash(&hashes), cfg.seed, cfg.reps);
    let mut kappas = Vec::new();
    let mut diffs = Vec::new();
    for (ci, (&c, scm)) in cfg.c_grid.iter().zip(&scms).enumerate() {
        if !scm.supermodular.holds {
            report.notes.push(format!("P(U | Z) is not log-supermodular at c = {c}"));
        }
        let per_rep: Vec<PiRep> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| {
                let ds = simulate(scm, cfg.n_pop, derive_path(cfg.seed, &[ci as u64, r as u64, 0]))?;
                let u = ds.u.as_ref().expect("simulated data carries U");
                let aucs = auc_summary(&ds)?;
                let pi: Vec<f64> = (0..ds.n()).map(|i| true_propensity_z(scm, &ds.z_row(i), Marginalization::Projection)).collect();
                let (t, un) = (ds.treated(), ds.untreated());
                let matched = sample_cross_pairs(&t, &un, Some((&pi, cfg.gap_tol)), cfg.n_pairs, derive_path(cfg.seed, &[ci as u64, r as u64, 1]))?;
                let random = sample_cross_pairs(&t, &un, None, cfg.n_pairs, derive_path(cfg.seed, &[ci as u64, r as u64, 2]))?;
                Ok(PiRep {
                    kappa: aucs.kappa()?,
                    auc_z_sum: aucs.auc_z.iter().sum(),
                    auc_u_sum: aucs.auc_u.iter().sum(),
                    matched: mean_n_d(&ds, u, &matched),
                    random: mean_n_d(&ds, u, &random),
                })
            })
            .collect::<Result<_>>()?;
        let col = |f: fn(&PiRep) -> f64| per_rep.iter().map(f).collect::<Vec<f64>>();
        let k = col(|v| v.kappa);
        let pm = col(|v| v.matched.0 - v.matched.1);
        let mg = col(|v| v.random.0 - v.random.1);
        let d: Vec<f64> = pm.iter().zip(&mg).map(|(a, b)| a - b).collect();
        report.points.push(CurvePoint::from_reps("kappa", c, &k));
        report.points.push(CurvePoint::from_reps("pi_match", c, &pm));
        report.points.push(CurvePoint::from_reps("marginal", c, &mg));
        report.points.push(CurvePoint::from_reps("difference", c, &d));
        report.points.push(CurvePoint::from_reps("pi_match_n", c, &col(|v| v.matched.0)));
        report.points.push(CurvePoint::from_reps("pi_match_d", c, &col(|v| v.matched.1)));
        report.points.push(CurvePoint::from_reps("marginal_n", c, &col(|v| v.random.0)));
        report.points.push(CurvePoint::from_reps("marginal_d", c, &col(|v| v.random.1)));
        report.points.push(CurvePoint::from_reps("auc_z_sum", c, &col(|v| v.auc_z_sum)));
        report.points.push(CurvePoint::from_reps("auc_u_sum", c, &col(|v| v.auc_u_sum)));
        kappas.push(mean(&k));
        diffs.push(mean(&d));
    }
    if let Some(kc) = sign_crossing(&kappas, &diffs) {
        report.summary.insert("kappa_crossing".into(), kc);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// First `x` where `y` changes from positive to non-positive, by linear interpolation.
pub fn sign_crossing(x: &[f64], y: &[f64]) -> Option<f64> {
    for k in 1..x.len().min(y.len()) {
        if y[k - 1] > 0.0 && y[k] <= 0.0 {
            return Some(x[k - 1] + (x[k] - x[k - 1]) * y[k - 1] / (y[k - 1] - y[k]));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Budget curves and gap strata.

pub const DEFAULT_CV_FOLDS: usize = 5;

/// Out-of-fold logistic propensity on Z.
pub fn cv_propensity(ds: &Dataset, folds: usize, seed: u64) -> Result<Vec<f64>> {
    cv_predict(&ds.z, &ds.x, folds, seed, &FitOptions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetCurveConfig {
    pub strategies: Vec<StrategyKind>,
    pub b_max: usize,
    pub seed: u64,
    pub cv_folds: usize,
    pub dominance_margin: f64,
    pub max_unit_reuse: usize,
}

impl Default for BudgetCurveConfig {
    fn default() -> Self {
        let s = StrategyConfig::default();
        Self {
            strategies: StrategyKind::ALL.to_vec(),
            b_max: 2000,
            seed: 0,
            cv_folds: DEFAULT_CV_FOLDS,
            dominance_margin: s.dominance_margin,
            max_unit_reuse: s.max_unit_reuse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: StrategyKind,
    pub pairs: Vec<Pair>,
    pub outcomes: Vec<ElicitationOutcome>,
}

/// Ranks, selects and scores each strategy; π-strategies use out-of-fold π̂.
pub fn run_strategies(ds: &Dataset, cfg: &BudgetCurveConfig) -> Result<Vec<StrategyRun>> {
    let pi_hat = if cfg.strategies.iter().any(|s| s.needs_propensity()) { Some(cv_propensity(ds, cfg.cv_folds, cfg.seed)?) } else { None };
    cfg.strategies
        .iter()
        .map(|&kind| {
            let sc = StrategyConfig {
                kind,
                seed: cfg.seed,
                dominance_margin: cfg.dominance_margin,
                max_unit_reuse: cfg.max_unit_reuse,
                ..StrategyConfig::default()
            };
            let sel = propose(ds, pi_hat.as_deref(), &sc, cfg.b_max)?;
            let outcomes = evaluate_pairs(ds, &sel.pairs)?;
            Ok(StrategyRun { strategy: kind, pairs: sel.pairs, outcomes })
        })
        .collect()
}

/// Cumulative mean λ against budget `1..=B` per strategy. Intervals treat the
/// first `B` selected pairs as draws (`sd/√B`); `B = 1` has none.
pub fn run_budget_curve(ds: &Dataset, cfg: &BudgetCurveConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    if ds.u.is_none() {
        return Err(Error::MissingOracleU);
    }
    let mut report = ExperimentReport::new("budget_curve", cfg, ds.provenance.clone(), cfg.seed, 1);
    report.notes.push(format!("dataset {}", ds.content_hash()));
    for run in run_strategies(ds, cfg)? {
        let name = run.strategy.name();
        let lambdas: Vec<f64> = run.outcomes.iter().map(|o| o.lambda).collect();
        let (mut s1, mut s2) = (0.0, 0.0);
        for (b, &l) in lambdas.iter().enumerate() {
            s1 += l;
            s2 += l * l;
            let n = (b + 1) as f64;
            let m = s1 / n;
            let point = if b == 0 {
                CurvePoint { series: name.into(), x: 1.0, estimate: m, se: None, lo: None, hi: None, n: 1 }
            } else {
                let var = ((s2 - n * m * m) / (n - 1.0)).max(0.0);
                let se = (var / n).sqrt();
                CurvePoint { series: name.into(), x: n, estimate: m, se: Some(se), lo: Some(m - Z95 * se), hi: Some(m + Z95 * se), n: b + 1 }
            };
            report.points.push(point);
        }
        report.summary.insert(format!("{name}.shortfall"), (cfg.b_max - lambdas.len()) as f64);
        report.summary.insert(format!("{name}.empty_share"), run.outcomes.iter().filter(|o| o.empty).count() as f64 / lambdas.len().max(1) as f64);
        if lambdas.len() >= 3 {
            let pos: Vec<f64> = (1..=lambdas.len()).map(|b| b as f64).collect();
            let (slope, slope_se) = ols_slope(&pos, &lambdas);
            report.summary.insert(format!("{name}.slope"), slope);
            report.summary.insert(format!("{name}.slope_se"), slope_se);
        }
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapStrataConfig {
    pub n_bins: usize,
    /// Random cross pairs forming the pool that is ranked by propensity gap.
    pub pool_size: usize,
    pub seed: u64,
    pub cv_folds: usize,
}

impl Default for GapStrataConfig {
    fn default() -> Self {
        Self { n_bins: 8, pool_size: 200_000, seed: 0, cv_folds: DEFAULT_CV_FOLDS }
    }
}

/// Mean λ within equal-count strata of `|π̂_i − π̂_j|` over a seeded pool
/// of cross pairs, plus the pool-wide mean as `overall`.
pub fn run_gap_strata(ds: &Dataset, pi_hat: Option<&[f64]>, cfg: &GapStrataConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    if cfg.n_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let owned;
    let pi = match pi_hat {
        Some(p) => p,
        None => {
            owned = cv_propensity(ds, cfg.cv_folds, cfg.seed)?;
            &owned
        }
    };
    let (t, u) = (ds.treated(), ds.untreated());
    if t.is_empty() {
        return Err(Error::EmptyArm(1));
    }
    if u.is_empty() {
        return Err(Error::EmptyArm(0));
    }
    let mut report = ExperimentReport::new("gap_strata", cfg, ds.provenance.clone(), cfg.seed, 1);
    report.notes.push(format!("dataset {}", ds.content_hash()));
    let pool = sample_cross_pairs(&t, &u, None, cfg.pool_size, derive_path(cfg.seed, &[7]))?;
    let mut ranked: Vec<Pair> = pool.iter().map(|&(i, j)| Pair { i, j, score: (pi[i] - pi[j]).abs(), tiebreak: 0.0 }).collect();
    ranked.par_sort_by(|a, b| a.score.total_cmp(&b.score).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j)));
    let lambdas: Vec<f64> = evaluate_pairs(ds, &ranked)?.into_iter().map(|o| o.lambda).collect();
    let n = lambdas.len();
    let mut means = Vec::new();
    for b in 0..cfg.n_bins {
        let (lo, hi) = (b * n / cfg.n_bins, (b + 1) * n / cfg.n_bins);
        let p = CurvePoint::from_draws("stratum", (b + 1) as f64, &lambdas[lo..hi]);
        means.push(p.estimate);
        report.summary.insert(format!("stratum{}.max_gap", b + 1), ranked[hi - 1].score);
        report.points.push(p);
    }
    let overall = CurvePoint::from_draws("overall", 0.0, &lambdas);
    report.summary.insert("overall".into(), overall.estimate);
    report.points.push(overall);
    if cfg.n_bins >= 2 {
        let idx: Vec<f64> = (1..=cfg.n_bins).map(|b| b as f64).collect();
        report.summary.insert("spearman".into(), spearman(&idx, &means));
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

impl CurvePoint {
    /// Mean of i.i.d.-style draws with `sd/√n` standard error.
    pub fn from_draws(series: &str, x: f64, values: &[f64]) -> Self {
        Self::from_reps(series, x, values)
    }
}
