//! Generative models: the logistic-Gaussian family, a tabular stand-in for
//! clinical covariates with binary hidden confounders, and small discrete
//! models whose posteriors are computed exactly.

use nalgebra::{DMatrix, DVector};
use num_rational::Rational64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gaussmath::{
    condition_on_z, equicorrelated, is_log_supermodular_gaussian, sample_mvn, ConditionalGaussian, GaussianJoint,
    SupermodularVerdict, SUPERMOD_TOL,
};
use crate::rng::{derive_seed, rng_from};
use crate::stats::sigmoid;

pub const DEFAULT_PROPOSAL_CAP: u64 = 10_000_000;
const ROW_CHUNK: usize = 4096;
const PROPOSAL_BATCH: usize = 8192;

/// Logistic outcome model `P(Y=1) = σ(α_Y + β_Yᵀz + γ_Yᵀu + effect·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub effect: f64,
}

impl OutcomeModel {
    pub fn null(dz: usize, du: usize) -> Self {
        Self { alpha: -1.0, beta: vec![0.0; dz], gamma: vec![0.0; du], effect: 0.0 }
    }

    pub fn prob(&self, z: &[f64], u: &[f64], x: u8) -> f64 {
        sigmoid(self.alpha + dot(&self.beta, z) + dot(&self.gamma, u) + self.effect * x as f64)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Serializable description of a Gaussian SCM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScmSpec {
    pub joint: GaussianJoint,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub outcome: OutcomeModel,
}

#[derive(Debug, Clone)]
pub struct GaussianScm {
    pub spec: GaussianScmSpec,
    pub cond: ConditionalGaussian,
    /// Log-supermodularity of `P(U | Z)`.
    pub supermodular: SupermodularVerdict,
}

impl GaussianScm {
    pub fn new(spec: GaussianScmSpec) -> Result<Self> {
        let j = &spec.joint;
        if spec.beta.len() != j.dz
            || spec.gamma.len() != j.du
            || spec.outcome.beta.len() != j.dz
            || spec.outcome.gamma.len() != j.du
        {
            return Err(Error::DimensionMismatch("coefficient lengths do not match (dz, du)".into()));
        }
        let cond = condition_on_z(j)?;
        let supermodular = is_log_supermodular_gaussian(&cond.cov, SUPERMOD_TOL)?;
        Ok(Self { spec, cond, supermodular })
    }

    pub fn dz(&self) -> usize {
        self.spec.joint.dz
    }

    pub fn du(&self) -> usize {
        self.spec.joint.du
    }

    pub fn alpha(&self) -> f64 {
        self.spec.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.spec.beta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.spec.gamma
    }

    pub fn logit(&self, z: &[f64], u: &[f64]) -> f64 {
        self.spec.alpha + dot(&self.spec.beta, z) + dot(&self.spec.gamma, u)
    }

    pub fn propensity(&self, z: &[f64], u: &[f64]) -> f64 {
        sigmoid(self.logit(z, u))
    }

    /// True when π is non-decreasing in every coordinate of `u`.
    pub fn gamma_nonnegative(&self) -> bool {
        self.spec.gamma.iter().all(|&g| g >= 0.0)
    }

    pub fn spec_hash(&self) -> String {
        spec_hash(&self.spec)
    }

    pub fn z_names(&self) -> Vec<String> {
        (1..=self.dz()).map(|k| format!("Z{k}")).collect()
    }

    pub fn u_names(&self) -> Vec<String> {
        (1..=self.du()).map(|k| format!("U{k}")).collect()
    }
}

pub fn spec_hash<T: Serialize>(spec: &T) -> String {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum CrossCov {
    /// `Σ_ZU = ρ I`.
    RhoIdentity(f64),
    /// `Σ_ZU = c 𝟙𝟙ᵀ`.
    AllOnes(f64),
}

pub const PANEL_DIM: usize = 3;
pub const PANEL_SIGMA_EPS2: f64 = 0.4;
pub const PANEL_TAU2: f64 = 0.6;
pub const PANEL_ALPHA: f64 = -1.0;

/// Three observed and three hidden coordinates, `Σ_Z = I`, equicorrelated `Σ_U`.
pub fn build_panel_scm(cross: CrossCov, beta: &[f64], gamma: &[f64]) -> Result<GaussianScm> {
    let d = PANEL_DIM;
    let sigma_z = DMatrix::identity(d, d);
    let sigma_u = equicorrelated(d, PANEL_SIGMA_EPS2, PANEL_TAU2);
    let sigma_zu = match cross {
        CrossCov::RhoIdentity(rho) => DMatrix::identity(d, d) * rho,
        CrossCov::AllOnes(c) => DMatrix::from_element(d, d, c),
    };
    let joint = GaussianJoint::from_blocks(&sigma_z, &sigma_u, &sigma_zu)?;
    GaussianScm::new(GaussianScmSpec {
        joint,
        alpha: PANEL_ALPHA,
        beta: beta.to_vec(),
        gamma: gamma.to_vec(),
        outcome: OutcomeModel::null(d, d),
    })
}

/// One-dimensional logistic-Gaussian model with unit variances and correlation `rho`.
pub fn logistic_gaussian(rho: f64, alpha: f64, beta: f64, gamma: f64) -> Result<GaussianScm> {
    let one = DMatrix::from_element(1, 1, 1.0);
    let joint = GaussianJoint::from_blocks(&one, &one, &DMatrix::from_element(1, 1, rho))?;
    GaussianScm::new(GaussianScmSpec {
        joint,
        alpha,
        beta: vec![beta],
        gamma: vec![gamma],
        outcome: OutcomeModel::null(1, 1),
    })
}

/// Models that can generate data and report the outcome law, for the
/// counterfactual ETT oracle.
pub trait OutcomeScm: Sync {
    fn simulate(&self, n: usize, seed: u64) -> Result<Dataset>;
    fn outcome_prob(&self, z: &[f64], u: &[f64], x: u8) -> f64;
}

/// Draws `X` and `Y` row by row given `(Z, U)`, chunked with derived seeds.
fn draw_xy<F, G>(n: usize, seed: u64, prop: F, outcome: G) -> (Vec<u8>, Vec<u8>)
where
    F: Fn(usize) -> f64 + Sync,
    G: Fn(usize, u8) -> f64 + Sync,
{
    let chunks: Vec<(u8, u8)> = (0..n.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = rng_from(derive_seed(seed, c as u64));
            let start = c * ROW_CHUNK;
            let end = (start + ROW_CHUNK).min(n);
            let mut out = Vec::with_capacity(end - start);
            for i in start..end {
                let x = (rng.random::<f64>() < prop(i)) as u8;
                let y = (rng.random::<f64>() < outcome(i, x)) as u8;
                out.push((x, y));
            }
            out
        })
        .collect();
    chunks.into_iter().unzip()
}

pub fn simulate(scm: &GaussianScm, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let (dz, du) = (scm.dz(), scm.du());
    let zu = sample_mvn(&scm.spec.joint.mean, &scm.spec.joint.cov, n, derive_seed(seed, 0))?;
    let z = zu.columns(0, dz).into_owned();
    let u = zu.columns(dz, du).into_owned();
    let row = |m: &DMatrix<f64>, i: usize| -> Vec<f64> { m.row(i).iter().copied().collect() };
    let (x, y) = draw_xy(
        n,
        derive_seed(seed, 1),
        |i| scm.propensity(&row(&z, i), &row(&u, i)),
        |i, x| scm.spec.outcome.prob(&row(&z, i), &row(&u, i), x),
    );
    Dataset::new(z, scm.z_names(), x, y, Some((u, scm.u_names())), scm.spec_hash())
}

impl OutcomeScm for GaussianScm {
    fn simulate(&self, n: usize, seed: u64) -> Result<Dataset> {
        simulate(self, n, seed)
    }

    fn outcome_prob(&self, z: &[f64], u: &[f64], x: u8) -> f64 {
        self.spec.outcome.prob(z, u, x)
    }
}

#[derive(Debug, Clone)]
pub struct RejectionDraw {
    /// `n x d_U`, one accepted draw per row.
    pub samples: DMatrix<f64>,
    pub proposals: u64,
}

impl RejectionDraw {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.nrows() as f64 / self.proposals as f64
    }
}

/// Ordered rejection sampler: batch `b` uses stream `derive_seed(seed, b)`,
/// accepted rows are concatenated in batch order and truncated to `n`, so the
/// output does not depend on how many batches run concurrently.
pub(crate) fn rejection_batches<F>(n: usize, d: usize, seed: u64, cap: u64, batch: F) -> Result<RejectionDraw>
where
    F: Fn(&mut crate::rng::Rng, &mut Vec<f64>) + Sync,
{
    let mut out: Vec<f64> = Vec::with_capacity(n * d);
    let mut proposals: u64 = 0;
    let mut next_batch: u64 = 0;
    let mut wave = 1usize;
    let threads = rayon::current_num_threads().max(1);
    while out.len() < n * d {
        if proposals >= cap {
            return Err(Error::AcceptanceTooLow { accepted: out.len() / d, proposals });
        }
        let ids: Vec<u64> = (next_batch..next_batch + wave as u64).collect();
        let parts: Vec<Vec<f64>> = ids
            .par_iter()
            .map(|&b| {
                let mut rng = rng_from(derive_seed(seed, b));
                let mut acc = Vec::new();
                batch(&mut rng, &mut acc);
                acc
            })
            .collect();
        for part in parts {
            if out.len() >= n * d {
                break;
            }
            proposals += PROPOSAL_BATCH as u64;
            let take = (n * d - out.len()).min(part.len());
            out.extend_from_slice(&part[..take]);
        }
        next_batch += wave as u64;
        wave = (wave * 2).min(4 * threads).min(64);
    }
    Ok(RejectionDraw { samples: DMatrix::from_row_slice(n, d, &out), proposals })
}

/// Draws from `P(U | Z = z, X = x)` by proposing from `N(μ(z), Σ_{U|Z})` and
/// accepting with probability `π` (x = 1) or `1 − π` (x = 0).
pub fn rejection_sample_u(scm: &GaussianScm, z: &[f64], x: u8, n: usize, seed: u64, cap: u64) -> Result<RejectionDraw> {
    if z.len() != scm.dz() {
        return Err(Error::DimensionMismatch(format!("z has length {}, expected {}", z.len(), scm.dz())));
    }
    let du = scm.du();
    let mu = scm.cond.mean_at(z);
    let l = &scm.cond.chol;
    let base = scm.spec.alpha + dot(&scm.spec.beta, z);
    let gamma = &scm.spec.gamma;
    rejection_batches(n, du, seed, cap, |rng, acc| {
        let mut e = vec![0.0; du];
        let mut u = vec![0.0; du];
        for _ in 0..PROPOSAL_BATCH {
            for v in e.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            for i in 0..du {
                let mut s = mu[i];
                for k in 0..=i {
                    s += l[(i, k)] * e[k];
                }
                u[i] = s;
            }
            let p = sigmoid(base + dot(gamma, &u));
            let a = if x == 1 { p } else { 1.0 - p };
            if rng.random::<f64>() < a {
                acc.extend_from_slice(&u);
            }
        }
    })
}

// ---------------------------------------------------------------------------
// Discrete models with exact posteriors.

/// Law of `U` given one value of `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ULaw {
    Finite { support: Vec<Vec<i64>>, probs: Vec<Rational64> },
    /// Scalar `U ~ Unif[0, 1]`.
    Uniform01,
}

/// `π(u) = intercept + slope·u` on `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPiece {
    pub lo: Rational64,
    pub hi: Rational64,
    pub intercept: Rational64,
    pub slope: Rational64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensityFn {
    /// Aligned with the finite support of `U`.
    Table(Vec<Rational64>),
    Piecewise(Vec<LinearPiece>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScm {
    pub name: String,
    pub z_values: Vec<i64>,
    pub z_probs: Vec<Rational64>,
    /// Indexed like `z_values`.
    pub u_law: Vec<ULaw>,
    pub propensity: Vec<PropensityFn>,
    pub du: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UEvent {
    CoordEquals { coord: usize, value: i64 },
    CoordAbove { coord: usize, threshold: Rational64 },
}

impl UEvent {
    fn contains_finite(&self, u: &[i64]) -> bool {
        match *self {
            UEvent::CoordEquals { coord, value } => u[coord] == value,
            UEvent::CoordAbove { coord, threshold } => Rational64::from_integer(u[coord]) > threshold,
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        match *self {
            UEvent::CoordEquals { coord, value } => u[coord] == value as f64,
            UEvent::CoordAbove { coord, threshold } => u[coord] > r2f(threshold),
        }
    }
}

fn r(n: i64, d: i64) -> Rational64 {
    Rational64::new(n, d)
}

pub fn r2f(q: Rational64) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

impl LinearPiece {
    /// `∫ π(u) du` over `[a, b] ∩ [lo, hi)`.
    fn integral(&self, a: Rational64, b: Rational64) -> Rational64 {
        let lo = a.max(self.lo);
        let hi = b.min(self.hi);
        if hi <= lo {
            return Rational64::from_integer(0);
        }
        self.intercept * (hi - lo) + self.slope * (hi * hi - lo * lo) / Rational64::from_integer(2)
    }

    fn eval(&self, u: f64) -> Option<f64> {
        if u >= r2f(self.lo) && u < r2f(self.hi) {
            Some(r2f(self.intercept) + r2f(self.slope) * u)
        } else {
            None
        }
    }
}

impl DiscreteScm {
    pub fn validate(&self) -> Result<()> {
        let one = Rational64::from_integer(1);
        let zero = Rational64::from_integer(0);
        if self.z_probs.iter().copied().sum::<Rational64>() != one {
            return Err(Error::InvalidArgument("Z probabilities do not sum to 1".into()));
        }
        for (law, pi) in self.u_law.iter().zip(&self.propensity) {
            match (law, pi) {
                (ULaw::Finite { support, probs }, PropensityFn::Table(t)) => {
                    if probs.iter().copied().sum::<Rational64>() != one || t.len() != support.len() {
                        return Err(Error::InvalidArgument("finite U law is malformed".into()));
                    }
                    if t.iter().any(|p| *p < zero || *p > one) {
                        return Err(Error::InvalidArgument("propensity outside [0, 1]".into()));
                    }
                }
                (ULaw::Uniform01, PropensityFn::Piecewise(pieces)) => {
                    if pieces.first().map(|p| p.lo) != Some(zero) || pieces.last().map(|p| p.hi) != Some(one) {
                        return Err(Error::InvalidArgument("pieces must cover [0, 1]".into()));
                    }
                }
                _ => return Err(Error::InvalidArgument("propensity form does not match U law".into())),
            }
        }
        Ok(())
    }

    fn z_index(&self, z: i64) -> Result<usize> {
        self.z_values
            .iter()
            .position(|&v| v == z)
            .ok_or_else(|| Error::InvalidArgument(format!("z = {z} is not in the support")))
    }

    /// `P(U ∈ event, X = x | Z = z_index)`; `event = None` means the whole space.
    fn joint_mass(&self, zi: usize, x: u8, event: Option<&UEvent>) -> Rational64 {
        let one = Rational64::from_integer(1);
        match (&self.u_law[zi], &self.propensity[zi]) {
            (ULaw::Finite { support, probs }, PropensityFn::Table(t)) => support
                .iter()
                .zip(probs)
                .zip(t)
                .filter(|((u, _), _)| event.is_none_or(|e| e.contains_finite(u)))
                .map(|((_, p), pi)| *p * if x == 1 { *pi } else { one - *pi })
                .sum(),
            (ULaw::Uniform01, PropensityFn::Piecewise(pieces)) => {
                let (a, b) = match event {
                    None => (Rational64::from_integer(0), one),
                    Some(UEvent::CoordAbove { threshold, .. }) => ((*threshold).max(Rational64::from_integer(0)), one),
                    Some(UEvent::CoordEquals { .. }) => return Rational64::from_integer(0),
                };
                if b <= a {
                    return Rational64::from_integer(0);
                }
                let pi_mass: Rational64 = pieces.iter().map(|p| p.integral(a, b)).sum();
                if x == 1 {
                    pi_mass
                } else {
                    (b - a) - pi_mass
                }
            }
            _ => unreachable!("validated on construction"),
        }
    }

    /// `π(z) = P(X = 1 | Z = z)`.
    pub fn propensity_z(&self, z: i64) -> Result<Rational64> {
        Ok(self.joint_mass(self.z_index(z)?, 1, None))
    }

    pub fn propensity_at(&self, zi: usize, u: &[f64]) -> f64 {
        match &self.propensity[zi] {
            PropensityFn::Table(t) => {
                let ULaw::Finite { support, .. } = &self.u_law[zi] else { unreachable!() };
                let k = support
                    .iter()
                    .position(|s| s.iter().zip(u).all(|(a, b)| *a as f64 == *b))
                    .expect("u in support");
                r2f(t[k])
            }
            PropensityFn::Piecewise(pieces) => {
                pieces.iter().find_map(|p| p.eval(u[0])).unwrap_or_else(|| r2f(pieces.last().unwrap().intercept + pieces.last().unwrap().slope))
            }
        }
    }

    /// `P(U ∈ event | X = x, Z = z)` with `z = None` marginalizing over Z.
    pub fn enumerate_posterior(&self, z: Option<i64>, x: u8, event: &UEvent) -> Result<Rational64> {
        let zis: Vec<usize> = match z {
            Some(v) => vec![self.z_index(v)?],
            None => (0..self.z_values.len()).collect(),
        };
        let weight = |zi: usize| if z.is_some() { Rational64::from_integer(1) } else { self.z_probs[zi] };
        let num: Rational64 = zis.iter().map(|&zi| weight(zi) * self.joint_mass(zi, x, Some(event))).sum();
        let den: Rational64 = zis.iter().map(|&zi| weight(zi) * self.joint_mass(zi, x, None)).sum();
        if den == Rational64::from_integer(0) {
            return Err(Error::ZeroConditioningMass);
        }
        Ok(num / den)
    }

    fn draw_u(&self, zi: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
        match &self.u_law[zi] {
            ULaw::Finite { support, probs } => {
                let t: f64 = rng.random();
                let mut acc = 0.0;
                for (s, p) in support.iter().zip(probs) {
                    acc += r2f(*p);
                    if t < acc {
                        return s.iter().map(|&v| v as f64).collect();
                    }
                }
                support.last().unwrap().iter().map(|&v| v as f64).collect()
            }
            ULaw::Uniform01 => vec![rng.random::<f64>()],
        }
    }

    /// Rejection draws from `P(U | X = x, Z = z)` (Z drawn from its law when `None`).
    pub fn rejection_sample(&self, z: Option<i64>, x: u8, n: usize, seed: u64, cap: u64) -> Result<RejectionDraw> {
        let fixed = z.map(|v| self.z_index(v)).transpose()?;
        rejection_batches(n, self.du, seed, cap, |rng, acc| {
            for _ in 0..PROPOSAL_BATCH {
                let zi = match fixed {
                    Some(zi) => zi,
                    None => {
                        let t: f64 = rng.random();
                        let mut c = 0.0;
                        let mut k = self.z_values.len() - 1;
                        for (i, p) in self.z_probs.iter().enumerate() {
                            c += r2f(*p);
                            if t < c {
                                k = i;
                                break;
                            }
                        }
                        k
                    }
                };
                let u = self.draw_u(zi, rng);
                let p = self.propensity_at(zi, &u);
                let a = if x == 1 { p } else { 1.0 - p };
                if rng.random::<f64>() < a {
                    acc.extend_from_slice(&u);
                }
            }
        })
    }

    /// Joint mass of `(Z = z_index, U = u)` for finite models.
    pub fn mass(&self, zi: usize, u: &[i64]) -> Option<Rational64> {
        match &self.u_law[zi] {
            ULaw::Finite { support, probs } => Some(
                support
                    .iter()
                    .position(|s| s.as_slice() == u)
                    .map_or(Rational64::from_integer(0), |k| self.z_probs[zi] * probs[k]),
            ),
            ULaw::Uniform01 => None,
        }
    }
}

pub const APPENDIX_EXAMPLES: [&str; 4] = ["necessity_supermod", "zdom_interaction", "zdom_correlation", "logistic_gaussian"];

#[derive(Debug, Clone)]
pub enum AppendixExample {
    Discrete(DiscreteScm),
    Gaussian(GaussianScm),
}

pub fn necessity_supermod() -> DiscreteScm {
    DiscreteScm {
        name: "necessity_supermod".into(),
        z_values: vec![0],
        z_probs: vec![r(1, 1)],
        u_law: vec![ULaw::Finite {
            support: vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]],
            probs: vec![r(1, 100), r(49, 100), r(49, 100), r(1, 100)],
        }],
        propensity: vec![PropensityFn::Table(vec![r(1, 10), r(1, 10), r(9, 10), r(9, 10)])],
        du: 2,
    }
}

pub fn zdom_interaction() -> DiscreteScm {
    let (zero, half, one) = (r(0, 1), r(1, 2), r(1, 1));
    let identity = |lo, hi| LinearPiece { lo, hi, intercept: zero, slope: one };
    DiscreteScm {
        name: "zdom_interaction".into(),
        z_values: vec![0, 1],
        z_probs: vec![half, half],
        u_law: vec![ULaw::Uniform01, ULaw::Uniform01],
        propensity: vec![
            PropensityFn::Piecewise(vec![identity(zero, one)]),
            PropensityFn::Piecewise(vec![
                identity(zero, half),
                LinearPiece { lo: half, hi: one, intercept: one, slope: zero },
            ]),
        ],
        du: 1,
    }
}

pub fn zdom_correlation() -> DiscreteScm {
    let bern = |p: Rational64| ULaw::Finite { support: vec![vec![0], vec![1]], probs: vec![r(1, 1) - p, p] };
    DiscreteScm {
        name: "zdom_correlation".into(),
        z_values: vec![0, 1],
        z_probs: vec![r(1, 2), r(1, 2)],
        u_law: vec![bern(r(1, 10)), bern(r(9, 10))],
        propensity: vec![
            PropensityFn::Table(vec![r(2, 10), r(4, 10)]),
            PropensityFn::Table(vec![r(3, 10), r(5, 10)]),
        ],
        du: 1,
    }
}

pub fn build_appendix_example(name: &str) -> Result<AppendixExample> {
    match name {
        "necessity_supermod" => Ok(AppendixExample::Discrete(necessity_supermod())),
        "zdom_interaction" => Ok(AppendixExample::Discrete(zdom_interaction())),
        "zdom_correlation" => Ok(AppendixExample::Discrete(zdom_correlation())),
        "logistic_gaussian" => Ok(AppendixExample::Gaussian(logistic_gaussian(0.2, -1.0, 1.0, 1.0)?)),
        other => Err(Error::UnknownExample(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Tabular stand-in with binary hidden confounders.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandInConfig {
    /// Integer-valued covariates: rounded standard normals clipped to `±clip`.
    pub n_graded: usize,
    pub clip: f64,
    pub n_binary: usize,
    pub binary_rate: f64,
    pub du: usize,
    /// Share of units with each hidden flag set.
    pub u_prevalence: f64,
    /// Loading of the hidden latents on the first `coupled` graded covariates.
    pub coupling: f64,
    pub coupled: usize,
    pub shared_loading: f64,
    pub noise_loading: f64,
    pub alpha_x: f64,
    /// Coefficients on standardized Z; missing entries default to `beta_x_rest`.
    pub beta_x_lead: Vec<f64>,
    pub beta_x_rest: f64,
    pub gamma_x_range: (f64, f64),
    pub alpha_y: f64,
    pub beta_y_lead: Vec<f64>,
    pub beta_y_rest: f64,
    pub gamma_y_range: (f64, f64),
    pub effect: f64,
}

impl Default for StandInConfig {
    fn default() -> Self {
        Self {
            n_graded: 12,
            clip: 2.0,
            n_binary: 2,
            binary_rate: 0.4,
            du: 10,
            u_prevalence: 0.3,
            coupling: 0.3,
            coupled: 3,
            shared_loading: 0.6,
            noise_loading: 0.8,
            alpha_x: -1.0,
            beta_x_lead: vec![1.5, 1.5, 1.5, 1.0, 1.0, 1.0],
            beta_x_rest: 0.2,
            gamma_x_range: (0.3, 0.4),
            alpha_y: -1.0,
            beta_y_lead: vec![0.3, 0.3, 0.3],
            beta_y_rest: 0.1,
            gamma_y_range: (0.1, 0.2),
            effect: -0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandInScm {
    pub config: StandInConfig,
    pub coef_seed: u64,
    pub gamma_x: Vec<f64>,
    pub gamma_y: Vec<f64>,
    pub beta_x: Vec<f64>,
    pub beta_y: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_sd: Vec<f64>,
    pub latent_threshold: f64,
}

/// Mean and sd of `clamp(round(N(0,1)), -clip, clip)`.
fn graded_moments(clip: f64) -> (f64, f64) {
    let nd = Normal::standard();
    let k = clip as i64;
    let mut m2 = 0.0;
    for v in -k..=k {
        let lo = if v == -k { f64::NEG_INFINITY } else { v as f64 - 0.5 };
        let hi = if v == k { f64::INFINITY } else { v as f64 + 0.5 };
        m2 += (v * v) as f64 * (nd.cdf(hi) - nd.cdf(lo));
    }
    (0.0, m2.sqrt())
}

impl StandInScm {
    /// Draws the hidden-confounder coefficients from `coef_seed`.
    pub fn new(config: StandInConfig, coef_seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(coef_seed, 0xC0EF));
        let gamma_x = (0..config.du)
            .map(|_| rng.random_range(config.gamma_x_range.0..=config.gamma_x_range.1))
            .collect();
        let gamma_y = (0..config.du)
            .map(|_| rng.random_range(config.gamma_y_range.0..=config.gamma_y_range.1))
            .collect();
        let dz = config.n_graded + config.n_binary;
        let lead = |v: &[f64], rest: f64| -> Vec<f64> { (0..dz).map(|k| v.get(k).copied().unwrap_or(rest)).collect() };
        let beta_x = lead(&config.beta_x_lead, config.beta_x_rest);
        let beta_y = lead(&config.beta_y_lead, config.beta_y_rest);
        let (gm, gs) = graded_moments(config.clip);
        let br = config.binary_rate;
        let mut z_mean = vec![gm; config.n_graded];
        let mut z_sd = vec![gs; config.n_graded];
        z_mean.extend(std::iter::repeat_n(br, config.n_binary));
        z_sd.extend(std::iter::repeat_n((br * (1.0 - br)).sqrt(), config.n_binary));
        let latent_var = config.coupling.powi(2) + config.shared_loading.powi(2) + config.noise_loading.powi(2);
        let latent_threshold = Normal::standard().inverse_cdf(1.0 - config.u_prevalence) * latent_var.sqrt();
        Self { config, coef_seed, gamma_x, gamma_y, beta_x, beta_y, z_mean, z_sd, latent_threshold }
    }

    pub fn dz(&self) -> usize {
        self.config.n_graded + self.config.n_binary
    }

    pub fn z_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (1..=self.config.n_graded).map(|k| format!("Z{k}")).collect();
        v.extend((1..=self.config.n_binary).map(|k| format!("B{k}")));
        v
    }

    pub fn u_names(&self) -> Vec<String> {
        (1..=self.config.du).map(|k| format!("U{k}")).collect()
    }

    fn std_dot(&self, coef: &[f64], z: &[f64]) -> f64 {
        (0..z.len()).map(|k| coef[k] * (z[k] - self.z_mean[k]) / self.z_sd[k]).sum()
    }

    pub fn propensity(&self, z: &[f64], u: &[f64]) -> f64 {
        sigmoid(self.config.alpha_x + self.std_dot(&self.beta_x, z) + dot(&self.gamma_x, u))
    }

    pub fn spec_hash(&self) -> String {
        spec_hash(self)
    }

    /// Draws `(Z, U)` only.
    fn draw_zu(&self, n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let c = &self.config;
        let dz = self.dz();
        let du = c.du;
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(ROW_CHUNK))
            .into_par_iter()
            .flat_map_iter(|chunk| {
                let mut rng = rng_from(derive_seed(seed, chunk as u64));
                let start = chunk * ROW_CHUNK;
                let end = (start + ROW_CHUNK).min(n);
                (start..end)
                    .map(|_| {
                        let raw: Vec<f64> = (0..c.n_graded).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let mut z: Vec<f64> = raw.iter().map(|v: &f64| v.round().clamp(-c.clip, c.clip)).collect();
                        z.extend((0..c.n_binary).map(|_| (rng.random::<f64>() < c.binary_rate) as u8 as f64));
                        let lead = raw[..c.coupled].iter().sum::<f64>() / (c.coupled as f64).sqrt();
                        let shared: f64 = StandardNormal.sample(&mut rng);
                        let u: Vec<f64> = (0..du)
                            .map(|_| {
                                let e: f64 = StandardNormal.sample(&mut rng);
                                let latent = c.coupling * lead + c.shared_loading * shared + c.noise_loading * e;
                                (latent > self.latent_threshold) as u8 as f64
                            })
                            .collect();
                        (z, u)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let z = DMatrix::from_row_iterator(n, dz, rows.iter().flat_map(|(z, _)| z.iter().copied()));
        let u = DMatrix::from_row_iterator(n, du, rows.iter().flat_map(|(_, u)| u.iter().copied()));
        (z, u)
    }
}

impl OutcomeScm for StandInScm {
    fn simulate(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let (z, u) = self.draw_zu(n, derive_seed(seed, 0));
        let row = |m: &DMatrix<f64>, i: usize| -> Vec<f64> { m.row(i).iter().copied().collect() };
        let (x, y) = draw_xy(
            n,
            derive_seed(seed, 1),
            |i| self.propensity(&row(&z, i), &row(&u, i)),
            |i, x| self.outcome_prob(&row(&z, i), &row(&u, i), x),
        );
        Dataset::new(z, self.z_names(), x, y, Some((u, self.u_names())), self.spec_hash())
    }

    fn outcome_prob(&self, z: &[f64], u: &[f64], x: u8) -> f64 {
        sigmoid(self.config.alpha_y + self.std_dot(&self.beta_y, z) + dot(&self.gamma_y, u) + self.config.effect * x as f64)
    }
}

/// Column vector helper.
pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
