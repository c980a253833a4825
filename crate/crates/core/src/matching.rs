//! Pair-proposal strategies and budgeted selection with a per-unit reuse cap.
//!
//! Rankings are produced as exact prefixes: `score_pairs` returns the first
//! `depth` pairs of the full ordering under the total order
//! `(score, tiebreak, i, j)`, and `propose` deepens the prefix until the
//! greedy budget scan is satisfied.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{counter_uniform, derive_seed, mix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZMatch,
    PiMatch,
    ZDom,
    PiDom,
    Marginal,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] =
        [StrategyKind::ZMatch, StrategyKind::ZDom, StrategyKind::PiMatch, StrategyKind::PiDom, StrategyKind::Marginal];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::ZMatch => "z_match",
            StrategyKind::PiMatch => "pi_match",
            StrategyKind::ZDom => "z_dom",
            StrategyKind::PiDom => "pi_dom",
            StrategyKind::Marginal => "marginal",
        }
    }

    pub fn needs_propensity(self) -> bool {
        matches!(self, StrategyKind::PiMatch | StrategyKind::PiDom)
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "z_match" | "zmatch" => Ok(StrategyKind::ZMatch),
            "pi_match" | "pimatch" => Ok(StrategyKind::PiMatch),
            "z_dom" | "zdom" => Ok(StrategyKind::ZDom),
            "pi_dom" | "pidom" => Ok(StrategyKind::PiDom),
            "marginal" | "marg" => Ok(StrategyKind::Marginal),
            other => Err(Error::InvalidArgument(format!("unknown strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_Z_PAIR_LIMIT: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// In standard-deviation units.
    pub dominance_margin: f64,
    pub pi_gap_tolerance: f64,
    pub max_unit_reuse: usize,
    pub seed: u64,
    /// Restrict `z_dom` to pairs where the treated unit is strictly below on every coordinate.
    pub strict_dominance: bool,
    /// Above this many candidate pairs, `z_match`, `z_dom` and `marginal`
    /// score a seeded subsample of untreated partners per treated unit.
    pub z_pair_limit: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::ZMatch,
            dominance_margin: 0.2,
            pi_gap_tolerance: 0.005,
            max_unit_reuse: 3,
            seed: 0,
            strict_dominance: false,
            z_pair_limit: DEFAULT_Z_PAIR_LIMIT,
        }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dominance_margin >= 0.0) {
            return Err(Error::InvalidArgument("dominance margin must be >= 0".into()));
        }
        if !(self.pi_gap_tolerance > 0.0 && self.pi_gap_tolerance < 1.0) {
            return Err(Error::InvalidArgument("gap tolerance must lie in (0, 1)".into()));
        }
        if self.max_unit_reuse == 0 {
            return Err(Error::InvalidArgument("reuse cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Treated unit `i`, untreated unit `j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub score: f64,
    pub tiebreak: f64,
}

impl Pair {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(self.tiebreak.total_cmp(&other.tiebreak))
            .then(self.i.cmp(&other.i))
            .then(self.j.cmp(&other.j))
    }
}

#[derive(Clone, Copy)]
struct Keyed(Pair);

impl PartialEq for Keyed {
    fn eq(&self, other: &Self) -> bool {
        self.0.key_cmp(&other.0) == Ordering::Equal
    }
}
impl Eq for Keyed {}
impl PartialOrd for Keyed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Keyed {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.key_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPairs {
    pub strategy: StrategyKind,
    pub pairs: Vec<Pair>,
    pub dataset_hash: String,
    /// Number of candidate pairs the ranking draws from.
    pub candidates: u64,
    /// True when `pairs` is the whole ranking rather than a prefix.
    pub complete: bool,
    /// True when z-strategies scored a subsample of partners.
    pub subsampled: bool,
    /// Budget requested, when this is a selection.
    pub budget: Option<usize>,
}

impl RankedPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs missing from a budgeted selection.
    pub fn shortfall(&self) -> usize {
        self.budget.map_or(0, |b| b.saturating_sub(self.pairs.len()))
    }

    /// Share of pairs whose score exceeds `tol` (meaningful for `pi_match`).
    pub fn fraction_above(&self, tol: f64) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|p| p.score >= tol).count() as f64 / self.pairs.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j", "score", "tiebreak", "strategy"])?;
        for p in &self.pairs {
            w.write_record([
                p.i.to_string(),
                p.j.to_string(),
                format!("{:?}", p.score),
                format!("{:?}", p.tiebreak),
                self.strategy.name().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, dataset_hash: &str) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut pairs = Vec::new();
        let mut strategy = None;
        for rec in r.records() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> { rec[k].parse::<f64>().map_err(|e| Error::Parse(e.to_string())) };
            let idx = |k: usize| -> Result<usize> { rec[k].parse::<usize>().map_err(|e| Error::Parse(e.to_string())) };
            pairs.push(Pair { i: idx(0)?, j: idx(1)?, score: parse(2)?, tiebreak: parse(3)? });
            strategy = Some(rec[4].parse::<StrategyKind>()?);
        }
        Ok(RankedPairs {
            strategy: strategy.unwrap_or(StrategyKind::Marginal),
            candidates: pairs.len() as u64,
            pairs,
            dataset_hash: dataset_hash.to_string(),
            complete: true,
            subsampled: false,
            budget: None,
        })
    }
}

/// Standardized covariates in row-major layout.
struct ZView {
    rows: Vec<f64>,
    d: usize,
}

impl ZView {
    fn new(ds: &Dataset) -> Self {
        let zs = ds.z_standardized();
        let d = zs.ncols();
        let mut rows = Vec::with_capacity(zs.len());
        for i in 0..zs.nrows() {
            rows.extend(zs.row(i).iter());
        }
        Self { rows, d }
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }
}

#[inline]
fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Score of one pair under a z-strategy or the marginal strategy; `None` when filtered out.
fn z_score(cfg: &StrategyConfig, zv: &ZView, i: usize, j: usize) -> Option<(f64, f64)> {
    match cfg.kind {
        StrategyKind::ZMatch => Some((euclid(zv.row(i), zv.row(j)), 0.0)),
        StrategyKind::ZDom => {
            let (a, b) = (zv.row(i), zv.row(j));
            if cfg.strict_dominance && a.iter().zip(b).any(|(x, y)| x >= y) {
                return None;
            }
            let count = a.iter().zip(b).filter(|(x, y)| **x > **y + cfg.dominance_margin).count();
            Some((count as f64, euclid(a, b)))
        }
        StrategyKind::Marginal => Some((counter_uniform(cfg.seed, i as u64, j as u64), 0.0)),
        _ => unreachable!(),
    }
}

/// Untreated partners scored for treated unit `i` when subsampling.
fn partner_subsample(seed: u64, i: usize, untreated: &[usize], per_unit: usize) -> Vec<usize> {
    let s = derive_seed(seed ^ 0x5AB5_A3B1, i as u64);
    let mut keyed: Vec<(u64, usize)> = untreated.iter().map(|&j| (mix64(s ^ j as u64), j)).collect();
    let k = per_unit.min(keyed.len());
    keyed.select_nth_unstable(k - 1);
    let mut pick: Vec<usize> = keyed[..k].iter().map(|&(_, j)| j).collect();
    pick.sort_unstable();
    pick
}

fn push_bounded(heap: &mut BinaryHeap<Keyed>, p: Pair, cap: usize) {
    if heap.len() < cap {
        heap.push(Keyed(p));
    } else if let Some(top) = heap.peek() {
        if p.key_cmp(&top.0) == Ordering::Less {
            heap.pop();
            heap.push(Keyed(p));
        }
    }
}

fn top_z(cfg: &StrategyConfig, ds: &Dataset, treated: &[usize], untreated: &[usize], depth: usize) -> (Vec<Pair>, u64, bool) {
    let zv = ZView::new(ds);
    let total = treated.len() as u64 * untreated.len() as u64;
    let subsample = total > cfg.z_pair_limit;
    let per_unit = if subsample { ((cfg.z_pair_limit / treated.len() as u64).max(1)) as usize } else { untreated.len() };
    let candidates = if subsample { per_unit as u64 * treated.len() as u64 } else { total };
    let depth = depth.min(candidates as usize).max(1);
    let heap = treated
        .par_chunks(64)
        .fold(BinaryHeap::new, |mut heap, chunk| {
            for &i in chunk {
                let owned;
                let partners: &[usize] = if subsample {
                    owned = partner_subsample(cfg.seed, i, untreated, per_unit);
                    &owned
                } else {
                    untreated
                };
                for &j in partners {
                    if let Some((score, tiebreak)) = z_score(cfg, &zv, i, j) {
                        push_bounded(&mut heap, Pair { i, j, score, tiebreak }, depth);
                    }
                }
            }
            heap
        })
        .reduce(BinaryHeap::new, |mut a, b| {
            for k in b {
                push_bounded(&mut a, k.0, depth);
            }
            a
        });
    let mut out: Vec<Pair> = heap.into_iter().map(|k| k.0).collect();
    out.sort_by(|a, b| a.key_cmp(b));
    (out, candidates, subsample)
}

/// Untreated units grouped into blocks of equal π, blocks ascending in π, members ascending in index.
struct PiBlocks {
    values: Vec<f64>,
    members: Vec<Vec<usize>>,
}

impl PiBlocks {
    fn new(pi: &[f64], untreated: &[usize]) -> Self {
        let mut u: Vec<usize> = untreated.to_vec();
        u.sort_by(|&a, &b| pi[a].total_cmp(&pi[b]).then(a.cmp(&b)));
        let mut values = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for j in u {
            if values.last().is_some_and(|v: &f64| v.total_cmp(&pi[j]) == Ordering::Equal) {
                members.last_mut().unwrap().push(j);
            } else {
                values.push(pi[j]);
                members.push(vec![j]);
            }
        }
        Self { values, members }
    }
}

/// Per-treated cursor walking partners in ascending score.
#[derive(Clone, Copy)]
struct Cursor {
    /// Block index and offset on the lower side (pi_match) or the only side (pi_dom).
    lo: Option<(usize, usize)>,
    /// Block index and offset on the upper side (pi_match only).
    hi: Option<(usize, usize)>,
}

fn top_pi(kind: StrategyKind, pi: &[f64], treated: &[usize], untreated: &[usize], depth: usize) -> Vec<Pair> {
    let blocks = PiBlocks::new(pi, untreated);
    let nb = blocks.values.len();
    let candidate = |i: usize, side: (usize, usize)| -> Pair {
        let (b, k) = side;
        let j = blocks.members[b][k];
        let score = match kind {
            StrategyKind::PiMatch => (pi[i] - blocks.values[b]).abs(),
            _ => pi[i] - blocks.values[b],
        };
        Pair { i, j, score, tiebreak: 0.0 }
    };
    let step_up = |(b, k): (usize, usize)| -> Option<(usize, usize)> {
        if k + 1 < blocks.members[b].len() {
            Some((b, k + 1))
        } else if b + 1 < nb {
            Some((b + 1, 0))
        } else {
            None
        }
    };
    let step_down = |(b, k): (usize, usize)| -> Option<(usize, usize)> {
        if k + 1 < blocks.members[b].len() {
            Some((b, k + 1))
        } else if b > 0 {
            Some((b - 1, 0))
        } else {
            None
        }
    };
    let mut cursors: Vec<Cursor> = Vec::with_capacity(treated.len());
    let mut heap: BinaryHeap<std::cmp::Reverse<(Keyed, usize, bool)>> = BinaryHeap::new();
    for (t, &i) in treated.iter().enumerate() {
        let c = match kind {
            StrategyKind::PiMatch => {
                // First block with value >= π_i goes up; the one below goes down.
                let pos = blocks.values.partition_point(|v| *v < pi[i]);
                Cursor { lo: pos.checked_sub(1).map(|b| (b, 0)), hi: (pos < nb).then_some((pos, 0)) }
            }
            _ => Cursor { lo: nb.checked_sub(1).map(|b| (b, 0)), hi: None },
        };
        cursors.push(c);
        if let Some(s) = c.lo {
            heap.push(std::cmp::Reverse((Keyed(candidate(i, s)), t, false)));
        }
        if let Some(s) = c.hi {
            heap.push(std::cmp::Reverse((Keyed(candidate(i, s)), t, true)));
        }
    }
    let mut out = Vec::with_capacity(depth);
    while out.len() < depth {
        let Some(std::cmp::Reverse((Keyed(p), t, upper))) = heap.pop() else { break };
        out.push(p);
        let c = &mut cursors[t];
        let next = if upper {
            c.hi = c.hi.and_then(step_up);
            c.hi
        } else {
            c.lo = c.lo.and_then(step_down);
            c.lo
        };
        if let Some(s) = next {
            heap.push(std::cmp::Reverse((Keyed(candidate(p.i, s)), t, upper)));
        }
    }
    out
}

/// First `depth` pairs of the strategy's ranking (all pairs when `depth` is `None`).
pub fn score_pairs(ds: &Dataset, pi: Option<&[f64]>, cfg: &StrategyConfig, depth: Option<usize>) -> Result<RankedPairs> {
    cfg.validate()?;
    let treated = ds.treated();
    let untreated = ds.untreated();
    if treated.is_empty() {
        return Err(Error::EmptyArm(1));
    }
    if untreated.is_empty() {
        return Err(Error::EmptyArm(0));
    }
    let total = treated.len() as u64 * untreated.len() as u64;
    let want = depth.unwrap_or(usize::MAX);
    let (pairs, candidates, subsampled) = if cfg.kind.needs_propensity() {
        let pi = pi.ok_or_else(|| Error::MissingPropensity(cfg.kind.name().into()))?;
        if pi.len() != ds.n() {
            return Err(Error::DimensionMismatch(format!("{} propensities for {} units", pi.len(), ds.n())));
        }
        let want = want.min(total as usize);
        (top_pi(cfg.kind, pi, &treated, &untreated, want), total, false)
    } else {
        top_z(cfg, ds, &treated, &untreated, want)
    };
    let complete = (pairs.len() as u64) >= candidates || (cfg.strict_dominance && pairs.len() < want);
    Ok(RankedPairs {
        strategy: cfg.kind,
        pairs,
        dataset_hash: ds.content_hash(),
        candidates,
        complete,
        subsampled,
        budget: None,
    })
}

/// Greedy scan keeping pairs whose treated and untreated units are both under the reuse cap.
pub fn select_budget(ranked: &RankedPairs, budget: usize, max_unit_reuse: usize) -> RankedPairs {
    let mut used: HashMap<usize, usize> = HashMap::new();
    let mut out = Vec::with_capacity(budget.min(ranked.pairs.len()));
    for p in &ranked.pairs {
        if out.len() >= budget {
            break;
        }
        let ci = used.get(&p.i).copied().unwrap_or(0);
        let cj = used.get(&p.j).copied().unwrap_or(0);
        if ci < max_unit_reuse && cj < max_unit_reuse {
            *used.entry(p.i).or_insert(0) += 1;
            *used.entry(p.j).or_insert(0) += 1;
            out.push(*p);
        }
    }
    RankedPairs { pairs: out, budget: Some(budget), ..ranked.clone_header() }
}

impl RankedPairs {
    fn clone_header(&self) -> RankedPairs {
        RankedPairs {
            strategy: self.strategy,
            pairs: Vec::new(),
            dataset_hash: self.dataset_hash.clone(),
            candidates: self.candidates,
            complete: self.complete,
            subsampled: self.subsampled,
            budget: self.budget,
        }
    }
}

/// Ranks and selects `budget` pairs, deepening the ranked prefix until the
/// greedy scan fills the budget or the ranking is exhausted.
pub fn propose(ds: &Dataset, pi: Option<&[f64]>, cfg: &StrategyConfig, budget: usize) -> Result<RankedPairs> {
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be >= 1".into()));
    }
    let mut depth = (budget * 4).max(1024);
    loop {
        let ranked = score_pairs(ds, pi, cfg, Some(depth))?;
        let sel = select_budget(&ranked, budget, cfg.max_unit_reuse);
        if sel.len() == budget || ranked.complete || ranked.pairs.len() < depth {
            return Ok(sel);
        }
        depth = depth.saturating_mul(4);
    }
}
