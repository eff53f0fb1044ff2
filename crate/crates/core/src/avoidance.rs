//! Single-scale avoidance steps.
//!
//! Each step takes a generation-`k` set `T` and a bad set `B` at generation
//! `k+1` and returns generation-`k+1` subsets keeping at most one fine cube per
//! intermediary cell, together with a report of the inequalities it relied on.

use std::collections::{HashMap, HashSet};

use num::integer::lcm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::configs::{ConfigError, CoverOracle, Polynomial};
use crate::dyadic::{
    is_strongly_nondiagonal, pow2_at_least, BranchingSchedule, CubeIndex, DyadicError, GridKind, GridSet,
};

#[derive(Debug, Error)]
pub enum AvoidError {
    #[error("hypothesis `{name}` fails: {lhs} vs {rhs}")]
    Hypothesis { name: String, lhs: f64, rhs: f64 },
    #[error("no acceptable selection after {trials} trials (fewest collisions {best}, allowed {allowed})")]
    RetryExhausted { trials: usize, best: usize, allowed: usize },
    #[error("enumeration of {size} tuples exceeds the budget {budget}")]
    Budget { size: u128, budget: u128 },
    #[error("input sets are not pairwise disjoint")]
    NotDisjoint,
    #[error("empty shift window [{lo}, {hi}] in units of the fine side")]
    EmptyWindow { lo: f64, hi: f64 },
    #[error("no offset avoids the bad set ({examined} examined)")]
    NoOffset { examined: u64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] DyadicError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

type Result<T> = std::result::Result<T, AvoidError>;

/// Largest number of tuples any step enumerates.
pub const TUPLE_BUDGET: u128 = 100_000_000;

/// What to do when a size hypothesis fails at desk scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisPolicy {
    #[default]
    Enforce,
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    /// Exact arithmetic on the realized data.
    Certified,
    /// Measured on a sample or with floating point.
    Empirical,
    /// Could not be evaluated.
    Unavailable,
}

/// A recorded inequality `lhs <= rhs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub evidence: Evidence,
}

impl Inequality {
    pub fn new(name: &str, lhs: f64, rhs: f64, evidence: Evidence) -> Self {
        Inequality { name: name.to_string(), lhs, rhs, holds: lhs <= rhs, evidence }
    }

    pub fn exact(name: &str, lhs: f64, rhs: f64, holds: bool) -> Self {
        Inequality { name: name.to_string(), lhs, rhs, holds, evidence: Evidence::Certified }
    }

    fn unavailable(name: &str, rhs: f64) -> Self {
        Inequality { name: name.to_string(), lhs: f64::NAN, rhs, holds: false, evidence: Evidence::Unavailable }
    }
}

fn enforce(policy: HypothesisPolicy, checks: &[Inequality]) -> Result<()> {
    if policy == HypothesisPolicy::Enforce {
        if let Some(c) = checks.iter().find(|c| !c.holds) {
            return Err(AvoidError::Hypothesis { name: c.name.clone(), lhs: c.lhs, rhs: c.rhs });
        }
    }
    Ok(())
}

/// SplitMix64 finalizer; derives independent stream seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `max(4d, least power of two >= 4^{1/(dn - s)})`.
pub fn c_constant(s: f64, d: usize, n: usize) -> Result<u64> {
    let gap = (d * n) as f64 - s;
    if gap <= 0.0 {
        return Err(AvoidError::Invalid(format!("s = {s} leaves no room below dn = {}", d * n)));
    }
    Ok(((4 * d) as u64).max(pow2_at_least(4f64.powf(1.0 / gap))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvoidParams {
    pub s: f64,
    pub eps: f64,
    pub d: usize,
    pub n: usize,
    pub c: u64,
    pub retry_limit: usize,
    /// Largest number of joint choices the exhaustive fallback will walk.
    pub exhaustive_limit: u128,
    pub seed: u64,
    pub policy: HypothesisPolicy,
}

impl AvoidParams {
    pub fn new(s: f64, eps: f64, d: usize, n: usize, seed: u64) -> Result<Self> {
        if n < 2 || d == 0 {
            return Err(AvoidError::Invalid("need n >= 2 and d >= 1".into()));
        }
        let c = c_constant(s, d, n)?;
        let gap = (d * n) as f64 - s;
        if !(eps >= 0.0 && eps < gap / 2.0) {
            return Err(AvoidError::Invalid(format!("eps = {eps} outside [0, {})", gap / 2.0)));
        }
        Ok(AvoidParams { s, eps, d, n, c, retry_limit: 64, exhaustive_limit: 1 << 16, seed, policy: HypothesisPolicy::Enforce })
    }

    pub fn with_policy(mut self, policy: HypothesisPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn branching_exponent(&self) -> Result<f64> {
        let denom = (self.d * self.n) as f64 - self.s - self.eps;
        if denom <= 0.0 {
            return Err(AvoidError::Invalid("dn - s - eps must be positive".into()));
        }
        Ok((self.d * (self.n - 1)) as f64 / denom)
    }
}

/// Least power of two `N >= C M^{d(n-1)/(dn-s-eps)}`.
pub fn min_branching(params: &AvoidParams, m: u64) -> Result<u64> {
    let e = params.branching_exponent()?;
    Ok(pow2_at_least(params.c as f64 * (m as f64).powf(e)))
}

/// A bad set either materialized or answered cube by cube.
#[derive(Clone, Copy, Debug)]
pub enum BadSet<'a> {
    Grid(&'a GridSet),
    Oracle { oracle: &'a dyn CoverOracle, denom: u64 },
}

impl BadSet<'_> {
    pub fn contains(&self, row: &[u64]) -> bool {
        match self {
            BadSet::Grid(g) => g.contains(row),
            BadSet::Oracle { oracle, denom } => oracle.contains(*denom, row),
        }
    }

    pub fn count(&self) -> Option<u128> {
        match self {
            BadSet::Grid(g) => Some(g.len() as u128),
            BadSet::Oracle { oracle, denom } => oracle.count(*denom).ok(),
        }
    }
}

/// One uniformly chosen fine child per intermediary cell of every cube of `t`.
pub fn random_select<R: Rng>(t: &GridSet, sched: &BranchingSchedule, rng: &mut R) -> Result<GridSet> {
    let k = t.generation();
    let m = sched.intermediary(k + 1)?;
    let q = sched.cell_ratio(k + 1)?;
    let denom = sched.fine_denom(k + 1)?;
    let d = t.dim();
    let cells = (m as usize).pow(d as u32);
    let mut flat = Vec::with_capacity(t.len() * cells * d);
    let mut off = vec![0u64; d];
    for row in t.iter() {
        off.iter_mut().for_each(|o| *o = 0);
        for _ in 0..cells {
            for (&c, &j) in row.iter().zip(&off) {
                flat.push((c * m + j) * q + rng.gen_range(0..q));
            }
            advance(&mut off, m);
        }
    }
    Ok(GridSet::from_flat(d, 1, k + 1, GridKind::Fine, denom, flat))
}

fn advance(off: &mut [u64], base: u64) -> bool {
    for axis in (0..off.len()).rev() {
        off[axis] += 1;
        if off[axis] < base {
            return true;
        }
        off[axis] = 0;
    }
    false
}

/// Strongly non-diagonal cubes of `b` whose `n` blocks all lie in `a`.
pub fn collision_set(a: &GridSet, b: BadSet<'_>, n: usize) -> Result<GridSet> {
    let d = a.dim();
    match b {
        BadSet::Grid(g) => {
            if g.dim() != d * n {
                return Err(AvoidError::Invalid(format!("bad set of dimension {} for {n} blocks of {d}", g.dim())));
            }
            let hits = g.filter(|row| is_strongly_nondiagonal(row, d) && row.chunks_exact(d).all(|blk| a.contains(blk)));
            Ok(hits.with_blocks(d, n)?)
        }
        BadSet::Oracle { oracle, denom } => {
            if oracle.point_dim() != d || oracle.arity() != n {
                return Err(AvoidError::Invalid("oracle shape differs from the selected set".into()));
            }
            let size = (a.len() as u128).pow(n as u32);
            if size > TUPLE_BUDGET {
                return Err(AvoidError::Budget { size, budget: TUPLE_BUDGET });
            }
            let mut flat = Vec::new();
            let mut idx = vec![0usize; n];
            let mut row = vec![0u64; d * n];
            if a.len() >= n {
                loop {
                    if distinct(&idx) {
                        for (slot, &i) in idx.iter().enumerate() {
                            row[slot * d..(slot + 1) * d].copy_from_slice(a.row(i));
                        }
                        if oracle.contains(denom, &row) {
                            flat.extend_from_slice(&row);
                        }
                    }
                    if !advance_idx(&mut idx, a.len()) {
                        break;
                    }
                }
            }
            Ok(GridSet::from_sorted_flat(d, n, a.generation(), GridKind::Fine, a.denom(), flat))
        }
    }
}

fn distinct(idx: &[usize]) -> bool {
    idx.iter().enumerate().all(|(i, x)| !idx[..i].contains(x))
}

fn advance_idx(idx: &mut [usize], len: usize) -> bool {
    for slot in (0..idx.len()).rev() {
        idx[slot] += 1;
        if idx[slot] < len {
            return true;
        }
        idx[slot] = 0;
    }
    false
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub generation: usize,
    pub trials: usize,
    pub exhaustive: bool,
    pub selected: usize,
    pub collisions: usize,
    pub deleted: usize,
    pub cells_per_parent: u64,
    pub kept_per_parent: Vec<u64>,
    pub bad_count: Option<u128>,
    pub checks: Vec<Inequality>,
}

impl StepReport {
    pub fn min_kept(&self) -> u64 {
        self.kept_per_parent.iter().copied().min().unwrap_or(0)
    }
}

fn hypothesis_checks(params: &AvoidParams, n_next: u64, m_next: u64, bad: Option<u128>) -> Result<Vec<Inequality>> {
    let sparsity_rhs = (n_next as f64).powf(params.s + params.eps);
    let sparsity = match bad {
        Some(c) => Inequality::new("#B <= N^(s+eps)", c as f64, sparsity_rhs, Evidence::Certified),
        None => Inequality::unavailable("#B <= N^(s+eps)", sparsity_rhs),
    };
    let needed = params.c as f64 * (m_next as f64).powf(params.branching_exponent()?);
    Ok(vec![sparsity, Inequality::new("N >= C M^(d(n-1)/(dn-s-eps))", needed, n_next as f64, Evidence::Certified)])
}

/// Kept fine cubes per parent of `t`, in `t`'s order.
pub fn kept_per_parent(t: &GridSet, s: &GridSet, sched: &BranchingSchedule) -> Result<Vec<u64>> {
    let n = sched.branching(t.generation() + 1)?;
    let mut counts: HashMap<Vec<u64>, u64> = HashMap::new();
    for row in s.iter() {
        *counts.entry(row.iter().map(|&c| c / n).collect()).or_default() += 1;
    }
    Ok(t.iter().map(|r| counts.get(r).copied().unwrap_or(0)).collect())
}

/// Randomized single-scale avoidance.
///
/// Resamples one cube per cell until the collision set has at most `M^d / 2`
/// members, then deletes the first-block cubes of the collisions.
pub fn avoid_step(t: &GridSet, b: BadSet<'_>, params: &AvoidParams, sched: &BranchingSchedule) -> Result<(GridSet, StepReport)> {
    let k = t.generation();
    if t.kind() != GridKind::Fine || t.dim() != params.d {
        return Err(AvoidError::Invalid("T must be a fine set in R^d".into()));
    }
    let n_next = sched.branching(k + 1)?;
    let m_next = sched.intermediary(k + 1)?;
    let bad_count = b.count();
    let checks = hypothesis_checks(params, n_next, m_next, bad_count)?;
    enforce(params.policy, &checks)?;

    let cells = (m_next as u128).pow(params.d as u32);
    let allowed = (cells / 2) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best = usize::MAX;
    let mut accepted = None;
    let mut trials = 0;
    for _ in 0..params.retry_limit {
        trials += 1;
        let a = random_select(t, sched, &mut rng)?;
        let k_set = collision_set(&a, b, params.n)?;
        best = best.min(k_set.len());
        if k_set.len() <= allowed {
            accepted = Some((a, k_set, false));
            break;
        }
    }
    if accepted.is_none() {
        accepted = exhaustive_select(t, b, params, sched, allowed)?;
    }
    let (a, k_set, exhaustive) =
        accepted.ok_or(AvoidError::RetryExhausted { trials, best, allowed })?;

    let doomed: HashSet<&[u64]> = k_set.iter().map(|row| &row[..params.d]).collect();
    let s = a.filter(|row| !doomed.contains(row));
    let kept = kept_per_parent(t, &s, sched)?;
    let mut checks = checks;
    let min_kept = kept.iter().copied().min().unwrap_or(0);
    checks.push(Inequality::exact("|K(A)| <= M^d/2", k_set.len() as f64, allowed as f64, k_set.len() <= allowed));
    checks.push(Inequality::exact(
        "kept cells per parent >= M^d/2",
        cells as f64 / 2.0,
        min_kept as f64,
        t.is_empty() || 2 * min_kept as u128 >= cells,
    ));
    let report = StepReport {
        generation: k + 1,
        trials,
        exhaustive,
        selected: a.len(),
        collisions: k_set.len(),
        deleted: doomed.len(),
        cells_per_parent: cells as u64,
        kept_per_parent: kept,
        bad_count,
        checks,
    };
    Ok((s, report))
}

/// Walks every joint choice in a fixed order when the instance is tiny.
fn exhaustive_select(
    t: &GridSet,
    b: BadSet<'_>,
    params: &AvoidParams,
    sched: &BranchingSchedule,
    allowed: usize,
) -> Result<Option<(GridSet, GridSet, bool)>> {
    let k = t.generation();
    let m = sched.intermediary(k + 1)?;
    let q = sched.cell_ratio(k + 1)?;
    let d = params.d;
    let per_cell = (q as u128).pow(d as u32);
    let cells = t.len() * (m as usize).pow(d as u32);
    let total = per_cell.checked_pow(cells as u32);
    if !total.is_some_and(|x| x <= params.exhaustive_limit) {
        return Ok(None);
    }
    let mut cell_starts = Vec::with_capacity(cells);
    let mut off = vec![0u64; d];
    for row in t.iter() {
        off.iter_mut().for_each(|o| *o = 0);
        for _ in 0..(m as usize).pow(d as u32) {
            cell_starts.push(row.iter().zip(&off).map(|(&c, &j)| (c * m + j) * q).collect::<Vec<u64>>());
            advance(&mut off, m);
        }
    }
    let mut choice = vec![vec![0u64; d]; cells];
    let denom = sched.fine_denom(k + 1)?;
    loop {
        let mut flat = Vec::with_capacity(cells * d);
        for (start, ch) in cell_starts.iter().zip(&choice) {
            flat.extend(start.iter().zip(ch).map(|(s, c)| s + c));
        }
        let a = GridSet::from_flat(d, 1, k + 1, GridKind::Fine, denom, flat);
        let k_set = collision_set(&a, b, params.n)?;
        if k_set.len() <= allowed {
            return Ok(Some((a, k_set, true)));
        }
        let mut moved = false;
        for ch in choice.iter_mut().rev() {
            if advance(ch, q) {
                moved = true;
                break;
            }
        }
        if !moved {
            return Ok(None);
        }
    }
}

/// How often a fixed product cube lands inside `A^n` over a range of seeds.
pub fn containment_frequency(t: &GridSet, cube: &[u64], sched: &BranchingSchedule, seeds: std::ops::Range<u64>) -> Result<u64> {
    let d = t.dim();
    let hits: Result<Vec<u64>> = seeds
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_select(t, sched, &mut rng)?;
            Ok(u64::from(cube.chunks_exact(d).all(|blk| a.contains(blk))))
        })
        .collect();
    Ok(hits?.iter().sum())
}

/// Keleti's deterministic dissection for one dequeued interval.
///
/// Children are positions `1..=N` inside their parent. Parents inside `active`
/// keep positions divisible by 10; all others keep positions `5 mod 10`.
pub fn keleti_step(x: &GridSet, active: &CubeIndex, sched: &BranchingSchedule) -> Result<GridSet> {
    let k = x.generation();
    if x.dim() != 1 || x.kind() != GridKind::Fine {
        return Err(AvoidError::Invalid("Keleti steps act on fine sets in R".into()));
    }
    if active.kind != GridKind::Fine || active.generation > k {
        return Err(AvoidError::Invalid("the active interval must be a fine cube no finer than X".into()));
    }
    let n = sched.branching(k + 1)?;
    if n % 10 != 0 {
        return Err(AvoidError::Invalid(format!("N_{} = {n} is not a multiple of 10", k + 1)));
    }
    let ratio = sched.fine_denom(k)? / sched.fine_denom(active.generation)?;
    let mut flat = Vec::with_capacity(x.len() * (n / 10) as usize);
    for row in x.iter() {
        let inside = row[0] / ratio == active.coords[0];
        let first = if inside { 9 } else { 4 };
        flat.extend((first..n).step_by(10).map(|i| row[0] * n + i));
    }
    Ok(GridSet::from_sorted_flat(1, 1, k + 1, GridKind::Fine, sched.fine_denom(k + 1)?, flat))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub stage: usize,
    pub bad_before: usize,
    pub bad_after: usize,
    /// `#S * 2 #B / N^d`, the bound the wafer argument proves directly.
    pub direct_bound: f64,
    /// `2 D_k^d (M/N)^d #B`, the bound as stated for the reduction.
    pub stated_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpOutcome {
    pub sets: Vec<GridSet>,
    pub reductions: Vec<Reduction>,
    pub kept_per_parent: Vec<Vec<u64>>,
    pub checks: Vec<Inequality>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpParams {
    /// Constant in the branching hypothesis.
    pub c_f: f64,
    /// Codimension of the zero set.
    pub codim: usize,
    pub policy: HypothesisPolicy,
}

fn cells_of<'a>(q0: &'a [u64], m: u64) -> impl Iterator<Item = Vec<u64>> + 'a {
    let d = q0.len();
    let total = (m as usize).pow(d as u32);
    let mut off = vec![0u64; d];
    (0..total).map(move |i| {
        if i > 0 {
            advance(&mut off, m);
        }
        q0.iter().zip(&off).map(|(&c, &j)| c * m + j).collect()
    })
}

fn fine_in_cell<'a>(cell: &'a [u64], q: u64) -> impl Iterator<Item = Vec<u64>> + 'a {
    cells_of(cell, q)
}

/// Wafer/slab reductions followed by a final cell filter.
pub fn fp_step(ts: &[GridSet], b: &GridSet, sched: &BranchingSchedule, params: &FpParams) -> Result<FpOutcome> {
    let n = ts.len();
    if n < 2 {
        return Err(AvoidError::Invalid("need at least two families".into()));
    }
    let k = ts[0].generation();
    let d = ts[0].dim();
    if ts.iter().any(|t| t.generation() != k || t.dim() != d || t.kind() != GridKind::Fine) {
        return Err(AvoidError::Invalid("families must share generation and dimension".into()));
    }
    if b.dim() != d * n {
        return Err(AvoidError::Invalid("bad set dimension differs from d * n".into()));
    }
    for i in 0..n {
        for j in i + 1..n {
            if ts[i].iter().any(|r| ts[j].contains(r)) {
                return Err(AvoidError::NotDisjoint);
            }
        }
    }
    let big_n = sched.branching(k + 1)?;
    let m = sched.intermediary(k + 1)?;
    let q = big_n / m;
    let dk = sched.fine_denom(k)? as f64;
    let denom = sched.fine_denom(k + 1)?;
    let nd = (big_n as u128).pow(d as u32);
    let md = (m as u128).pow(d as u32);

    let mut checks = Vec::new();
    if params.codim > 0 {
        let rhs = (params.c_f * 2f64.powi(n as i32) * dk.powi((2 * d * n) as i32)).powf(1.0 / params.codim as f64)
            * (m as f64).powf((d * (n - 1)) as f64 / params.codim as f64);
        checks.push(Inequality::new("N >= [C 2^n D_k^(2dn)]^(1/m) M^(d(n-1)/m)", rhs, big_n as f64, Evidence::Certified));
    }
    enforce(params.policy, &checks)?;

    // Only cubes over the product of the families matter.
    let mut current: Vec<Vec<u64>> = b
        .iter()
        .filter(|row| row.chunks_exact(d).zip(ts).all(|(blk, t)| t.contains(&blk.iter().map(|&c| c / big_n).collect::<Vec<_>>())))
        .map(<[u64]>::to_vec)
        .collect();
    let mut sets = Vec::with_capacity(n);
    let mut reductions = Vec::new();
    let mut kept_all = Vec::new();
    for (stage, t) in ts.iter().enumerate() {
        let total = current.len() as u128;
        let mut chosen = Vec::new();
        let mut kept = Vec::with_capacity(t.len());
        if stage + 1 < n {
            let mut per_first: HashMap<&[u64], u128> = HashMap::new();
            for row in &current {
                *per_first.entry(&row[..d]).or_default() += 1;
            }
            for q0 in t.iter() {
                let mut kept_here = 0;
                for cell in cells_of(q0, m) {
                    let best = fine_in_cell(&cell, q)
                        .map(|f| {
                            let c = per_first.get(f.as_slice()).copied().unwrap_or(0);
                            (c, f)
                        })
                        .filter(|(c, _)| c * nd <= 2 * total)
                        .min_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
                    if let Some((_, f)) = best {
                        chosen.push(f);
                        kept_here += 1;
                    }
                }
                kept.push(kept_here);
            }
            let s = GridSet::from_rows(d, 1, k + 1, GridKind::Fine, denom, chosen)?;
            let tails: Vec<Vec<u64>> = current.iter().filter(|row| s.contains(&row[..d])).map(|row| row[d..].to_vec()).collect();
            let mut tails = tails;
            tails.sort_unstable();
            tails.dedup();
            reductions.push(Reduction {
                stage,
                bad_before: current.len(),
                bad_after: tails.len(),
                direct_bound: s.len() as f64 * 2.0 * total as f64 / nd as f64,
                stated_bound: 2.0 * dk.powi(d as i32) * (m as f64 / big_n as f64).powi(d as i32) * total as f64,
            });
            current = tails;
            sets.push(s);
        } else {
            let mut per_cell: HashMap<Vec<u64>, u128> = HashMap::new();
            let bad: HashSet<&[u64]> = current.iter().map(Vec::as_slice).collect();
            for row in &current {
                *per_cell.entry(row.iter().map(|&c| c / q).collect()).or_default() += 1;
            }
            for q0 in t.iter() {
                let mut kept_here = 0;
                for cell in cells_of(q0, m) {
                    let c = per_cell.get(&cell).copied().unwrap_or(0);
                    if c * md > 2 * total {
                        continue;
                    }
                    if let Some(f) = fine_in_cell(&cell, q).find(|f| !bad.contains(f.as_slice())) {
                        chosen.push(f);
                        kept_here += 1;
                    }
                }
                kept.push(kept_here);
            }
            sets.push(GridSet::from_rows(d, 1, k + 1, GridKind::Fine, denom, chosen)?);
        }
        kept_all.push(kept);
    }
    for r in &reductions {
        checks.push(Inequality::new(&format!("stage {} #B' <= #S 2#B/N^d", r.stage), r.bad_after as f64, r.direct_bound, Evidence::Certified));
        checks.push(Inequality::new(&format!("stage {} #B' <= 2 D_k^d (M/N)^d #B", r.stage), r.bad_after as f64, r.stated_bound, Evidence::Certified));
    }
    let min_kept = kept_all.iter().flatten().copied().min().unwrap_or(0);
    checks.push(Inequality::exact("kept cells per parent >= M^d/2", md as f64 / 2.0, min_kept as f64, 2 * min_kept as u128 >= md));
    Ok(FpOutcome { sets, reductions, kept_per_parent: kept_all, checks })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatheParams {
    pub c0: f64,
    pub c_big: f64,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub policy: HypothesisPolicy,
}

impl MatheParams {
    /// Midpoint of the feasible range `eps/c0 < (1 - eps)/C0`.
    pub fn eps_or_default(&self) -> Result<f64> {
        if !(self.c0 > 0.0 && self.c_big >= self.c0) {
            return Err(AvoidError::Invalid("need 0 < c0 <= C0".into()));
        }
        let sup = self.c0 / (self.c0 + self.c_big);
        let eps = self.eps.unwrap_or(sup / 2.0);
        if !(eps > 0.0 && eps < sup) {
            return Err(AvoidError::Invalid(format!("eps = {eps} outside (0, {sup})")));
        }
        Ok(eps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatheOutcome {
    pub sets: Vec<GridSet>,
    pub eps: f64,
    /// Shift of the first family in fine-side units.
    pub shift: u64,
    pub window: (f64, f64),
    /// Smallest `dist(f / r^m, Z) - C2 l / r^m` over all tuples, exact up to the final division.
    pub min_margin: f64,
    pub tuples: u64,
    pub checks: Vec<Inequality>,
}

/// Lattice shift: values of `f` on cell corners are multiples of `r^m`, and a
/// shift of the first coordinate moves them by a controlled fraction of `r^m`.
pub fn mathe_step(ts: &[GridSet], f: &Polynomial, params: &MatheParams, sched: &BranchingSchedule) -> Result<MatheOutcome> {
    let n = ts.len();
    let k = ts.first().ok_or_else(|| AvoidError::Invalid("no families".into()))?.generation();
    let d = ts[0].dim();
    if f.nvars != n * d {
        return Err(AvoidError::Invalid(format!("polynomial has {} variables, expected {}", f.nvars, n * d)));
    }
    let eps = params.eps_or_default()?;
    let deg = f.degree();
    if deg == 0 {
        return Err(AvoidError::Invalid("constant polynomial".into()));
    }
    let big_n = sched.branching(k + 1)?;
    let m = sched.intermediary(k + 1)?;
    let q = big_n / m;
    let dk = sched.fine_denom(k)?;
    let r = sched.inter_denom(k + 1)?;
    let denom = sched.fine_denom(k + 1)?;

    // Derivative in the first variable must stay inside [c0, C0] in absolute value.
    let df = f.partial(0);
    let total_boxes: u128 = ts.iter().map(|t| t.len() as u128).product();
    if total_boxes > TUPLE_BUDGET {
        return Err(AvoidError::Budget { size: total_boxes, budget: TUPLE_BUDGET });
    }
    let mut idx = vec![0usize; n];
    let mut bx = vec![(0.0, 0.0); n * d];
    if ts.iter().all(|t| !t.is_empty()) {
        loop {
            for (slot, &i) in idx.iter().enumerate() {
                for (axis, &c) in ts[slot].row(i).iter().enumerate() {
                    bx[slot * d + axis] = (c as f64 / dk as f64, (c + 1) as f64 / dk as f64);
                }
            }
            let (lo, hi) = df.enclose(&bx);
            if lo <= 0.0 && hi >= 0.0 {
                return Err(AvoidError::Invalid("the first partial derivative may vanish on the product".into()));
            }
            let (alo, ahi) = if lo > 0.0 { (lo, hi) } else { (-hi, -lo) };
            if alo < params.c0 * (1.0 - 1e-12) || ahi > params.c_big * (1.0 + 1e-12) {
                return Err(AvoidError::Invalid(format!("|d1 f| ranges over [{alo}, {ahi}], outside [c0, C0]")));
            }
            if !advance_multi(&mut idx, ts) {
                break;
            }
        }
    }

    // Window for the shift in units of 1/D: [eps/c0, (1-eps)/C0] * D / R^m.
    let scale = denom as f64 / (r as f64).powi(deg as i32);
    let lo = eps / params.c0 * scale;
    let hi = (1.0 - eps) / params.c_big * scale;
    let mut checks = vec![Inequality::new(
        "N >= D_k^(m-1) M^m",
        (dk as f64).powi(deg as i32 - 1) * (m as f64).powi(deg as i32),
        big_n as f64,
        Evidence::Certified,
    )];
    // The rounding slack C2 R^(m-1) / q must fit inside half the margin.
    let c2 = f.l1_gradient_bound();
    let slack = c2 * (r as f64).powi(deg as i32 - 1) / q as f64;
    checks.push(Inequality::new("N/M >= 2 C2 R^(m-1) / eps", 2.0 * slack * q as f64 / eps, q as f64, Evidence::Certified));
    enforce(params.policy, &checks)?;
    let shift = lo.ceil().max(0.0);
    if shift > hi {
        return Err(AvoidError::EmptyWindow { lo, hi });
    }
    let shift = shift as u64;
    if shift >= q {
        return Err(AvoidError::Invalid("shift leaves the intermediary cell".into()));
    }

    let mut sets = Vec::with_capacity(n);
    for (slot, t) in ts.iter().enumerate() {
        let mut flat = Vec::new();
        for row in t.iter() {
            for cell in cells_of(row, m) {
                let mut start: Vec<u64> = cell.iter().map(|&c| c * q).collect();
                if slot == 0 {
                    start[0] += shift;
                }
                flat.extend(start);
            }
        }
        sets.push(GridSet::from_flat(d, 1, k + 1, GridKind::Fine, denom, flat));
    }

    // Certify on every tuple of startpoints with exact integers.
    let qm = (q as i128).checked_pow(deg).ok_or_else(|| AvoidError::Invalid("q^m overflows".into()))?;
    let size: u128 = sets.iter().map(|s| s.len() as u128).product();
    if size > TUPLE_BUDGET {
        return Err(AvoidError::Budget { size, budget: TUPLE_BUDGET });
    }
    let mut min_dist = f64::INFINITY;
    let mut tuples = 0u64;
    let mut idx = vec![0usize; n];
    let mut num = vec![0i128; n * d];
    if sets.iter().all(|s| !s.is_empty()) {
        loop {
            for (slot, &i) in idx.iter().enumerate() {
                for (axis, &c) in sets[slot].row(i).iter().enumerate() {
                    num[slot * d + axis] = c as i128;
                }
            }
            let v = f
                .eval_scaled(&num, denom as i128)
                .ok_or_else(|| AvoidError::Invalid("exact evaluation overflows i128".into()))?;
            // f(x) R^m = v / q^m; its distance to Z is (v mod q^m) / q^m.
            let rem = v.rem_euclid(qm);
            let dist = rem.min(qm - rem) as f64 / qm as f64;
            min_dist = min_dist.min(dist);
            tuples += 1;
            if !advance_multi(&mut idx, &sets) {
                break;
            }
        }
    }
    let min_margin = min_dist - slack;
    checks.push(Inequality::new("eps/2 <= dist(f R^m, Z) - C2 l R^m", eps / 2.0, min_margin, Evidence::Certified));
    Ok(MatheOutcome { sets, eps, shift, window: (lo, hi), min_margin, tuples, checks })
}

fn advance_multi(idx: &mut [usize], sets: &[GridSet]) -> bool {
    for slot in (0..idx.len()).rev() {
        idx[slot] += 1;
        if idx[slot] < sets[slot].len() {
            return true;
        }
        idx[slot] = 0;
    }
    false
}

/// Exact rational `p / q` with `q > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub p: i64,
    pub q: i64,
}

impl Ratio {
    pub fn int(p: i64) -> Self {
        Ratio { p, q: 1 }
    }

    pub fn new(p: i64, q: i64) -> Self {
        let g = num::integer::gcd(p, q).max(1);
        let s = if q < 0 { -1 } else { 1 };
        Ratio { p: s * p / g, q: s * q / g }
    }

    fn value(self) -> f64 {
        self.p as f64 / self.q as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankOutcome {
    pub sets: Vec<GridSet>,
    pub offset: Vec<u64>,
    /// Product of denominators of the non-pivot coefficients.
    pub a_m: u64,
    pub pivots: Vec<usize>,
    pub offsets_examined: u64,
    pub min_kept_fraction: f64,
    pub checks: Vec<Inequality>,
}

/// Spectral norm by power iteration on `M^T M`.
pub fn operator_norm(rows: &[Vec<Ratio>]) -> f64 {
    let m: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x.value()).collect()).collect();
    let cols = m.first().map_or(0, Vec::len);
    let mut v = vec![1.0; cols];
    let mut norm = 0.0;
    for _ in 0..200 {
        let mv: Vec<f64> = m.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let mut w = vec![0.0; cols];
        for (r, &x) in m.iter().zip(&mv) {
            for (wi, a) in w.iter_mut().zip(r) {
                *wi += a * x;
            }
        }
        let len = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len == 0.0 {
            return 0.0;
        }
        v = w.iter().map(|x| x / len).collect();
        norm = len.sqrt();
    }
    norm
}

/// Offset search for a full-rank rational linear map `R^n -> R^m` whose pivot
/// columns are unit vectors.
pub fn lowrank_step(
    ts: &[GridSet],
    matrix: &[Vec<Ratio>],
    b: &GridSet,
    s: f64,
    eps: f64,
    sched: &BranchingSchedule,
    policy: HypothesisPolicy,
) -> Result<LowRankOutcome> {
    let n = ts.len();
    let m_rows = matrix.len();
    if m_rows == 0 || matrix.iter().any(|r| r.len() != n) || m_rows > n {
        return Err(AvoidError::Invalid("matrix must be m x n with 1 <= m <= n".into()));
    }
    if ts.iter().any(|t| t.dim() != 1) {
        return Err(AvoidError::Invalid("low-rank steps act on subsets of R".into()));
    }
    let k = ts[0].generation();
    if b.dim() != m_rows || b.generation() != k + 1 {
        return Err(AvoidError::Invalid("bad set must be generation k+1 in R^m".into()));
    }
    for i in 0..n {
        for j in i + 1..n {
            if ts[i].iter().any(|r| ts[j].contains(r)) {
                return Err(AvoidError::NotDisjoint);
            }
        }
    }
    let matrix: Vec<Vec<Ratio>> = matrix.iter().map(|r| r.iter().map(|x| Ratio::new(x.p, x.q)).collect()).collect();
    let mut pivots = Vec::with_capacity(m_rows);
    for j in 0..m_rows {
        let col = (0..n).find(|&i| !pivots.contains(&i) && (0..m_rows).all(|r| matrix[r][i] == Ratio::int(i64::from(r == j))));
        pivots.push(col.ok_or_else(|| AvoidError::Invalid(format!("no column maps to e_{}", j + 1)))?);
    }
    let mut a_m: u64 = 1;
    for i in (0..n).filter(|i| !pivots.contains(i)) {
        for row in &matrix {
            a_m = a_m.checked_mul(row[i].q as u64).ok_or_else(|| AvoidError::Invalid("A(M) overflows".into()))?;
        }
    }
    let big_n = sched.branching(k + 1)?;
    let m = sched.intermediary(k + 1)?;
    let q = big_n / m;
    let denom = sched.fine_denom(k + 1)?;
    if big_n % a_m != 0 {
        return Err(AvoidError::Invalid(format!("A(M) = {a_m} does not divide N = {big_n}")));
    }
    let mut checks = vec![Inequality::new("#B <= N^(s+eps)", b.len() as f64, (big_n as f64).powf(s + eps), Evidence::Certified)];
    let gap = m_rows as f64 - s - eps;
    if gap > 0.0 {
        checks.push(Inequality::new("N > M^(m/(m-s-eps))", (m as f64).powf(m_rows as f64 / gap), big_n as f64, Evidence::Empirical));
    }
    enforce(policy, &checks)?;

    // Cell starts in fine units; non-pivot families keep cells with A | a(R).
    let starts: Vec<Vec<u64>> = ts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut v: Vec<u64> = t.iter().flat_map(|row| cells_of(row, m)).filter(|c| pivots.contains(&i) || c[0] % a_m == 0).map(|c| c[0] * q).collect();
            v.sort_unstable();
            v
        })
        .collect();
    let size: u128 = starts.iter().map(|s| s.len() as u128).product();
    let offsets = (q as u128).pow(m_rows as u32);
    if size.saturating_mul(offsets) > TUPLE_BUDGET * 10 {
        return Err(AvoidError::Budget { size: size * offsets, budget: TUPLE_BUDGET * 10 });
    }
    // Images are exact rationals with common denominator `l` in fine units.
    let l = matrix.iter().flatten().fold(1i64, |acc, x| lcm(acc, x.q)) as i128;
    let scaled: Vec<Vec<i128>> = matrix.iter().map(|r| r.iter().map(|x| x.p as i128 * (l / x.q as i128)).collect()).collect();
    let norm = operator_norm(&matrix);
    let radius = 2.0 / norm;
    let bad: HashSet<&[u64]> = b.iter().collect();

    let mut offset = vec![0u64; m_rows];
    let mut examined = 0u64;
    loop {
        examined += 1;
        if offset_is_clear(&starts, &pivots, &offset, &scaled, l, radius, &bad, denom) {
            break;
        }
        if !advance(&mut offset, q) {
            return Err(AvoidError::NoOffset { examined });
        }
    }

    let mut sets = Vec::with_capacity(n);
    let mut min_frac = f64::INFINITY;
    for (i, t) in ts.iter().enumerate() {
        let shift = pivots.iter().position(|&p| p == i).map_or(0, |j| offset[j]);
        let flat: Vec<u64> = starts[i].iter().map(|&s| s + shift).collect();
        let set = GridSet::from_flat(1, 1, k + 1, GridKind::Fine, denom, flat);
        for kept in kept_per_parent(t, &set, sched)? {
            min_frac = min_frac.min(kept as f64 / m as f64);
        }
        sets.push(set);
    }
    checks.push(Inequality::new("kept fraction >= 1/A(M)", 1.0 / a_m as f64, min_frac, Evidence::Certified));
    Ok(LowRankOutcome { sets, offset, a_m, pivots, offsets_examined: examined, min_kept_fraction: min_frac, checks })
}

/// Whether every image point of the offset lattice keeps its distance from `B`
/// and every image box misses the closed cubes of `B`.
#[allow(clippy::too_many_arguments)]
fn offset_is_clear(
    starts: &[Vec<u64>],
    pivots: &[usize],
    offset: &[u64],
    scaled: &[Vec<i128>],
    l: i128,
    radius: f64,
    bad: &HashSet<&[u64]>,
    denom: u64,
) -> bool {
    let n = starts.len();
    let m_rows = scaled.len();
    if starts.iter().any(Vec::is_empty) {
        return true;
    }
    let shifts: Vec<u64> = (0..n).map(|i| pivots.iter().position(|&p| p == i).map_or(0, |j| offset[j])).collect();
    let mut idx = vec![0usize; n];
    let mut lo = vec![0i128; m_rows];
    let mut hi = vec![0i128; m_rows];
    let mut pt = vec![0i128; m_rows];
    loop {
        for j in 0..m_rows {
            let mut p = 0i128;
            let (mut a, mut bb) = (0i128, 0i128);
            for i in 0..n {
                let x = (starts[i][idx[i]] + shifts[i]) as i128;
                let c = scaled[j][i];
                p += c * x;
                if c < 0 {
                    a += c;
                } else {
                    bb += c;
                }
            }
            pt[j] = p;
            lo[j] = p + a;
            hi[j] = p + bb;
        }
        if image_hits(&pt, &lo, &hi, l, radius, bad, denom) {
            return false;
        }
        let mut moved = false;
        for slot in (0..n).rev() {
            idx[slot] += 1;
            if idx[slot] < starts[slot].len() {
                moved = true;
                break;
            }
            idx[slot] = 0;
        }
        if !moved {
            return true;
        }
    }
}

/// Checks the closed image box `[lo, hi] / l` and the point `pt / l` against `B`,
/// all in fine units.
fn image_hits(pt: &[i128], lo: &[i128], hi: &[i128], l: i128, radius: f64, bad: &HashSet<&[u64]>, denom: u64) -> bool {
    let m_rows = pt.len();
    // Candidate cubes b with b <= hi and b + 1 >= lo, widened by the radius.
    let reach = radius.ceil() as i128 + 1;
    let ranges: Vec<(i128, i128)> = (0..m_rows)
        .map(|j| {
            let a = lo[j].div_euclid(l) - 1 - reach;
            let b = hi[j].div_euclid(l) + reach;
            (a.max(0), b.min(denom as i128 - 1))
        })
        .collect();
    if ranges.iter().any(|r| r.0 > r.1) {
        return false;
    }
    let mut cur: Vec<i128> = ranges.iter().map(|r| r.0).collect();
    let mut key = vec![0u64; m_rows];
    loop {
        for (kk, &c) in key.iter_mut().zip(&cur) {
            *kk = c as u64;
        }
        if bad.contains(key.as_slice()) {
            let box_meets = (0..m_rows).all(|j| cur[j] * l <= hi[j] && (cur[j] + 1) * l >= lo[j]);
            let dist2: f64 = (0..m_rows)
                .map(|j| {
                    let x = pt[j] as f64 / l as f64;
                    let c = cur[j] as f64;
                    let gap = if x < c { c - x } else if x > c + 1.0 { x - c - 1.0 } else { 0.0 };
                    gap * gap
                })
                .sum();
            if box_meets || dist2.sqrt() <= radius {
                return true;
            }
        }
        let mut moved = false;
        for j in (0..m_rows).rev() {
            if cur[j] < ranges[j].1 {
                cur[j] += 1;
                moved = true;
                break;
            }
            cur[j] = ranges[j].0;
        }
        if !moved {
            return false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_branching_bound() {
        assert_eq!(c_constant(1.0, 1, 2).unwrap(), 4);
        let p = AvoidParams::new(1.0, 0.0, 1, 2, 0).unwrap();
        assert_eq!(min_branching(&p, 4).unwrap(), 16);
        assert_eq!(min_branching(&p, 1).unwrap(), 4);
        assert!(c_constant(2.0, 1, 2).is_err());
    }

    #[test]
    fn one_child_per_cell_when_n_equals_m() {
        let s = BranchingSchedule::constant(1, 4, 4, 2).unwrap();
        let t = GridSet::unit(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_select(&t, &s, &mut rng).unwrap();
        assert_eq!(a.flat(), &[0, 1, 2, 3]);
    }

    #[test]
    fn collision_set_small_cases() {
        let a = GridSet::from_rows(1, 1, 1, GridKind::Fine, 4, vec![vec![0], vec![1]]).unwrap();
        let b = GridSet::from_rows(1, 2, 1, GridKind::Fine, 4, vec![vec![0, 1], vec![1, 1]]).unwrap();
        let k = collision_set(&a, BadSet::Grid(&b), 2).unwrap();
        assert_eq!(k.flat(), &[0, 1]);
    }

    #[test]
    fn keleti_rejects_non_decimal_branching() {
        let s = BranchingSchedule::new(1, vec![16], vec![4]).unwrap();
        let r = keleti_step(&GridSet::unit(1), &CubeIndex::fine(0, vec![0]), &s);
        assert!(r.is_err());
    }

    #[test]
    fn mathe_default_eps_is_midpoint() {
        let p = MatheParams { c0: 1.0, c_big: 1.0, eps: None, policy: HypothesisPolicy::Enforce };
        assert_eq!(p.eps_or_default().unwrap(), 0.25);
    }
}
