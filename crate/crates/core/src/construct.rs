//! Multi-scale constructions: the randomized main construction, Keleti's
//! queue, and the queue of n-tuples driving the wafer reductions.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avoidance::{
    avoid_step, c_constant, derive_seed, fp_step, keleti_step, AvoidError, AvoidParams, BadSet, Evidence, FpParams,
    HypothesisPolicy, Inequality, Reduction, StepReport, TUPLE_BUDGET,
};
use crate::configs::{ConfigError, CoverOracle};
use crate::dimension::DimensionError;
use crate::fourier::{fourier_step, FourierError, FourierParams, FourierReport};
use crate::dyadic::{pow2_at_least, thicken, BranchingSchedule, CubeIndex, DyadicError, GridKind, GridSet};
use crate::measure::{canonical_weights, frostman_exponent, FrostmanWitness, MeasureError};
use crate::verify::{assert_avoids, ProcessedInterval, Target, VerifyError, VerifyReport};

#[derive(Debug, Error)]
pub enum ConstructError {
    #[error("integer budget of {bits} bits reached at generation {generation}")]
    Budget { generation: usize, bits: u32 },
    #[error("oracle `{tag}` cannot meet #B <= N^(s+eps) at generation {generation} within the budget")]
    Sparsity { tag: String, generation: usize },
    #[error("hypothesis `{name}` fails at generation {generation}: {lhs} vs {rhs}")]
    Hypothesis { generation: usize, name: String, lhs: f64, rhs: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Avoid(#[from] AvoidError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Grid(#[from] DyadicError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error(transparent)]
    Dimension(#[from] DimensionError),
}

type Result<T> = std::result::Result<T, ConstructError>;

/// `min((dn - s)/4, 1/(k+1))`.
pub fn default_eps(d: usize, n: usize, s: f64, k: usize) -> f64 {
    (((d * n) as f64 - s) / 4.0).min(1.0 / (k as f64 + 1.0))
}

/// Largest power of two strictly below `(N/C)^{(dn-s-eps)/(d(n-1))}`, clamped to `[1, N]`.
pub fn choose_intermediary(n_big: u64, params: &AvoidParams) -> u64 {
    let e = ((params.d * params.n) as f64 - params.s - params.eps) / (params.d * (params.n - 1)) as f64;
    let target = (n_big as f64 / params.c as f64).powf(e);
    let mut m = 1u64;
    while m * 2 <= n_big && ((m * 2) as f64) < target * (1.0 - 1e-12) {
        m *= 2;
    }
    m
}

/// How the bad set of one generation is held.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoverRecord {
    Grid { set: GridSet },
    /// Too large to list; answered cube by cube.
    Oracle { denom: u64, count: Option<u128> },
}

impl CoverRecord {
    pub fn count(&self) -> Option<u128> {
        match self {
            CoverRecord::Grid { set } => Some(set.len() as u128),
            CoverRecord::Oracle { count, .. } => *count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub generation: usize,
    pub oracle: usize,
    pub tag: String,
    pub eps: f64,
    pub bad: CoverRecord,
    pub checks: Vec<Inequality>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongCoverPlan {
    pub d: usize,
    pub n: usize,
    pub s: f64,
    pub schedule: BranchingSchedule,
    pub steps: Vec<PlannedStep>,
}

impl StrongCoverPlan {
    pub fn interleave(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.oracle).collect()
    }
}

/// Where the branching factors come from.
#[derive(Clone, Debug)]
pub enum ScheduleChoice {
    /// Least admissible powers of two, doubled until the cover is sparse enough.
    Search,
    Fixed(BranchingSchedule),
}

fn oracle_shape(oracles: &[Arc<dyn CoverOracle>]) -> Result<(usize, usize, f64)> {
    let first = oracles.first().ok_or_else(|| ConstructError::Invalid("no oracles".into()))?;
    let (d, n) = (first.point_dim(), first.arity());
    if oracles.iter().any(|o| o.point_dim() != d || o.arity() != n) {
        return Err(ConstructError::Invalid("oracles must share arity and point dimension".into()));
    }
    let s = oracles.iter().map(|o| o.dim_bound()).fold(0.0, f64::max);
    Ok((d, n, s))
}

fn record_cover(oracle: &dyn CoverOracle, generation: usize, denom: u64) -> Result<CoverRecord> {
    match oracle.cover(generation, denom) {
        Ok(set) => Ok(CoverRecord::Grid { set }),
        Err(ConfigError::ScanBudget { .. }) => Ok(CoverRecord::Oracle { denom, count: None }),
        Err(e) => Err(e.into()),
    }
}

/// Picks `i_k` round-robin and records `B_k` with its sparsity and decay checks.
pub fn build_strong_cover(
    oracles: &[Arc<dyn CoverOracle>],
    eps: &[f64],
    depth: usize,
    choice: ScheduleChoice,
    policy: HypothesisPolicy,
) -> Result<StrongCoverPlan> {
    let (d, n, s) = oracle_shape(oracles)?;
    let gap = (d * n) as f64 - s;
    if gap <= 0.0 {
        return Err(ConstructError::Invalid("s = dn leaves nothing to construct".into()));
    }
    if eps.len() < depth {
        return Err(ConstructError::Invalid(format!("{} eps values for depth {depth}", eps.len())));
    }
    if eps[..depth].iter().any(|&e| !(e > 0.0 && e < gap / 2.0)) || eps[..depth].windows(2).any(|w| w[1] > w[0]) {
        return Err(ConstructError::Invalid("eps_k must decrease inside (0, (dn-s)/2)".into()));
    }
    let c = c_constant(s, d, n)?;
    let mut sched = BranchingSchedule::new(d, vec![], vec![])?;
    let mut steps = Vec::with_capacity(depth);
    for k in 1..=depth {
        let i = (k - 1) % oracles.len();
        let oracle = oracles[i].as_ref();
        let e = eps[k - 1];
        let prev = sched.fine_denom(k - 1)?;
        let decay = (prev as f64).powf(1.0 / e).max(c as f64);
        let params = AvoidParams { s, eps: e, d, n, c, retry_limit: 0, exhaustive_limit: 0, seed: 0, policy };
        let (n_k, m_k, bad) = match &choice {
            ScheduleChoice::Fixed(fixed) => {
                let (nk, mk) = (fixed.branching(k)?, fixed.intermediary(k)?);
                let denom = prev.checked_mul(nk).ok_or(ConstructError::Budget { generation: k, bits: sched.budget() })?;
                (nk, mk, record_cover(oracle, k, denom)?)
            }
            ScheduleChoice::Search => {
                let mut nk = pow2_at_least(decay);
                loop {
                    let denom = prev
                        .checked_mul(nk)
                        .filter(|&x| u128::from(x) <= 1u128 << sched.budget())
                        .ok_or(ConstructError::Budget { generation: k, bits: sched.budget() })?;
                    let bad = record_cover(oracle, k, denom)?;
                    match bad.count() {
                        Some(cnt) if (cnt as f64) <= (nk as f64).powf(s + e) => break (nk, choose_intermediary(nk, &params), bad),
                        Some(_) => nk *= 2,
                        None => return Err(ConstructError::Sparsity { tag: oracle.tag().to_string(), generation: k }),
                    }
                }
            }
        };
        sched = sched.push(n_k, m_k)?;
        let bound = (n_k as f64).powf(s + e);
        let sparsity = match bad.count() {
            Some(cnt) => Inequality::new("#B_k <= N_k^(s+eps_k)", cnt as f64, bound, Evidence::Certified),
            None => Inequality { name: "#B_k <= N_k^(s+eps_k)".into(), lhs: f64::NAN, rhs: bound, holds: false, evidence: Evidence::Unavailable },
        };
        let checks = vec![sparsity, Inequality::new("N_k >= max(C, D_{k-1}^(1/eps_k))", decay, n_k as f64, Evidence::Certified)];
        if policy == HypothesisPolicy::Enforce {
            if let Some(f) = checks.iter().find(|c| !c.holds) {
                return Err(ConstructError::Hypothesis { generation: k, name: f.name.clone(), lhs: f.lhs, rhs: f.rhs });
            }
        }
        steps.push(PlannedStep { generation: k, oracle: i, tag: oracle.tag().to_string(), eps: e, bad, checks });
    }
    Ok(StrongCoverPlan { d, n, s, schedule: sched, steps })
}

/// One entry of a construction history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepLog {
    Avoid { oracle: usize, tag: String, eps: f64, report: StepReport },
    Keleti { interval: CubeIndex },
    Fp { tuple: Vec<CubeIndex>, reductions: Vec<Reduction>, kept_per_parent: Vec<Vec<u64>>, checks: Vec<Inequality> },
    Fourier { report: FourierReport },
    /// The queue was empty or the dequeued tuple no longer met the set.
    Refine { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionState {
    pub schedule: BranchingSchedule,
    /// `X_0, ..., X_k`.
    pub levels: Vec<GridSet>,
    pub steps: Vec<StepLog>,
    pub interleave: Vec<usize>,
    pub processed: Vec<ProcessedInterval>,
    pub fp_processed: Vec<(usize, Vec<CubeIndex>)>,
    /// Tuples offered to the queue and tuples turned away by the cap.
    pub queue_offered: u128,
    pub queue_dropped: u128,
    pub certifications: Vec<VerifyReport>,
}

impl ConstructionState {
    pub fn new(schedule: BranchingSchedule) -> Self {
        ConstructionState {
            levels: vec![GridSet::unit(schedule.dims())],
            schedule,
            steps: Vec::new(),
            interleave: Vec::new(),
            processed: Vec::new(),
            fp_processed: Vec::new(),
            queue_offered: 0,
            queue_dropped: 0,
            certifications: Vec::new(),
        }
    }

    pub fn generation(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn current(&self) -> &GridSet {
        self.levels.last().expect("levels start with X_0")
    }

    /// Whether every cube of each level has its parent in the previous level.
    pub fn refines(&self) -> bool {
        self.levels.windows(2).all(|w| {
            let Ok(n) = self.schedule.branching(w[1].generation()) else { return false };
            w[1].iter().all(|r| w[0].contains(&r.iter().map(|&c| c / n).collect::<Vec<_>>()))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MainParams {
    pub seed: u64,
    pub policy: HypothesisPolicy,
    pub retry_limit: usize,
    pub exhaustive_limit: u128,
    /// Tuple budget for the final certification.
    pub verify_budget: u128,
}

impl MainParams {
    pub fn new(seed: u64, policy: HypothesisPolicy) -> Self {
        MainParams { seed, policy, retry_limit: 64, exhaustive_limit: 1 << 16, verify_budget: crate::verify::DEFAULT_BUDGET }
    }
}

/// Applies the avoidance step at every planned scale, then certifies every
/// coarsening of the final set against its own bad set.
pub fn iterate_main(plan: &StrongCoverPlan, oracles: &[Arc<dyn CoverOracle>], params: &MainParams, steps: usize) -> Result<ConstructionState> {
    if steps > plan.steps.len() {
        return Err(ConstructError::Invalid(format!("plan has {} steps, {steps} requested", plan.steps.len())));
    }
    let c = c_constant(plan.s, plan.d, plan.n)?;
    let mut state = ConstructionState::new(plan.schedule.truncated(steps));
    for (k, step) in plan.steps.iter().take(steps).enumerate() {
        let oracle = oracles[step.oracle].as_ref();
        let bad = match &step.bad {
            CoverRecord::Grid { set } => BadSet::Grid(set),
            CoverRecord::Oracle { denom, .. } => BadSet::Oracle { oracle, denom: *denom },
        };
        let ap = AvoidParams {
            s: plan.s,
            eps: step.eps,
            d: plan.d,
            n: plan.n,
            c,
            retry_limit: params.retry_limit,
            exhaustive_limit: params.exhaustive_limit,
            seed: derive_seed(params.seed, k as u64),
            policy: params.policy,
        };
        let (next, report) = avoid_step(state.current(), bad, &ap, &plan.schedule)?;
        state.levels.push(next);
        state.interleave.push(step.oracle);
        state.steps.push(StepLog::Avoid { oracle: step.oracle, tag: step.tag.clone(), eps: step.eps, report });
    }
    for (j, step) in plan.steps.iter().take(steps).enumerate().map(|(i, s)| (i + 1, s)) {
        let anc = thicken(state.current(), j, &plan.schedule)?;
        let target = match &step.bad {
            CoverRecord::Grid { set } => Target::Grid(set),
            CoverRecord::Oracle { denom, .. } => Target::Oracle(oracles[step.oracle].as_ref(), *denom),
        };
        let mut report = assert_avoids(&anc, target, plan.n, params.verify_budget)?;
        report.check = format!("avoids B_{j}");
        state.certifications.push(report);
    }
    Ok(state)
}

/// Keleti's queue: the interval taken off the front gets the "0 mod 10"
/// children, everything else the "5 mod 10" children, and all new intervals
/// join the back of the queue.
pub fn iterate_keleti(sched: &BranchingSchedule, depth: usize) -> Result<ConstructionState> {
    let mut state = ConstructionState::new(sched.truncated(depth));
    // Segments (generation, start, end) of the level sets, in queue order.
    let mut queue: VecDeque<(usize, usize, usize)> = VecDeque::from([(0, 0, 1)]);
    for k in 0..depth {
        let (g, start, end) = queue.pop_front().ok_or_else(|| ConstructError::Invalid("queue ran dry".into()))?;
        if start + 1 < end {
            queue.push_front((g, start + 1, end));
        }
        let interval = state.levels[g].cube(start);
        let next = keleti_step(state.current(), &interval, sched)?;
        queue.push_back((k + 1, 0, next.len()));
        state.processed.push(ProcessedInterval { interval: interval.clone(), step: k });
        state.steps.push(StepLog::Keleti { interval });
        state.levels.push(next);
    }
    state.queue_offered = queue.iter().map(|s| (s.2 - s.1) as u128).sum::<u128>() + depth as u128;
    Ok(state)
}

/// Fourier-controlled steps from `[0,1]`, each avoiding the oracle's cover
/// at the new generation. Step `k` draws from stream `k` of the seed.
pub fn iterate_fourier(oracle: Option<&dyn CoverOracle>, sched: &BranchingSchedule, depth: usize, params: &FourierParams) -> Result<ConstructionState> {
    if sched.dims() != 1 {
        return Err(ConstructError::Invalid("the Fourier pipeline works in R only".into()));
    }
    let mut state = ConstructionState::new(sched.truncated(depth));
    for k in 0..depth {
        let denom = sched.fine_denom(k + 1)?;
        let record = match oracle {
            Some(o) => Some(record_cover(o, k + 1, denom)?),
            None => None,
        };
        let empty = GridSet::empty(1, params.n, k + 1, GridKind::Fine, denom);
        let bad = match (&record, oracle) {
            (Some(CoverRecord::Grid { set }), _) => BadSet::Grid(set),
            (Some(CoverRecord::Oracle { denom, .. }), Some(o)) => BadSet::Oracle { oracle: o, denom: *denom },
            _ => BadSet::Grid(&empty),
        };
        let step = FourierParams { seed: derive_seed(params.seed, k as u64), ..params.clone() };
        let (next, report) = fourier_step(state.current(), bad, &step, sched)?;
        state.levels.push(next);
        state.steps.push(StepLog::Fourier { report });
    }
    Ok(state)
}

/// Default cap on queued tuples.
pub const QUEUE_CAP: usize = 10_000;

fn children_of(x: &GridSet, sched: &BranchingSchedule) -> Result<GridSet> {
    let k = x.generation();
    let n = sched.branching(k + 1)?;
    let d = x.dim();
    let per = (n as usize).pow(d as u32);
    let mut flat = Vec::with_capacity(x.len() * per * d);
    let mut off = vec![0u64; d];
    for row in x.iter() {
        off.iter_mut().for_each(|o| *o = 0);
        for _ in 0..per {
            flat.extend(row.iter().zip(&off).map(|(&c, &j)| c * n + j));
            for axis in (0..d).rev() {
                off[axis] += 1;
                if off[axis] < n {
                    break;
                }
                off[axis] = 0;
            }
        }
    }
    Ok(GridSet::from_flat(d, 1, k + 1, GridKind::Fine, sched.fine_denom(k + 1)?, flat))
}

fn offer_tuples(queue: &mut VecDeque<(usize, Vec<CubeIndex>)>, x: &GridSet, n: usize, cap: usize) -> (u128, u128) {
    let len = x.len();
    let offered: u128 = (0..n).map(|i| len.saturating_sub(i) as u128).product();
    let mut admitted = 0u128;
    let mut idx = vec![0usize; n];
    if len >= n {
        'walk: loop {
            if queue.len() >= cap {
                break;
            }
            if idx.iter().enumerate().all(|(i, a)| !idx[..i].contains(a)) {
                queue.push_back((x.generation(), idx.iter().map(|&i| x.cube(i)).collect()));
                admitted += 1;
            }
            for slot in (0..n).rev() {
                idx[slot] += 1;
                if idx[slot] < len {
                    continue 'walk;
                }
                idx[slot] = 0;
            }
            break;
        }
    }
    (offered, offered - admitted)
}

/// Fraser–Pramanik style queue over `n`-tuples of disjoint cubes.
///
/// The first generation is the full grid; each later step dequeues one tuple,
/// replaces the parts of the current set inside it by the reduced sets, and
/// offers every ordered tuple of distinct new cubes to the capped queue.
pub fn iterate_fp(oracle: &dyn CoverOracle, sched: &BranchingSchedule, depth: usize, cap: usize, params: &FpParams) -> Result<ConstructionState> {
    let n = oracle.arity();
    let d = oracle.point_dim();
    if sched.dims() != d || depth == 0 {
        return Err(ConstructError::Invalid("schedule dimension differs from the oracle's, or depth is zero".into()));
    }
    let mut state = ConstructionState::new(sched.truncated(depth));
    let x1 = GridSet::full(d, 1, sched)?;
    state.steps.push(StepLog::Refine { reason: "first generation is the full grid".into() });
    state.levels.push(x1);
    let mut queue = VecDeque::new();
    let (o, dr) = offer_tuples(&mut queue, state.current(), n, cap);
    state.queue_offered += o;
    state.queue_dropped += dr;
    for k in 1..depth {
        let x = state.current().clone();
        let Some((g, tuple)) = queue.pop_front() else {
            state.levels.push(children_of(&x, sched)?);
            state.steps.push(StepLog::Refine { reason: "queue empty".into() });
            continue;
        };
        let ratio = sched.fine_denom(k)? / sched.fine_denom(g)?;
        let ts: Vec<GridSet> = tuple
            .iter()
            .map(|t| x.filter(|r| r.iter().zip(&t.coords).all(|(&c, &a)| c / ratio == a)))
            .collect();
        if ts.iter().any(GridSet::is_empty) {
            state.levels.push(children_of(&x, sched)?);
            state.steps.push(StepLog::Refine { reason: "dequeued tuple misses the current set".into() });
            continue;
        }
        let kids: Vec<GridSet> = ts.iter().map(|t| children_of(t, sched)).collect::<Result<_>>()?;
        let size: u128 = kids.iter().map(|c| c.len() as u128).product();
        if size > TUPLE_BUDGET {
            return Err(AvoidError::Budget { size, budget: TUPLE_BUDGET }.into());
        }
        let denom = sched.fine_denom(k + 1)?;
        let mut flat = Vec::new();
        let mut idx = vec![0usize; n];
        let mut row = vec![0u64; n * d];
        'odo: loop {
            for (slot, &i) in idx.iter().enumerate() {
                row[slot * d..(slot + 1) * d].copy_from_slice(kids[slot].row(i));
            }
            if oracle.contains(denom, &row) {
                flat.extend_from_slice(&row);
            }
            for slot in (0..n).rev() {
                idx[slot] += 1;
                if idx[slot] < kids[slot].len() {
                    continue 'odo;
                }
                idx[slot] = 0;
            }
            break;
        }
        let bad = GridSet::from_rows(n * d, 1, k + 1, GridKind::Fine, denom, flat.chunks_exact(n * d).map(<[u64]>::to_vec))?;
        let out = fp_step(&ts, &bad, sched, params)?;
        let inside: HashSet<&[u64]> = ts.iter().flat_map(|t| t.iter()).collect();
        let rest = x.filter(|r| !inside.contains(r));
        let mut next = children_of(&rest, sched)?;
        for s in &out.sets {
            next = next.union(s)?;
        }
        state.fp_processed.push((k, tuple.clone()));
        state.steps.push(StepLog::Fp { tuple, reductions: out.reductions, kept_per_parent: out.kept_per_parent, checks: out.checks });
        state.levels.push(next);
        let (o, dr) = offer_tuples(&mut queue, state.current(), n, cap);
        state.queue_offered += o;
        state.queue_dropped += dr;
    }
    Ok(state)
}

/// No product of final cubes inside a processed tuple meets the cover at the
/// generation that tuple's step produced.
pub fn processed_tuple_check(state: &ConstructionState, oracle: &dyn CoverOracle, budget: u128) -> Result<VerifyReport> {
    let started = std::time::Instant::now();
    let sched = &state.schedule;
    let x = state.current();
    let n = oracle.arity();
    let d = oracle.point_dim();
    let mut report = VerifyReport { check: "processed_tuple_check".into(), tuples: 0, violation_count: 0, violations: Vec::new(), elapsed: Default::default() };
    for (k, tuple) in &state.fp_processed {
        let out_gen = k + 1;
        if out_gen > x.generation() {
            continue;
        }
        let anc = thicken(x, out_gen, sched)?;
        let g = tuple[0].generation;
        let ratio = sched.fine_denom(out_gen)? / sched.fine_denom(g)?;
        let parts: Vec<Vec<&[u64]>> = tuple
            .iter()
            .map(|t| anc.iter().filter(|r| r.iter().zip(&t.coords).all(|(&c, &a)| c / ratio == a)).collect())
            .collect();
        let size: u128 = parts.iter().map(|p| p.len() as u128).product();
        if report.tuples as u128 + size > budget {
            return Err(VerifyError::Budget { tuples: report.tuples as u128 + size, budget }.into());
        }
        if parts.iter().any(Vec::is_empty) {
            continue;
        }
        let denom = sched.fine_denom(out_gen)?;
        let mut idx = vec![0usize; n];
        let mut row = vec![0u64; n * d];
        'odo: loop {
            for (slot, &i) in idx.iter().enumerate() {
                row[slot * d..(slot + 1) * d].copy_from_slice(parts[slot][i]);
            }
            report.tuples += 1;
            if oracle.contains(denom, &row) {
                report.violation_count += 1;
                if report.violations.len() < crate::verify::VIOLATION_CAP {
                    report.violations.push(row.clone());
                }
            }
            for slot in (0..n).rev() {
                idx[slot] += 1;
                if idx[slot] < parts[slot].len() {
                    continue 'odo;
                }
                idx[slot] = 0;
            }
            break;
        }
    }
    report.elapsed = started.elapsed();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    /// `(nd - s)/(n - 1)`, or 0 when `s = dn`.
    pub target: f64,
    pub frostman: Option<FrostmanWitness>,
    pub checks: Vec<Inequality>,
    /// `log D_k / log N_{k+1}`, which must tend to 0.
    pub decay_ratios: Vec<f64>,
    /// `log M_k / log N_k`, whose infimum is the realized scale exponent.
    pub scale_exponents: Vec<f64>,
}

pub fn dimension_target(d: usize, n: usize, s: f64) -> f64 {
    if s >= (d * n) as f64 || n < 2 {
        return 0.0;
    }
    ((n * d) as f64 - s) / (n - 1) as f64
}

/// Target dimension, realized Frostman exponent, and the single-selection,
/// decay and change-of-scale conditions on the realized schedule.
pub fn dimension_report(state: &ConstructionState, d: usize, n: usize, s: f64) -> Result<DimensionReport> {
    let target = dimension_target(d, n, s);
    if target == 0.0 {
        return Ok(DimensionReport { target, frostman: None, checks: Vec::new(), decay_ratios: Vec::new(), scale_exponents: Vec::new() });
    }
    let sched = &state.schedule;
    let tree = canonical_weights(&state.levels, sched)?;
    let frostman = frostman_exponent(&tree, 1..=state.generation()).ok();

    // Single selection: at most one kept cube per cell, and at least half the cells used.
    let (mut worst_multi, mut worst_frac) = (0u64, f64::INFINITY);
    for w in state.levels.windows(2) {
        let k1 = w[1].generation();
        let q = sched.cell_ratio(k1)?;
        let m = sched.intermediary(k1)?;
        let n_k = sched.branching(k1)?;
        let mut per_cell = std::collections::HashMap::<Vec<u64>, u64>::new();
        for r in w[1].iter() {
            *per_cell.entry(r.iter().map(|&c| c / q).collect()).or_default() += 1;
        }
        worst_multi = worst_multi.max(per_cell.values().copied().max().unwrap_or(0));
        let mut cells_per_parent = std::collections::HashMap::<Vec<u64>, u64>::new();
        for cell in per_cell.keys() {
            *cells_per_parent.entry(cell.iter().map(|&c| c * q / n_k).collect()).or_default() += 1;
        }
        let total = (m as f64).powi(d as i32);
        for parent in w[0].iter() {
            let used = cells_per_parent.get(parent).copied().unwrap_or(0);
            worst_frac = worst_frac.min(used as f64 / total);
        }
    }
    let checks = vec![
        Inequality::exact("kept cubes per cell <= 1", worst_multi as f64, 1.0, worst_multi <= 1),
        Inequality::exact("used cells per parent >= 1/2", 0.5, worst_frac, worst_frac >= 0.5),
    ];
    let ks = sched.depth();
    let decay_ratios = (1..ks).map(|k| (sched.fine_denom(k).unwrap() as f64).ln() / (sched.branching(k + 1).unwrap() as f64).ln()).collect();
    let scale_exponents = (1..=ks)
        .map(|k| (sched.intermediary(k).unwrap() as f64).ln() / (sched.branching(k).unwrap() as f64).ln())
        .collect();
    Ok(DimensionReport { target, frostman, checks, decay_ratios, scale_exponents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::configs::{explicit_cover, zero_set_cover, ZeroMap};

    #[test]
    fn intermediary_examples() {
        let p = AvoidParams::new(1.0, 0.0, 1, 2, 0).unwrap();
        assert_eq!(choose_intermediary(64, &p), 8);
        assert_eq!(choose_intermediary(4, &p), 1);
        assert_eq!(choose_intermediary(2, &p), 1);
    }

    #[test]
    fn empty_covers_give_the_random_cantor_set() {
        let empty: Arc<dyn CoverOracle> = Arc::new(explicit_cover(2, 1, 1.0, "none", vec![]).unwrap());
        let sched = BranchingSchedule::constant(1, 16, 4, 3).unwrap();
        let plan = build_strong_cover(&[empty.clone()], &[0.25; 3], 3, ScheduleChoice::Fixed(sched), HypothesisPolicy::Report).unwrap();
        let state = iterate_main(&plan, &[empty], &MainParams::new(1, HypothesisPolicy::Report), 3).unwrap();
        assert_eq!(state.current().len(), 64);
        assert!(state.refines());
    }

    #[test]
    fn round_robin_interleave() {
        let a: Arc<dyn CoverOracle> = Arc::new(explicit_cover(2, 1, 1.0, "a", vec![]).unwrap());
        let b: Arc<dyn CoverOracle> = Arc::new(explicit_cover(2, 1, 1.0, "b", vec![]).unwrap());
        let sched = BranchingSchedule::constant(1, 4, 2, 4).unwrap();
        let plan = build_strong_cover(&[a, b], &[0.25; 4], 4, ScheduleChoice::Fixed(sched), HypothesisPolicy::Report).unwrap();
        assert_eq!(plan.interleave(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn keleti_first_step() {
        let s = BranchingSchedule::new(1, vec![20], vec![20]).unwrap();
        let state = iterate_keleti(&s, 1).unwrap();
        assert_eq!(state.current().flat(), &[9, 19]);
    }

    #[test]
    fn fp_without_zeros_never_deletes() {
        let map = ZeroMap::Affine { rows: vec![vec![0.0, 0.0]], offsets: vec![1.0] };
        let z = zero_set_cover(map, Some(0.0), 2, 1, "none").unwrap();
        let s = BranchingSchedule::constant(1, 4, 2, 2).unwrap();
        let params = FpParams { c_f: 1.0, codim: 1, policy: HypothesisPolicy::Report };
        let state = iterate_fp(&z, &s, 2, 100, &params).unwrap();
        assert_eq!(state.levels[1].len(), 4);
        // 4*3 tuples at the first generation, then 12*11 with 11 still queued under a cap of 100.
        assert_eq!((state.queue_offered, state.queue_dropped), (12 + 132, 132 - 89));
        // Two whole cubes replaced by one cube per cell each, the rest refined fully.
        assert_eq!(state.current().len(), 2 * 4 + 2 * 2);
    }
}
