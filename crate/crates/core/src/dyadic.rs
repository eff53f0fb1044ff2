//! Cube bookkeeping for grids with variable branching factors.
//!
//! Generation `k` fine cubes have side `1/D_k` with `D_k = N_1 * ... * N_k`.
//! Intermediary cubes of generation `k` have side `1/R_k` with
//! `R_k = D_{k-1} * M_k`, so they sit between generations `k-1` and `k`.
//! Everything is stored as integer coordinates at the relevant denominator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BUDGET_BITS: u32 = 62;
pub const BUDGET_ENV: &str = "FRACTAL_AVOID_BUDGET_BITS";

/// Integer-width cap for denominators, read from the environment.
pub fn budget_bits() -> u32 {
    std::env::var(BUDGET_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<u32>().ok())
        .map(|b| b.clamp(1, 63))
        .unwrap_or(DEFAULT_BUDGET_BITS)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DyadicError {
    #[error("denominator at generation {generation} exceeds the {bits}-bit budget")]
    Budget { generation: usize, bits: u32 },
    #[error("schedule has depth {depth}, generation {requested} requested")]
    Exhausted { depth: usize, requested: usize },
    #[error("generation 0 has no parent")]
    Root,
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error("coordinate out of range: {0}")]
    Range(String),
    #[error("gridset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

type Result<T> = std::result::Result<T, DyadicError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GridKind {
    #[serde(rename = "DQ")]
    Fine,
    #[serde(rename = "DR")]
    Intermediary,
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridKind::Fine => "DQ",
            GridKind::Intermediary => "DR",
        })
    }
}

impl FromStr for GridKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "DQ" => Ok(GridKind::Fine),
            "DR" => Ok(GridKind::Intermediary),
            other => Err(format!("unknown grid kind {other:?}")),
        }
    }
}

pub fn is_power_of_two(x: u64) -> bool {
    x != 0 && x & (x - 1) == 0
}

/// Smallest power of two `p` with `p >= x` (and `p >= 1`).
pub fn pow2_at_least(x: f64) -> u64 {
    let mut p: u64 = 1;
    while (p as f64) < x {
        p = p.checked_mul(2).expect("power of two overflow");
    }
    p
}

/// Largest power of two `p` with `p < x`, or 1 when no such power exists.
pub fn pow2_below(x: f64) -> u64 {
    let mut p: u64 = 1;
    while ((2 * p) as f64) < x {
        p *= 2;
    }
    p
}

/// Branching data `N_1..N_K`, `M_1..M_K` for a `d`-dimensional grid tower.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct BranchingSchedule {
    dims: usize,
    branching: Vec<u64>,
    intermediary: Vec<u64>,
    budget_bits: u32,
    fine: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    d: usize,
    n: Vec<u64>,
    m: Vec<u64>,
    budget_bits: u32,
}

impl TryFrom<ScheduleRepr> for BranchingSchedule {
    type Error = DyadicError;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        BranchingSchedule::with_budget(r.d, r.n, r.m, r.budget_bits)
    }
}

impl From<BranchingSchedule> for ScheduleRepr {
    fn from(s: BranchingSchedule) -> Self {
        ScheduleRepr { d: s.dims, n: s.branching, m: s.intermediary, budget_bits: s.budget_bits }
    }
}

impl BranchingSchedule {
    /// Schedule under the environment's integer budget.
    pub fn new(dims: usize, branching: Vec<u64>, intermediary: Vec<u64>) -> Result<Self> {
        Self::with_budget(dims, branching, intermediary, budget_bits())
    }

    pub fn with_budget(
        dims: usize,
        branching: Vec<u64>,
        intermediary: Vec<u64>,
        bits: u32,
    ) -> Result<Self> {
        if dims == 0 {
            return Err(DyadicError::Schedule("dimension must be positive".into()));
        }
        if branching.len() != intermediary.len() {
            return Err(DyadicError::Schedule(format!(
                "{} branching factors but {} intermediary factors",
                branching.len(),
                intermediary.len()
            )));
        }
        let bits = bits.clamp(1, 63);
        let cap: u64 = 1u64 << bits;
        let mut fine = Vec::with_capacity(branching.len() + 1);
        fine.push(1u64);
        for (i, (&n, &m)) in branching.iter().zip(&intermediary).enumerate() {
            if n < 2 {
                return Err(DyadicError::Schedule(format!("N_{} = {n} is below 2", i + 1)));
            }
            if m == 0 || n % m != 0 {
                return Err(DyadicError::Schedule(format!("M_{} = {m} does not divide N_{} = {n}", i + 1, i + 1)));
            }
            let next = fine[i]
                .checked_mul(n)
                .filter(|&v| v <= cap)
                .ok_or(DyadicError::Budget { generation: i + 1, bits })?;
            fine.push(next);
        }
        Ok(BranchingSchedule { dims, branching, intermediary, budget_bits: bits, fine })
    }

    /// Constant branching `n` with intermediary `m` for `depth` generations.
    pub fn constant(dims: usize, n: u64, m: u64, depth: usize) -> Result<Self> {
        Self::new(dims, vec![n; depth], vec![m; depth])
    }

    /// Appends one generation.
    pub fn push(&self, n: u64, m: u64) -> Result<Self> {
        let mut b = self.branching.clone();
        let mut i = self.intermediary.clone();
        b.push(n);
        i.push(m);
        Self::with_budget(self.dims, b, i, self.budget_bits)
    }

    pub fn truncated(&self, depth: usize) -> Self {
        let depth = depth.min(self.depth());
        BranchingSchedule {
            dims: self.dims,
            branching: self.branching[..depth].to_vec(),
            intermediary: self.intermediary[..depth].to_vec(),
            budget_bits: self.budget_bits,
            fine: self.fine[..=depth].to_vec(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.branching.len()
    }

    pub fn budget(&self) -> u32 {
        self.budget_bits
    }

    pub fn branching_factors(&self) -> &[u64] {
        &self.branching
    }

    pub fn intermediary_factors(&self) -> &[u64] {
        &self.intermediary
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.depth() {
            return Err(DyadicError::Exhausted { depth: self.depth(), requested: k });
        }
        Ok(())
    }

    /// `N_k` for `1 <= k <= K`.
    pub fn branching(&self, k: usize) -> Result<u64> {
        self.check_step(k)?;
        Ok(self.branching[k - 1])
    }

    /// `M_k` for `1 <= k <= K`.
    pub fn intermediary(&self, k: usize) -> Result<u64> {
        self.check_step(k)?;
        Ok(self.intermediary[k - 1])
    }

    /// `D_k` for `0 <= k <= K`.
    pub fn fine_denom(&self, k: usize) -> Result<u64> {
        self.fine
            .get(k)
            .copied()
            .ok_or(DyadicError::Exhausted { depth: self.depth(), requested: k })
    }

    /// `R_k = D_{k-1} M_k` for `1 <= k <= K`.
    pub fn inter_denom(&self, k: usize) -> Result<u64> {
        self.check_step(k)?;
        Ok(self.fine[k - 1] * self.intermediary[k - 1])
    }

    pub fn denom(&self, k: usize, kind: GridKind) -> Result<u64> {
        match kind {
            GridKind::Fine => self.fine_denom(k),
            GridKind::Intermediary => self.inter_denom(k),
        }
    }

    /// Fine children per intermediary cell per axis at generation `k`.
    pub fn cell_ratio(&self, k: usize) -> Result<u64> {
        Ok(self.branching(k)? / self.intermediary(k)?)
    }

    pub fn is_dyadic(&self) -> bool {
        self.branching.iter().chain(&self.intermediary).all(|&x| is_power_of_two(x))
    }

    /// `log N_{k+1} / log D_k` for `k = 1..K-1`; small values mean slow growth.
    pub fn growth_diagnostics(&self) -> Vec<f64> {
        (1..self.depth())
            .map(|k| (self.branching[k] as f64).ln() / (self.fine[k] as f64).ln())
            .collect()
    }
}

/// A single cube of a given generation and grid kind.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CubeIndex {
    pub generation: usize,
    pub kind: GridKind,
    pub coords: Vec<u64>,
}

impl CubeIndex {
    pub fn fine(generation: usize, coords: Vec<u64>) -> Self {
        CubeIndex { generation, kind: GridKind::Fine, coords }
    }

    pub fn cell(generation: usize, coords: Vec<u64>) -> Self {
        CubeIndex { generation, kind: GridKind::Intermediary, coords }
    }

    pub fn validate(&self, sched: &BranchingSchedule) -> Result<()> {
        if self.kind == GridKind::Intermediary && self.generation == 0 {
            return Err(DyadicError::Range("intermediary cubes start at generation 1".into()));
        }
        let denom = sched.denom(self.generation, self.kind)?;
        if self.coords.iter().any(|&c| c >= denom) {
            return Err(DyadicError::Range(format!("{:?} outside [0, {denom})", self.coords)));
        }
        Ok(())
    }
}

fn expect_fine(q: &CubeIndex) -> Result<()> {
    if q.kind != GridKind::Fine {
        return Err(DyadicError::Mismatch("expected a fine cube".into()));
    }
    Ok(())
}

/// Fine cubes of generation `k+1` inside the fine cube `q` of generation `k`.
pub fn children(q: &CubeIndex, sched: &BranchingSchedule) -> Result<GridSet> {
    expect_fine(q)?;
    q.validate(sched)?;
    let k = q.generation;
    let n = sched.branching(k + 1)?;
    let denom = sched.fine_denom(k + 1)?;
    let rows = block_rows(&q.coords, n);
    Ok(GridSet::from_sorted_flat(q.coords.len(), 1, k + 1, GridKind::Fine, denom, rows))
}

/// Cartesian block `{c * f + j : 0 <= j < f}` per axis, flattened in lexicographic order.
fn block_rows(base: &[u64], factor: u64) -> Vec<u64> {
    let dim = base.len();
    let total = (factor as usize).pow(dim as u32);
    let mut out = Vec::with_capacity(total * dim);
    let mut offset = vec![0u64; dim];
    for _ in 0..total {
        out.extend(base.iter().zip(&offset).map(|(&c, &j)| c * factor + j));
        for axis in (0..dim).rev() {
            offset[axis] += 1;
            if offset[axis] < factor {
                break;
            }
            offset[axis] = 0;
        }
    }
    out
}

/// The generation `k-1` fine cube containing a fine cube, or the generation
/// `k-1` fine cube containing an intermediary cube of generation `k`.
pub fn parent_of(q: &CubeIndex, sched: &BranchingSchedule) -> Result<CubeIndex> {
    if q.generation == 0 {
        return Err(DyadicError::Root);
    }
    q.validate(sched)?;
    let k = q.generation;
    let div = match q.kind {
        GridKind::Fine => sched.branching(k)?,
        GridKind::Intermediary => sched.intermediary(k)?,
    };
    Ok(CubeIndex::fine(k - 1, q.coords.iter().map(|&c| c / div).collect()))
}

/// The intermediary cell of generation `k` containing a fine cube of generation `k`.
pub fn cell_of(q: &CubeIndex, sched: &BranchingSchedule) -> Result<CubeIndex> {
    expect_fine(q)?;
    if q.generation == 0 {
        return Err(DyadicError::Root);
    }
    q.validate(sched)?;
    let ratio = sched.cell_ratio(q.generation)?;
    Ok(CubeIndex::cell(q.generation, q.coords.iter().map(|&c| c / ratio).collect()))
}

/// Intermediary cells of generation `k+1` inside the fine cube `q` of generation `k`.
pub fn intermediary_cells(q: &CubeIndex, sched: &BranchingSchedule) -> Result<GridSet> {
    expect_fine(q)?;
    q.validate(sched)?;
    let k = q.generation;
    let m = sched.intermediary(k + 1)?;
    let denom = sched.inter_denom(k + 1)?;
    let rows = block_rows(&q.coords, m);
    Ok(GridSet::from_sorted_flat(q.coords.len(), 1, k + 1, GridKind::Intermediary, denom, rows))
}

/// Fine cubes of generation `k` inside the intermediary cell `r` of generation `k`.
pub fn cell_children(r: &CubeIndex, sched: &BranchingSchedule) -> Result<GridSet> {
    if r.kind != GridKind::Intermediary {
        return Err(DyadicError::Mismatch("expected an intermediary cell".into()));
    }
    r.validate(sched)?;
    let k = r.generation;
    let ratio = sched.cell_ratio(k)?;
    let rows = block_rows(&r.coords, ratio);
    Ok(GridSet::from_sorted_flat(r.coords.len(), 1, k, GridKind::Fine, sched.fine_denom(k)?, rows))
}

/// Generation-`k` cubes whose closed cube contains some point.
///
/// A coordinate on a grid line belongs to both incident cubes.
pub fn thicken_points(points: &[Vec<f64>], dims: usize, k: usize, sched: &BranchingSchedule) -> Result<GridSet> {
    let denom = sched.fine_denom(k)?;
    let mut rows = Vec::new();
    for p in points {
        if p.len() != dims {
            return Err(DyadicError::Mismatch(format!("point of length {} in dimension {dims}", p.len())));
        }
        let ranges: Vec<(u64, u64)> = p.iter().map(|&x| closed_index_range(x, denom)).collect();
        push_box(&ranges, &mut rows);
    }
    Ok(GridSet::from_rows(dims, 1, k, GridKind::Fine, denom, rows)?)
}

/// Inclusive index range of closed cells `[i, i+1]/denom` containing `x`.
pub fn closed_index_range(x: f64, denom: u64) -> (u64, u64) {
    let scaled = (x.clamp(0.0, 1.0)) * denom as f64;
    let fl = scaled.floor();
    let top = denom - 1;
    if fl == scaled {
        let i = fl as u64;
        (i.saturating_sub(1), i.min(top))
    } else {
        let i = (fl as u64).min(top);
        (i, i)
    }
}

fn push_box(ranges: &[(u64, u64)], rows: &mut Vec<Vec<u64>>) {
    let mut cur: Vec<u64> = ranges.iter().map(|r| r.0).collect();
    loop {
        rows.push(cur.clone());
        let mut axis = ranges.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            if cur[axis] < ranges[axis].1 {
                cur[axis] += 1;
                break;
            }
            cur[axis] = ranges[axis].0;
        }
    }
}

/// Smallest generation-`k` discretized set containing a discretized set.
///
/// Coarser generations map each cube to its ancestor; finer generations
/// replace each cube by all its descendants.
pub fn thicken(e: &GridSet, k: usize, sched: &BranchingSchedule) -> Result<GridSet> {
    if e.kind != GridKind::Fine {
        return Err(DyadicError::Mismatch("thicken expects a fine set".into()));
    }
    let target = sched.fine_denom(k)?;
    let source = sched.fine_denom(e.generation)?;
    if k <= e.generation {
        let q = source / target;
        let flat: Vec<u64> = e.coords.iter().map(|&c| c / q).collect();
        Ok(GridSet::from_flat(e.d, e.n, k, GridKind::Fine, target, flat))
    } else {
        let q = target / source;
        let mut flat = Vec::new();
        for row in e.iter() {
            flat.extend(block_rows(row, q));
        }
        Ok(GridSet::from_flat(e.d, e.n, k, GridKind::Fine, target, flat))
    }
}

/// Cartesian product of same-grid sets; arities add up.
pub fn product(sets: &[GridSet]) -> Result<GridSet> {
    let first = sets.first().ok_or_else(|| DyadicError::Mismatch("empty product".into()))?;
    for s in sets {
        if s.generation != first.generation || s.kind != first.kind || s.denom != first.denom || s.d != first.d {
            return Err(DyadicError::Mismatch("product factors live on different grids".into()));
        }
    }
    let n: usize = sets.iter().map(|s| s.n).sum();
    if sets.iter().any(|s| s.is_empty()) {
        return Ok(GridSet::empty(first.d, n, first.generation, first.kind, first.denom));
    }
    let mut idx = vec![0usize; sets.len()];
    let mut flat = Vec::new();
    'outer: loop {
        for (s, &i) in sets.iter().zip(&idx) {
            flat.extend_from_slice(s.row(i));
        }
        for f in (0..sets.len()).rev() {
            idx[f] += 1;
            if idx[f] < sets[f].len() {
                continue 'outer;
            }
            idx[f] = 0;
        }
        break;
    }
    Ok(GridSet::from_sorted_flat(first.d, n, first.generation, first.kind, first.denom, flat))
}

/// True when the `n` blocks of length `d` in `row` are pairwise distinct.
pub fn is_strongly_nondiagonal(row: &[u64], d: usize) -> bool {
    let n = row.len() / d;
    for i in 0..n {
        for j in i + 1..n {
            if row[i * d..(i + 1) * d] == row[j * d..(j + 1) * d] {
                return false;
            }
        }
    }
    true
}

/// Keeps the cubes of `b` whose `n` component blocks are pairwise distinct.
pub fn nondiagonal_filter(b: &GridSet, n: usize, d: usize) -> Result<GridSet> {
    let dim = b.dim();
    if n == 0 || d * n != dim {
        return Err(DyadicError::Mismatch(format!("dimension {dim} is not {n} blocks of {d}")));
    }
    Ok(b.filter(|row| is_strongly_nondiagonal(row, d)))
}

/// Immutable, sorted, duplicate-free set of same-grid cubes in dimension `d * n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSet {
    d: usize,
    n: usize,
    generation: usize,
    kind: GridKind,
    denom: u64,
    coords: Vec<u64>,
}

impl GridSet {
    pub fn empty(d: usize, n: usize, generation: usize, kind: GridKind, denom: u64) -> Self {
        GridSet { d, n, generation, kind, denom, coords: Vec::new() }
    }

    /// The single generation-0 cube `[0,1]^d`.
    pub fn unit(d: usize) -> Self {
        GridSet { d, n: 1, generation: 0, kind: GridKind::Fine, denom: 1, coords: vec![0; d] }
    }

    /// Every generation-`k` fine cube of `[0,1]^d`.
    pub fn full(d: usize, k: usize, sched: &BranchingSchedule) -> Result<Self> {
        let denom = sched.fine_denom(k)?;
        let flat = block_rows(&vec![0; d], denom);
        Ok(GridSet::from_sorted_flat(d, 1, k, GridKind::Fine, denom, flat))
    }

    pub fn from_rows<I>(d: usize, n: usize, generation: usize, kind: GridKind, denom: u64, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<u64>>,
    {
        let dim = d * n;
        if dim == 0 {
            return Err(DyadicError::Mismatch("zero-dimensional grid set".into()));
        }
        let mut all: Vec<Vec<u64>> = Vec::new();
        for r in rows {
            if r.len() != dim {
                return Err(DyadicError::Mismatch(format!("row of length {} in dimension {dim}", r.len())));
            }
            if let Some(&c) = r.iter().find(|&&c| c >= denom) {
                return Err(DyadicError::Range(format!("coordinate {c} with denominator {denom}")));
            }
            all.push(r);
        }
        all.sort_unstable();
        all.dedup();
        let coords = all.into_iter().flatten().collect();
        Ok(GridSet { d, n, generation, kind, denom, coords })
    }

    /// Builds from an unsorted flat buffer whose coordinates are known to be in range.
    pub(crate) fn from_flat(d: usize, n: usize, generation: usize, kind: GridKind, denom: u64, flat: Vec<u64>) -> Self {
        let dim = d * n;
        let mut rows: Vec<&[u64]> = flat.chunks_exact(dim).collect();
        rows.sort_unstable();
        rows.dedup();
        let coords = rows.concat();
        GridSet { d, n, generation, kind, denom, coords }
    }

    /// Wraps a flat buffer already in strictly increasing row order.
    pub(crate) fn from_sorted_flat(d: usize, n: usize, generation: usize, kind: GridKind, denom: u64, coords: Vec<u64>) -> Self {
        let s = GridSet { d, n, generation, kind, denom, coords };
        debug_assert!(s.is_well_formed());
        s
    }

    fn is_well_formed(&self) -> bool {
        let dim = self.dim();
        dim > 0
            && self.coords.len() % dim == 0
            && self.coords.iter().all(|&c| c < self.denom)
            && self.coords.chunks_exact(dim).zip(self.coords.chunks_exact(dim).skip(1)).all(|(a, b)| a < b)
    }

    /// Block dimension.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of blocks (tuple arity).
    pub fn arity(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d * self.n
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn denom(&self) -> u64 {
        self.denom
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u64] {
        let dim = self.dim();
        &self.coords[i * dim..(i + 1) * dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, u64> {
        self.coords.chunks_exact(self.dim())
    }

    pub fn flat(&self) -> &[u64] {
        &self.coords
    }

    pub fn cube(&self, i: usize) -> CubeIndex {
        CubeIndex { generation: self.generation, kind: self.kind, coords: self.row(i).to_vec() }
    }

    /// Position of `row` in the sorted order, if present.
    pub fn position(&self, row: &[u64]) -> Option<usize> {
        let (mut lo, mut hi) = (0usize, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.row(mid).cmp(row) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }

    pub fn contains(&self, row: &[u64]) -> bool {
        row.len() == self.dim() && self.position(row).is_some()
    }

    pub fn same_grid(&self, other: &GridSet) -> bool {
        self.d == other.d
            && self.n == other.n
            && self.generation == other.generation
            && self.kind == other.kind
            && self.denom == other.denom
    }

    pub fn is_subset(&self, other: &GridSet) -> bool {
        self.same_grid(other) && self.iter().all(|r| other.contains(r))
    }

    pub fn filter<F: FnMut(&[u64]) -> bool>(&self, mut keep: F) -> GridSet {
        let mut coords = Vec::new();
        for r in self.iter() {
            if keep(r) {
                coords.extend_from_slice(r);
            }
        }
        GridSet { coords, ..self.clone_shape() }
    }

    pub fn union(&self, other: &GridSet) -> Result<GridSet> {
        if !self.same_grid(other) {
            return Err(DyadicError::Mismatch("union of sets on different grids".into()));
        }
        let mut flat = self.coords.clone();
        flat.extend_from_slice(&other.coords);
        Ok(GridSet::from_flat(self.d, self.n, self.generation, self.kind, self.denom, flat))
    }

    pub fn difference(&self, other: &GridSet) -> GridSet {
        self.filter(|r| !other.contains(r))
    }

    /// Same cubes relabelled as a single block of dimension `d * n`.
    pub fn as_single_block(&self) -> GridSet {
        GridSet { d: self.dim(), n: 1, ..self.clone() }
    }

    /// Same cubes viewed as `n` blocks of dimension `d`.
    pub fn with_blocks(&self, d: usize, n: usize) -> Result<GridSet> {
        if d * n != self.dim() {
            return Err(DyadicError::Mismatch(format!("cannot view dimension {} as {n} blocks of {d}", self.dim())));
        }
        Ok(GridSet { d, n, ..self.clone() })
    }

    fn clone_shape(&self) -> GridSet {
        GridSet { d: self.d, n: self.n, generation: self.generation, kind: self.kind, denom: self.denom, coords: Vec::new() }
    }

    pub fn header(&self) -> String {
        format!(
            "gridset v1 d={} n={} k={} kind={} D={}",
            self.d, self.n, self.generation, self.kind, self.denom
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in self.iter() {
            let line: Vec<String> = r.iter().map(u64::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses the text format; rows must already be strictly increasing.
    pub fn from_text(text: &str) -> Result<GridSet> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DyadicError::Parse { line: 1, msg: "missing header".into() })?;
        let bad = |msg: &str| DyadicError::Parse { line: 1, msg: msg.to_string() };
        let mut parts = header.split_whitespace();
        if parts.next() != Some("gridset") || parts.next() != Some("v1") {
            return Err(bad("expected `gridset v1`"));
        }
        let mut fields = std::collections::HashMap::new();
        for p in parts {
            let (key, value) = p.split_once('=').ok_or_else(|| bad("malformed header field"))?;
            fields.insert(key, value);
        }
        let num = |key: &str| -> Result<u64> {
            fields.get(key).ok_or_else(|| bad(&format!("missing {key}")))?.parse::<u64>().map_err(|e| bad(&format!("{key}: {e}")))
        };
        let d = num("d")? as usize;
        let n = num("n")? as usize;
        let k = num("k")? as usize;
        let denom = num("D")?;
        let kind: GridKind = fields.get("kind").ok_or_else(|| bad("missing kind"))?.parse().map_err(|e: String| bad(&e))?;
        if d * n == 0 || fields.len() != 5 {
            return Err(bad("header must carry exactly d, n, k, kind, D with d, n > 0"));
        }
        let dim = d * n;
        let mut coords = Vec::new();
        let mut prev: Option<Vec<u64>> = None;
        for (i, line) in lines {
            let lineno = i + 1;
            let err = |msg: String| DyadicError::Parse { line: lineno, msg };
            let row: Vec<u64> = line
                .split_whitespace()
                .map(|t| t.parse::<u64>().map_err(|e| err(e.to_string())))
                .collect::<Result<_>>()?;
            if row.len() != dim {
                return Err(err(format!("expected {dim} coordinates, found {}", row.len())));
            }
            if row.iter().any(|&c| c >= denom) {
                return Err(err("coordinate out of range".into()));
            }
            if prev.as_ref().is_some_and(|p| *p >= row) {
                return Err(err("rows not strictly increasing".into()));
            }
            coords.extend_from_slice(&row);
            prev = Some(row);
        }
        Ok(GridSet { d, n, generation: k, kind, denom, coords })
    }
}

/// Requested shape of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Explicit {
        d: usize,
        n: Vec<u64>,
        #[serde(default)]
        m: Option<Vec<u64>>,
        /// Reject entries that are not powers of two.
        #[serde(default = "yes")]
        dyadic: bool,
    },
    Constant {
        d: usize,
        n: u64,
        #[serde(default)]
        m: Option<u64>,
        depth: usize,
    },
    /// `N_k = 2^floor(k^scale)`, i.e. `psi(k) = scale * log2(k) / k`.
    Subhyperdyadic {
        d: usize,
        depth: usize,
        #[serde(default = "one")]
        psi_scale: f64,
        #[serde(default)]
        m_fraction: Option<f64>,
    },
    /// `N_k` the least power of two with `N_k >= max(first, D_{k-1}^exponent)`.
    RapidDecay {
        d: usize,
        depth: usize,
        first: u64,
        exponent: f64,
        #[serde(default)]
        m_fraction: Option<f64>,
    },
    /// `N_k = 2^floor(2^(ck))`, `M_k = 2^floor(c 2^(ck))`.
    Hyperdyadic { d: usize, depth: usize, c: f64 },
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

/// `M = 2^floor(fraction * log2 N)`, or `M = N` without a fraction.
fn intermediary_for(n: u64, fraction: Option<f64>) -> u64 {
    match fraction {
        None => n,
        Some(f) => {
            let e = ((n.trailing_zeros() as f64) * f.clamp(0.0, 1.0) + 1e-9).floor() as u32;
            1u64 << e
        }
    }
}

pub fn make_schedule(spec: &ScheduleSpec) -> Result<BranchingSchedule> {
    match spec {
        ScheduleSpec::Explicit { d, n, m, dyadic } => {
            let m = m.clone().unwrap_or_else(|| n.clone());
            if *dyadic {
                if let Some(x) = n.iter().chain(&m).find(|&&x| !is_power_of_two(x)) {
                    return Err(DyadicError::Schedule(format!("{x} is not a power of two")));
                }
            }
            BranchingSchedule::new(*d, n.clone(), m)
        }
        ScheduleSpec::Constant { d, n, m, depth } => BranchingSchedule::constant(*d, *n, m.unwrap_or(*n), *depth),
        ScheduleSpec::Subhyperdyadic { d, depth, psi_scale, m_fraction } => {
            if *psi_scale < 1.0 {
                return Err(DyadicError::Schedule("psi must dominate log2(k)/k".into()));
            }
            let n: Vec<u64> = (1..=*depth)
                .map(|k| {
                    let e = ((k as f64).powf(*psi_scale) + 1e-9).floor() as u32;
                    checked_pow2(e.max(1), k)
                })
                .collect::<Result<_>>()?;
            let m = n.iter().map(|&x| intermediary_for(x, *m_fraction)).collect();
            BranchingSchedule::new(*d, n, m)
        }
        ScheduleSpec::RapidDecay { d, depth, first, exponent, m_fraction } => {
            rapid_decay_schedule(*d, *depth, *m_fraction, |k, prev| if k == 1 { *first as f64 } else { (prev as f64).powf(*exponent) })
        }
        ScheduleSpec::Hyperdyadic { d, depth, c } => {
            if !(0.0 < *c && *c < 1.0) {
                return Err(DyadicError::Schedule("hyperdyadic c must lie in (0, 1)".into()));
            }
            let mut n = Vec::new();
            let mut m = Vec::new();
            for k in 1..=*depth {
                let (a, b) = hyperdyadic_exponents(*c, k);
                n.push(checked_pow2(a, k)?);
                m.push(checked_pow2(b, k)?);
            }
            BranchingSchedule::new(*d, n, m)
        }
    }
}

/// Exponents `(floor(2^(ck)), floor(c 2^(ck)))` of the hyperdyadic branching.
pub fn hyperdyadic_exponents(c: f64, k: usize) -> (u32, u32) {
    let x = (c * k as f64).exp2();
    ((x + 1e-9).floor() as u32, (c * x + 1e-9).floor() as u32)
}

fn checked_pow2(e: u32, k: usize) -> Result<u64> {
    if e >= 63 {
        return Err(DyadicError::Budget { generation: k, bits: budget_bits() });
    }
    Ok(1u64 << e)
}

/// Schedule whose `N_k` is the least power of two above a caller bound
/// `lower(k, D_{k-1})`, always at least 2.
pub fn rapid_decay_schedule<F>(d: usize, depth: usize, m_fraction: Option<f64>, lower: F) -> Result<BranchingSchedule>
where
    F: Fn(usize, u64) -> f64,
{
    let mut sched = BranchingSchedule::new(d, vec![], vec![])?;
    for k in 1..=depth {
        let prev = sched.fine_denom(k - 1)?;
        let bound = lower(k, prev).max(2.0);
        if !bound.is_finite() || bound > (1u64 << sched.budget()) as f64 {
            return Err(DyadicError::Budget { generation: k, bits: sched.budget() });
        }
        let n = pow2_at_least(bound);
        sched = sched.push(n, intermediary_for(n, m_fraction))?;
    }
    Ok(sched)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(n: &[u64], m: &[u64]) -> BranchingSchedule {
        BranchingSchedule::with_budget(1, n.to_vec(), m.to_vec(), 62).unwrap()
    }

    #[test]
    fn ternary_children_of_unit_interval() {
        let s = sched(&[3], &[3]);
        let c = children(&CubeIndex::fine(0, vec![0]), &s).unwrap();
        assert_eq!(c.flat(), &[0, 1, 2]);
    }

    #[test]
    fn parent_is_floor_division() {
        let s = sched(&[10], &[5]);
        assert_eq!(parent_of(&CubeIndex::fine(1, vec![7]), &s).unwrap().coords, vec![0]);
        let s = sched(&[4, 8], &[4, 2]);
        // Intermediary cell 5 of generation 2 has denominator 4 * 2 = 8.
        assert_eq!(parent_of(&CubeIndex::cell(2, vec![5]), &s).unwrap().coords, vec![2]);
        assert_eq!(parent_of(&CubeIndex::fine(0, vec![0]), &s), Err(DyadicError::Root));
    }

    #[test]
    fn intermediary_cells_split_evenly() {
        let s = sched(&[8], &[4]);
        let cells = intermediary_cells(&CubeIndex::fine(0, vec![0]), &s).unwrap();
        assert_eq!(cells.len(), 4);
        for i in 0..cells.len() {
            assert_eq!(cell_children(&cells.cube(i), &s).unwrap().len(), 2);
        }
    }

    #[test]
    fn boundary_point_meets_two_cubes() {
        let s = sched(&[4], &[4]);
        let t = thicken_points(&[vec![0.5]], 1, 1, &s).unwrap();
        assert_eq!(t.flat(), &[1, 2]);
        let t = thicken_points(&[vec![1.0]], 1, 1, &s).unwrap();
        assert_eq!(t.flat(), &[3]);
    }

    #[test]
    fn product_is_lexicographic() {
        let a = GridSet::from_rows(1, 1, 1, GridKind::Fine, 4, vec![vec![0], vec![1]]).unwrap();
        let b = GridSet::from_rows(1, 1, 1, GridKind::Fine, 4, vec![vec![2]]).unwrap();
        let p = product(&[a.clone(), b]).unwrap();
        assert_eq!(p.flat(), &[0, 2, 1, 2]);
        let e = GridSet::empty(1, 1, 1, GridKind::Fine, 4);
        assert!(product(&[a, e]).unwrap().is_empty());
    }

    #[test]
    fn diagonal_cubes_are_filtered() {
        let b = GridSet::from_rows(1, 2, 1, GridKind::Fine, 4, vec![vec![0, 0], vec![0, 1]]).unwrap();
        assert_eq!(nondiagonal_filter(&b, 2, 1).unwrap().flat(), &[0, 1]);
        assert!(nondiagonal_filter(&b, 3, 1).is_err());
    }

    #[test]
    fn schedule_modes() {
        let s = make_schedule(&ScheduleSpec::Constant { d: 1, n: 2, m: None, depth: 5 }).unwrap();
        assert_eq!(s.fine_denom(5).unwrap(), 32);
        let s = make_schedule(&ScheduleSpec::Subhyperdyadic { d: 1, depth: 4, psi_scale: 1.0, m_fraction: None }).unwrap();
        assert_eq!(s.branching_factors(), &[2, 4, 8, 16]);
        let err = make_schedule(&ScheduleSpec::Explicit { d: 1, n: vec![3], m: None, dyadic: true });
        assert!(err.is_err());
        let err = make_schedule(&ScheduleSpec::Explicit { d: 1, n: vec![8], m: Some(vec![16]), dyadic: true });
        assert!(err.is_err());
    }

    #[test]
    fn budget_overflow_is_an_error() {
        let r = BranchingSchedule::with_budget(1, vec![1 << 20, 1 << 20, 1 << 20], vec![1, 1, 1], 40);
        assert_eq!(r, Err(DyadicError::Budget { generation: 3, bits: 40 }));
    }

    #[test]
    fn text_format_rejects_unsorted_rows() {
        let bad = "gridset v1 d=1 n=1 k=1 kind=DQ D=4\n2\n1\n";
        assert!(GridSet::from_text(bad).is_err());
    }
}
