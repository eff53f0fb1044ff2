//! Covering numbers and finite-scale Minkowski ratios.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dyadic::{budget_bits, hyperdyadic_exponents, BranchingSchedule, DyadicError, GridKind, GridSet};

#[derive(Debug, Error)]
pub enum DimensionError {
    #[error("covering count at generation {generation} overflows 128 bits")]
    Overflow { generation: usize },
    #[error("window {window} exceeds the {available} available scales")]
    Window { window: usize, available: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] DyadicError),
}

type Result<T> = std::result::Result<T, DimensionError>;

/// Number of generation-`k` cubes meeting `e`.
///
/// Coarser scales count distinct ancestors; finer scales count all descendants.
pub fn covering_number(e: &GridSet, k: usize, sched: &BranchingSchedule) -> Result<u128> {
    if e.kind() != GridKind::Fine || e.arity() != 1 {
        return Err(DimensionError::Invalid("covering numbers take fine sets of points".into()));
    }
    let g = e.generation();
    if k <= g {
        let ratio = sched.fine_denom(g)? / sched.fine_denom(k)?;
        let ancestors: HashSet<Vec<u64>> = e.iter().map(|r| r.iter().map(|&c| c / ratio).collect()).collect();
        Ok(ancestors.len() as u128)
    } else {
        let ratio = (sched.fine_denom(k)? / sched.fine_denom(g)?) as u128;
        ratio
            .checked_pow(e.dim() as u32)
            .and_then(|r| r.checked_mul(e.len() as u128))
            .ok_or(DimensionError::Overflow { generation: k })
    }
}

/// Number of generation-`k` cubes containing at least one of `points`.
pub fn covering_number_of_points(points: &[Vec<f64>], k: usize, sched: &BranchingSchedule) -> Result<u128> {
    let denom = sched.fine_denom(k)?;
    let cells: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|&x| ((x * denom as f64).floor().max(0.0) as u64).min(denom - 1)).collect())
        .collect();
    Ok(cells.len() as u128)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRatio {
    pub generation: usize,
    pub count: u128,
    /// `log(count) / log(1/scale)`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionEstimate {
    pub ratios: Vec<ScaleRatio>,
    pub window: usize,
    /// Minimum over the trailing window, the finite proxy for the liminf.
    pub lower: f64,
    /// Maximum over the trailing window, the finite proxy for the limsup.
    pub upper: f64,
}

impl DimensionEstimate {
    pub fn from_ratios(ratios: Vec<ScaleRatio>, window: usize) -> Result<Self> {
        if window == 0 || window > ratios.len() {
            return Err(DimensionError::Window { window, available: ratios.len() });
        }
        let tail = &ratios[ratios.len() - window..];
        let lower = tail.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
        let upper = tail.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
        Ok(DimensionEstimate { ratios, window, lower, upper })
    }

    /// `k,count,ratio` lines under a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,count,ratio\n");
        for r in &self.ratios {
            let _ = writeln!(out, "{},{},{:.12}", r.generation, r.count, r.ratio);
        }
        out
    }

    /// Least-squares slope of `log count` against `log(1/scale)`, offered only
    /// as an auxiliary diagnostic next to the window extremes.
    pub fn fitted_slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .ratios
            .iter()
            .filter(|r| r.ratio > 0.0)
            .map(|r| {
                let y = (r.count as f64).ln();
                (y / r.ratio, y)
            })
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    }
}

/// Ratios of `e` at generations `1..=e.generation()` with a trailing window.
pub fn minkowski_estimate(e: &GridSet, window: usize, sched: &BranchingSchedule) -> Result<DimensionEstimate> {
    let mut ratios = Vec::new();
    for k in 1..=e.generation() {
        let count = covering_number(e, k, sched)?;
        let ln_d = (sched.fine_denom(k)? as f64).ln();
        if ln_d > 0.0 {
            ratios.push(ScaleRatio { generation: k, count, ratio: (count as f64).ln() / ln_d });
        }
    }
    DimensionEstimate::from_ratios(ratios, window)
}

/// Ratios of a nested family, one level per generation, each at its own scale.
pub fn minkowski_of_levels(levels: &[GridSet], window: usize, sched: &BranchingSchedule) -> Result<DimensionEstimate> {
    let mut ratios = Vec::new();
    for level in levels.iter().filter(|l| l.generation() > 0) {
        let k = level.generation();
        let count = covering_number(level, k, sched)?;
        ratios.push(ScaleRatio { generation: k, count, ratio: (count as f64).ln() / (sched.fine_denom(k)? as f64).ln() });
    }
    DimensionEstimate::from_ratios(ratios, window)
}

/// Middle-thirds Cantor levels `0..=depth` on the base-3 tower.
pub fn cantor_levels(depth: usize) -> Result<(Vec<GridSet>, BranchingSchedule)> {
    let sched = BranchingSchedule::new(1, vec![3; depth], vec![1; depth])?;
    let mut levels = vec![GridSet::unit(1)];
    for k in 1..=depth {
        let prev = &levels[k - 1];
        let rows: Vec<Vec<u64>> = prev.iter().flat_map(|r| [vec![3 * r[0]], vec![3 * r[0] + 2]]).collect();
        levels.push(GridSet::from_rows(1, 1, k, GridKind::Fine, sched.fine_denom(k)?, rows)?);
    }
    Ok((levels, sched))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperdyadicDemo {
    pub c: f64,
    /// `(log2 N_k, log2 M_k)` for `k = 1..=depth+1`.
    pub exponents: Vec<(u32, u32)>,
    /// Ratios at the fine scales `l_k`.
    pub fine_ratios: Vec<ScaleRatio>,
    /// Ratios at the intermediary scales `r_{k+1}`, indexed by `k`.
    pub cell_ratios: Vec<ScaleRatio>,
    /// Generations whose sets were built and counted directly.
    pub materialized: usize,
    /// Whether the counted sizes equal the product of `N_j / M_j`.
    pub count_identity: bool,
}

impl HyperdyadicDemo {
    /// Smallest `fine - cell` difference over generations `>= from`.
    pub fn min_gap(&self, from: usize) -> Option<f64> {
        self.fine_ratios
            .iter()
            .zip(&self.cell_ratios)
            .filter(|(f, _)| f.generation >= from)
            .map(|(f, r)| f.ratio - r.ratio)
            .reduce(f64::min)
    }
}

/// Largest set the demo builds explicitly.
pub const MATERIALIZE_LIMIT: usize = 1 << 20;

/// One intermediary cell per kept cube with `N_k = 2^floor(2^{ck})`, `M_k = 2^floor(c 2^{ck})`.
///
/// All counts are powers of two, so both ratio sequences are exact quotients of exponents.
pub fn hyperdyadic_demo(c: f64, depth: usize) -> Result<HyperdyadicDemo> {
    if !(0.0..1.0).contains(&c) || depth == 0 {
        return Err(DimensionError::Invalid("need 0 <= c < 1 and depth >= 1".into()));
    }
    let exponents: Vec<(u32, u32)> = (1..=depth + 1).map(|k| hyperdyadic_exponents(c, k)).collect();
    let n: Vec<u64> = exponents[..depth].iter().map(|e| 1u64.checked_shl(e.0).unwrap_or(0)).collect();
    let m: Vec<u64> = exponents[..depth].iter().map(|e| 1u64 << e.1).collect();
    let total: u32 = exponents[..depth].iter().map(|e| e.0).sum();
    if total > budget_bits() {
        return Err(DyadicError::Budget { generation: depth, bits: budget_bits() }.into());
    }
    let sched = BranchingSchedule::new(1, n, m)?;

    let mut fine_ratios = Vec::with_capacity(depth);
    let mut cell_ratios = Vec::with_capacity(depth);
    let (mut log_d, mut log_count) = (0u32, 0u32);
    for k in 1..=depth {
        let (nk, mk) = exponents[k - 1];
        log_d += nk;
        log_count += nk - mk;
        let count = 1u128 << log_count;
        fine_ratios.push(ScaleRatio { generation: k, count, ratio: log_count as f64 / log_d as f64 });
        let next_m = exponents[k].1;
        cell_ratios.push(ScaleRatio { generation: k, count, ratio: log_count as f64 / (log_d + next_m) as f64 });
    }

    // Build the sets while they stay small and compare sizes with the product formula.
    let mut current = GridSet::unit(1);
    let mut materialized = 0;
    let mut count_identity = true;
    for k in 1..=depth {
        let expected = fine_ratios[k - 1].count;
        if expected > MATERIALIZE_LIMIT as u128 {
            break;
        }
        let q = sched.cell_ratio(k)?;
        let nk = sched.branching(k)?;
        // The first intermediary cell of each cube, all of its fine children.
        let flat: Vec<u64> = current.iter().flat_map(|r| (0..q).map(move |j| r[0] * nk + j)).collect();
        current = GridSet::from_flat(1, 1, k, GridKind::Fine, sched.fine_denom(k)?, flat);
        count_identity &= current.len() as u128 == expected;
        materialized = k;
    }
    Ok(HyperdyadicDemo { c, exponents, fine_ratios, cell_ratios, materialized, count_identity })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_cube_and_point() {
        let s = BranchingSchedule::constant(2, 4, 1, 3).unwrap();
        let full = GridSet::full(2, 3, &s).unwrap();
        assert_eq!(covering_number(&full, 2, &s).unwrap(), 256);
        let est = minkowski_estimate(&full, 2, &s).unwrap();
        assert!(est.ratios.iter().all(|r| (r.ratio - 2.0).abs() < 1e-12));
        assert_eq!(covering_number_of_points(&[vec![0.3, 0.7]], 3, &s).unwrap(), 1);
    }

    #[test]
    fn cantor_counts_are_powers_of_two() {
        let (levels, s) = cantor_levels(6).unwrap();
        for k in 0..=6 {
            assert_eq!(covering_number(&levels[6], k, &s).unwrap(), 1 << k);
        }
    }

    #[test]
    fn hyperdyadic_exponents_at_one_half() {
        let demo = hyperdyadic_demo(0.5, 8).unwrap();
        let n: Vec<u32> = demo.exponents.iter().map(|e| e.0).collect();
        assert_eq!(n, vec![1, 2, 2, 4, 5, 8, 11, 16, 22]);
        assert_eq!(demo.fine_ratios[7].ratio, 26.0 / 49.0);
        assert_eq!(demo.cell_ratios[7].ratio, 26.0 / 60.0);
        assert!(demo.count_identity);
        assert_eq!(demo.materialized, 7);
    }

    #[test]
    fn window_must_fit() {
        let (levels, s) = cantor_levels(3).unwrap();
        assert!(minkowski_estimate(&levels[3], 4, &s).is_err());
    }
}
