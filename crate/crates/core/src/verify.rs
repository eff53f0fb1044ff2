//! Brute-force checks that share no code with the constructions they audit.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::configs::{CoverOracle, CurveSpec};
use crate::dyadic::{BranchingSchedule, CubeIndex, DyadicError, GridKind, GridSet};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("{tuples} tuples exceed the enumeration budget {budget}")]
    Budget { tuples: u128, budget: u128 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] DyadicError),
}

type Result<T> = std::result::Result<T, VerifyError>;

/// Default number of tuples any check may enumerate.
pub const DEFAULT_BUDGET: u128 = 10_000_000;

/// Violations kept verbatim in a report; the count is always exact.
pub const VIOLATION_CAP: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub check: String,
    pub tuples: u64,
    pub violation_count: u64,
    /// The first violations in enumeration order, as grid coordinates.
    pub violations: Vec<Vec<u64>>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }

    fn merge(check: &str, parts: Vec<(u64, u64, Vec<Vec<u64>>)>, started: Instant) -> Self {
        let mut r = VerifyReport { check: check.to_string(), tuples: 0, violation_count: 0, violations: Vec::new(), elapsed: Duration::ZERO };
        for (t, c, v) in parts {
            r.tuples += t;
            r.violation_count += c;
            r.violations.extend(v.into_iter().take(VIOLATION_CAP - r.violations.len().min(VIOLATION_CAP)));
        }
        r.elapsed = started.elapsed();
        r
    }
}

/// Where a tuple is looked up.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Grid(&'a GridSet),
    Oracle(&'a dyn CoverOracle, u64),
}

impl Target<'_> {
    fn hit(&self, row: &[u64]) -> bool {
        match self {
            Target::Grid(g) => g.contains(row),
            Target::Oracle(o, denom) => o.contains(*denom, row),
        }
    }
}

fn falling(len: usize, n: usize) -> u128 {
    (0..n).map(|i| len.saturating_sub(i) as u128).product()
}

/// Every ordered `n`-tuple of distinct cubes of `x`, looked up in `b`.
pub fn assert_avoids(x: &GridSet, b: Target<'_>, n: usize, budget: u128) -> Result<VerifyReport> {
    let started = Instant::now();
    if x.arity() != 1 || n == 0 {
        return Err(VerifyError::Invalid("expects a set of points and n >= 1".into()));
    }
    if let Target::Grid(g) = b {
        if g.dim() != x.dim() * n || g.denom() != x.denom() {
            return Err(VerifyError::Invalid("bad set lives on a different grid".into()));
        }
    }
    let tuples = falling(x.len(), n);
    if tuples > budget {
        return Err(VerifyError::Budget { tuples, budget });
    }
    let d = x.dim();
    let parts: Vec<_> = (0..x.len())
        .into_par_iter()
        .map(|first| {
            let mut idx = vec![first];
            let mut row = vec![0u64; d * n];
            let (mut t, mut c, mut v) = (0u64, 0u64, Vec::new());
            visit_distinct(x.len(), n, &mut idx, &mut |idx| {
                for (slot, &i) in idx.iter().enumerate() {
                    row[slot * d..(slot + 1) * d].copy_from_slice(x.row(i));
                }
                t += 1;
                if b.hit(&row) {
                    c += 1;
                    if v.len() < VIOLATION_CAP {
                        v.push(row.clone());
                    }
                }
            });
            (t, c, v)
        })
        .collect();
    Ok(VerifyReport::merge("assert_avoids", parts, started))
}

fn visit_distinct<F: FnMut(&[usize])>(len: usize, n: usize, idx: &mut Vec<usize>, f: &mut F) {
    if idx.len() == n {
        f(idx);
        return;
    }
    for i in 0..len {
        if !idx.contains(&i) {
            idx.push(i);
            visit_distinct(len, n, idx, f);
            idx.pop();
        }
    }
}

/// An interval handed to the Keleti step, and the generation it produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedInterval {
    pub interval: CubeIndex,
    /// The step builds generation `step + 1`.
    pub step: usize,
}

/// Quadruples `x1 < x2 <= x3 < x4` of startpoints with `x1` alone inside some
/// processed interval must satisfy `x2 - x1 != x4 - x3`, and the generation
/// `M+1` startpoints must miss that equation by at least 5 units.
pub fn difference_check(x: &GridSet, processed: &[ProcessedInterval], sched: &BranchingSchedule, budget: u128) -> Result<VerifyReport> {
    let started = Instant::now();
    if x.dim() != 1 || x.kind() != GridKind::Fine {
        return Err(VerifyError::Invalid("difference checks take fine sets in R".into()));
    }
    let len = x.len() as u128;
    if len.pow(4) / 24 > budget {
        return Err(VerifyError::Budget { tuples: len.pow(4) / 24, budget });
    }
    let k = x.generation();
    let pts: Vec<u64> = x.iter().map(|r| r[0]).collect();
    let dk = sched.fine_denom(k)?;
    // Per processed interval: ratio to its generation and to the step's output.
    let scopes: Vec<(u64, u64, u64)> = processed
        .iter()
        .filter(|p| p.step < k)
        .map(|p| {
            let to_i = dk / sched.fine_denom(p.interval.generation)?;
            let to_out = dk / sched.fine_denom(p.step + 1)?;
            Ok((p.interval.coords[0], to_i, to_out))
        })
        .collect::<Result<_>>()?;
    let parts: Vec<_> = (0..pts.len())
        .into_par_iter()
        .map(|i1| {
            let (mut t, mut c, mut v) = (0u64, 0u64, Vec::new());
            let x1 = pts[i1];
            let live: Vec<&(u64, u64, u64)> = scopes.iter().filter(|s| x1 / s.1 == s.0).collect();
            if live.is_empty() {
                return (t, c, v);
            }
            for i2 in i1 + 1..pts.len() {
                for i3 in i2..pts.len() {
                    for i4 in i3 + 1..pts.len() {
                        let (x2, x3, x4) = (pts[i2], pts[i3], pts[i4]);
                        let mut scoped = live.iter().filter(|s| x2 / s.1 != s.0 && x3 / s.1 != s.0 && x4 / s.1 != s.0).peekable();
                        if scoped.peek().is_none() {
                            continue;
                        }
                        t += 1;
                        let exact = x2 as i128 - x1 as i128 == x4 as i128 - x3 as i128;
                        let close = scoped.any(|s| {
                            let o = |p: u64| (p / s.2) as i128;
                            ((o(x4) - o(x3)) - (o(x2) - o(x1))).abs() < 5
                        });
                        if exact || close {
                            c += 1;
                            if v.len() < VIOLATION_CAP {
                                v.push(vec![x1, x2, x3, x4]);
                            }
                        }
                    }
                }
            }
            (t, c, v)
        })
        .collect();
    Ok(VerifyReport::merge("difference_check", parts, started))
}

/// No closed sum `Q_x + Q_y` meets a cube of the `Y` cover, for `x = y` too.
///
/// `y_cover` lists the cubes of `Y` on the same grid as `x`.
pub fn sumset_check(x: &GridSet, y_cover: &GridSet, budget: u128) -> Result<VerifyReport> {
    let started = Instant::now();
    if x.arity() != 1 || y_cover.arity() != 1 || x.dim() != y_cover.dim() || x.denom() != y_cover.denom() {
        return Err(VerifyError::Invalid("X and the Y cover must share a grid".into()));
    }
    let len = x.len() as u128;
    let tuples = len * (len + 1) / 2;
    if tuples > budget {
        return Err(VerifyError::Budget { tuples, budget });
    }
    let d = x.dim();
    let y: HashSet<&[u64]> = y_cover.iter().collect();
    let parts: Vec<_> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let (mut t, mut c, mut v) = (0u64, 0u64, Vec::new());
            let a = x.row(i);
            let mut probe = vec![0u64; d];
            for j in i..x.len() {
                let b = x.row(j);
                t += 1;
                // The closed sum spans [a+b, a+b+2]; a cube c meets it iff a+b-1 <= c <= a+b+2.
                if meets_any(&y, &mut probe, a.iter().zip(b).map(|(p, q)| (p + q) as i128 - 1), y_cover.denom()) {
                    c += 1;
                    if v.len() < VIOLATION_CAP {
                        let mut row = a.to_vec();
                        row.extend_from_slice(b);
                        v.push(row);
                    }
                }
            }
            (t, c, v)
        })
        .collect();
    Ok(VerifyReport::merge("sumset_check", parts, started))
}

fn meets_any(y: &HashSet<&[u64]>, probe: &mut [u64], lo: impl Iterator<Item = i128>, denom: u64) -> bool {
    let lo: Vec<i128> = lo.collect();
    let d = lo.len();
    let mut off = vec![0i128; d];
    loop {
        let mut inside = true;
        for i in 0..d {
            let c = lo[i] + off[i];
            if c < 0 || c >= denom as i128 {
                inside = false;
                break;
            }
            probe[i] = c as u64;
        }
        if inside && y.contains(&*probe) {
            return true;
        }
        let mut i = d;
        loop {
            if i == 0 {
                return false;
            }
            i -= 1;
            off[i] += 1;
            if off[i] < 4 {
                break;
            }
            off[i] = 0;
        }
    }
}

/// Default isosceles gap `sqrt(1 + L^2)` in units of the cube side.
pub fn default_isosceles_gap(curve: &CurveSpec) -> f64 {
    (1.0 + curve.lipschitz().powi(2)).sqrt()
}

/// For all triples of distinct cubes, the graph points over the midpoints keep
/// every pair of legs from a common apex more than `tau * l` apart in length.
pub fn isosceles_check(x: &GridSet, curve: &CurveSpec, tau: f64, budget: u128) -> Result<VerifyReport> {
    let started = Instant::now();
    if x.dim() != 1 || x.arity() != 1 {
        return Err(VerifyError::Invalid("isosceles checks take sets in R".into()));
    }
    let len = x.len() as u128;
    let tuples = len * len.saturating_sub(1) * len.saturating_sub(2) / 6;
    if tuples > budget {
        return Err(VerifyError::Budget { tuples, budget });
    }
    let l = 1.0 / x.denom() as f64;
    let gap = tau * l;
    let pts: Vec<Vec<f64>> = x.iter().map(|r| curve.point((r[0] as f64 + 0.5) * l)).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let parts: Vec<_> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let (mut t, mut c, mut v) = (0u64, 0u64, Vec::new());
            for j in i + 1..pts.len() {
                let dij = dist(&pts[i], &pts[j]);
                for k in j + 1..pts.len() {
                    t += 1;
                    let dik = dist(&pts[i], &pts[k]);
                    let djk = dist(&pts[j], &pts[k]);
                    let bad = (dij - dik).abs() <= gap || (dij - djk).abs() <= gap || (dik - djk).abs() <= gap;
                    if bad {
                        c += 1;
                        if v.len() < VIOLATION_CAP {
                            v.push(vec![x.row(i)[0], x.row(j)[0], x.row(k)[0]]);
                        }
                    }
                }
            }
            (t, c, v)
        })
        .collect();
    Ok(VerifyReport::merge("isosceles_check", parts, started))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[u64], denom: u64, k: usize) -> GridSet {
        GridSet::from_rows(1, 1, k, GridKind::Fine, denom, points.iter().map(|&p| vec![p])).unwrap()
    }

    #[test]
    fn empty_bad_set_counts_falling_factorial() {
        let x = line(&[0, 3, 5, 7], 8, 3);
        let b = GridSet::empty(1, 2, 3, GridKind::Fine, 8);
        let r = assert_avoids(&x, Target::Grid(&b), 2, DEFAULT_BUDGET).unwrap();
        assert!(r.passed());
        assert_eq!(r.tuples, 12);
    }

    #[test]
    fn planted_pair_is_reported() {
        let x = line(&[0, 3, 5], 8, 3);
        let b = GridSet::from_rows(1, 2, 3, GridKind::Fine, 8, vec![vec![5, 0]]).unwrap();
        let r = assert_avoids(&x, Target::Grid(&b), 2, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.violation_count, 1);
        assert_eq!(r.violations, vec![vec![5, 0]]);
    }

    #[test]
    fn budget_is_an_error() {
        let x = line(&(0..100).collect::<Vec<_>>(), 128, 7);
        let b = GridSet::empty(1, 3, 7, GridKind::Fine, 128);
        assert!(matches!(assert_avoids(&x, Target::Grid(&b), 3, 1000), Err(VerifyError::Budget { .. })));
    }

    #[test]
    fn sumset_plants() {
        let x = line(&[1, 6], 16, 4);
        let y = GridSet::empty(1, 1, 4, GridKind::Fine, 16);
        assert!(sumset_check(&x, &y, DEFAULT_BUDGET).unwrap().passed());
        let y = line(&[7], 16, 4);
        let r = sumset_check(&x, &y, DEFAULT_BUDGET).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn collinear_triple_on_flat_curve() {
        let c = CurveSpec::new(vec![0.0, 1.0], vec![vec![0.0], vec![0.0]]).unwrap();
        let x = line(&[2, 5, 8], 16, 4);
        assert!(!isosceles_check(&x, &c, 1.0, DEFAULT_BUDGET).unwrap().passed());
        let x = line(&[2, 5], 16, 4);
        assert_eq!(isosceles_check(&x, &c, 1.0, DEFAULT_BUDGET).unwrap().tuples, 0);
    }

    #[test]
    fn planted_difference_quadruple() {
        let s = BranchingSchedule::new(1, vec![10, 10], vec![10, 10]).unwrap();
        let x = line(&[1, 13, 30, 42], 100, 2);
        let p = vec![ProcessedInterval { interval: CubeIndex::fine(1, vec![0]), step: 1 }];
        let r = difference_check(&x, &p, &s, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.violation_count, 1);
        let few = line(&[0, 5], 100, 2);
        assert_eq!(difference_check(&few, &p, &s, DEFAULT_BUDGET).unwrap().tuples, 0);
    }
}
