//! Canonical weight trees, Frostman exponents and the uniform-mass criterion.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dyadic::{BranchingSchedule, DyadicError, GridKind, GridSet};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("generation {generation} cube {coords:?} keeps no children")]
    Barren { generation: usize, coords: Vec<u64> },
    #[error("generation {generation} cube {coords:?} has no parent in the previous level")]
    Orphan { generation: usize, coords: Vec<u64> },
    #[error("the tree has no cubes below the root in the requested range")]
    Empty,
    #[error("invalid level: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] DyadicError),
}

type Result<T> = std::result::Result<T, MeasureError>;

/// Natural logarithm of a positive big integer.
pub fn ln_big(x: &BigInt) -> f64 {
    let bits = x.bits();
    if bits <= 1000 {
        return x.to_f64().unwrap_or(f64::INFINITY).ln();
    }
    let shift = bits - 64;
    let top: BigInt = x >> shift;
    top.to_f64().unwrap_or(f64::INFINITY).ln() + shift as f64 * std::f64::consts::LN_2
}

/// Natural logarithm of a positive rational.
pub fn ln_ratio(x: &BigRational) -> f64 {
    ln_big(x.numer()) - ln_big(x.denom())
}

fn pow_big(base: u64, e: u64) -> BigInt {
    num::pow(BigInt::from(base), e as usize)
}

/// Exact weights on the kept fine cubes of every generation.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTree {
    levels: Vec<GridSet>,
    weights: Vec<Vec<BigRational>>,
    schedule: BranchingSchedule,
}

/// Mass 1 at the root, split equally among the kept children of each cube.
///
/// `levels[j]` is the kept set at generation `levels[0].generation() + j`.
pub fn canonical_weights(levels: &[GridSet], schedule: &BranchingSchedule) -> Result<WeightTree> {
    let first = levels.first().ok_or(MeasureError::Empty)?;
    let g0 = first.generation();
    for (j, level) in levels.iter().enumerate() {
        if level.generation() != g0 + j || level.kind() != GridKind::Fine || level.arity() != 1 {
            return Err(MeasureError::Invalid(format!("level {j} is not the fine generation {}", g0 + j)));
        }
    }
    let share = BigRational::new(BigInt::one(), BigInt::from(first.len().max(1)));
    let mut weights = vec![vec![share; first.len()]];
    for j in 1..levels.len() {
        let (prev, cur) = (&levels[j - 1], &levels[j]);
        let n = schedule.branching(cur.generation())?;
        let mut parent_of = Vec::with_capacity(cur.len());
        let mut kids = vec![0usize; prev.len()];
        for row in cur.iter() {
            let p: Vec<u64> = row.iter().map(|&c| c / n).collect();
            let pos = prev
                .position(&p)
                .ok_or_else(|| MeasureError::Orphan { generation: cur.generation(), coords: row.to_vec() })?;
            kids[pos] += 1;
            parent_of.push(pos);
        }
        if let Some(i) = kids.iter().position(|&c| c == 0) {
            return Err(MeasureError::Barren { generation: prev.generation(), coords: prev.row(i).to_vec() });
        }
        let w: Vec<BigRational> = parent_of
            .iter()
            .map(|&p| &weights[j - 1][p] / BigRational::from_integer(BigInt::from(kids[p])))
            .collect();
        weights.push(w);
    }
    Ok(WeightTree { levels: levels.to_vec(), weights, schedule: schedule.clone() })
}

impl WeightTree {
    pub fn first_generation(&self) -> usize {
        self.levels[0].generation()
    }

    pub fn last_generation(&self) -> usize {
        self.first_generation() + self.levels.len() - 1
    }

    pub fn schedule(&self) -> &BranchingSchedule {
        &self.schedule
    }

    pub fn level(&self, k: usize) -> Option<&GridSet> {
        k.checked_sub(self.first_generation()).and_then(|j| self.levels.get(j))
    }

    pub fn weights(&self, k: usize) -> Option<&[BigRational]> {
        k.checked_sub(self.first_generation()).and_then(|j| self.weights.get(j)).map(Vec::as_slice)
    }

    pub fn weight_of(&self, k: usize, row: &[u64]) -> BigRational {
        match (self.level(k), self.weights(k)) {
            (Some(l), Some(w)) => l.position(row).map_or_else(BigRational::zero, |i| w[i].clone()),
            _ => BigRational::zero(),
        }
    }

    pub fn total(&self, k: usize) -> BigRational {
        self.weights(k).map_or_else(BigRational::zero, |w| w.iter().sum())
    }

    /// Whether every internal cube's weight equals the sum over its kept children.
    pub fn parent_sum_holds(&self) -> bool {
        for j in 1..self.levels.len() {
            let n = match self.schedule.branching(self.levels[j].generation()) {
                Ok(n) => n,
                Err(_) => return false,
            };
            let mut sums: HashMap<Vec<u64>, BigRational> = HashMap::new();
            for (row, w) in self.levels[j].iter().zip(&self.weights[j]) {
                *sums.entry(row.iter().map(|&c| c / n).collect()).or_insert_with(BigRational::zero) += w;
            }
            for (row, w) in self.levels[j - 1].iter().zip(&self.weights[j - 1]) {
                if sums.get(row) != Some(w) {
                    return false;
                }
            }
        }
        true
    }

    /// Text dump, one `k coords... p/q` line per stored cube.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (level, w) in self.levels.iter().zip(&self.weights) {
            for (row, x) in level.iter().zip(w) {
                let _ = write!(out, "{}", level.generation());
                for c in row {
                    let _ = write!(out, " {c}");
                }
                let _ = writeln!(out, " {}/{}", x.numer(), x.denom());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrostmanWitness {
    /// Largest `s` with `w(Q) <= l(Q)^s` on every cube in range.
    pub exponent: f64,
    /// The constant the exponent is quoted against.
    pub constant: f64,
    pub generation: usize,
    pub coords: Vec<u64>,
    pub weight: String,
}

/// Frostman exponent with constant 1 over the generations in `range`.
///
/// Generation 0 has side 1 and carries no information, so it is skipped.
pub fn frostman_exponent(tree: &WeightTree, range: RangeInclusive<usize>) -> Result<FrostmanWitness> {
    let mut best: Option<FrostmanWitness> = None;
    for k in range {
        if k == 0 {
            continue;
        }
        let (Some(level), Some(w)) = (tree.level(k), tree.weights(k)) else { continue };
        let ln_d = (tree.schedule.fine_denom(k)? as f64).ln();
        for (row, x) in level.iter().zip(w) {
            let s = -ln_ratio(x) / ln_d;
            if best.as_ref().is_none_or(|b| s < b.exponent) {
                best = Some(FrostmanWitness {
                    exponent: s,
                    constant: 1.0,
                    generation: k,
                    coords: row.to_vec(),
                    weight: format!("{}/{}", x.numer(), x.denom()),
                });
            }
        }
    }
    best.ok_or(MeasureError::Empty)
}

/// Exact check of `w(Q) <= C l(Q)^{p/q}` on every cube in `range`.
pub fn certify_frostman(tree: &WeightTree, p: u64, q: u64, c: &BigRational, range: RangeInclusive<usize>) -> Result<bool> {
    if q == 0 {
        return Err(MeasureError::Invalid("zero denominator in the exponent".into()));
    }
    let cq = num::pow(c.clone(), q as usize);
    for k in range {
        let Some(w) = tree.weights(k) else { continue };
        let dp = BigRational::from_integer(num::pow(BigInt::from(tree.schedule.fine_denom(k)?), p as usize));
        for x in w {
            if num::pow(x.clone(), q as usize) * &dp > cq {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    /// Realized constant.
    pub constant: f64,
    pub bound: f64,
    pub holds: bool,
    /// Generation and coordinates of the extremal cube or cell.
    pub witness: Option<(usize, Vec<u64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformMassReport {
    pub exponent: f64,
    pub properties: Vec<PropertyCheck>,
}

impl UniformMassReport {
    pub fn holds(&self) -> bool {
        self.properties.iter().all(|p| p.holds)
    }
}

/// The three multi-scale hypotheses, each with its realized constant.
///
/// (1) `w(Q) <= C1 l_k^s` on fine cubes, (2) at most `C2` kept fine cubes of the
/// next generation inside one intermediary cell, (3) `mu(R) <= C3 M^{-d} mu(Q)`.
/// (1) and (3) pass when the constant is at most `c_max`; (2) passes at `2^d`.
pub fn uniform_mass_check(tree: &WeightTree, s: f64, c_max: f64) -> Result<UniformMassReport> {
    let sched = &tree.schedule;
    let d = tree.levels[0].dim();
    let mut p1 = (0.0f64, None);
    for k in tree.first_generation()..=tree.last_generation() {
        let dk = sched.fine_denom(k)? as f64;
        let (level, w) = (tree.level(k).unwrap(), tree.weights(k).unwrap());
        for (row, x) in level.iter().zip(w) {
            // ln(w / l^s) = ln w + s ln D.
            let c = (ln_ratio(x) + s * dk.ln()).exp();
            if c > p1.0 || p1.1.is_none() {
                p1 = (c, Some((k, row.to_vec())));
            }
        }
    }
    let mut p2 = (0u64, None);
    let mut p3 = (BigRational::zero(), None);
    for k in tree.first_generation()..tree.last_generation() {
        let m = sched.intermediary(k + 1)?;
        let q = sched.cell_ratio(k + 1)?;
        let md = BigRational::from_integer(pow_big(m, d as u64));
        let (next, wn) = (tree.level(k + 1).unwrap(), tree.weights(k + 1).unwrap());
        let mut cells: HashMap<Vec<u64>, (u64, BigRational)> = HashMap::new();
        for (row, x) in next.iter().zip(wn) {
            let e = cells.entry(row.iter().map(|&c| c / q).collect()).or_insert_with(|| (0, BigRational::zero()));
            e.0 += 1;
            e.1 += x;
        }
        let mut keys: Vec<_> = cells.keys().cloned().collect();
        keys.sort_unstable();
        for cell in keys {
            let (count, mass) = &cells[&cell];
            if *count > p2.0 {
                p2 = (*count, Some((k + 1, cell.clone())));
            }
            let parent: Vec<u64> = cell.iter().map(|&c| c / m).collect();
            let wq = tree.weight_of(k, &parent);
            if wq.is_positive() {
                let ratio = mass * &md / wq;
                if ratio > p3.0 {
                    p3 = (ratio, Some((k + 1, cell.clone())));
                }
            }
        }
    }
    let c3 = p3.0.to_f64().unwrap_or(f64::INFINITY);
    let bound2 = 2f64.powi(d as i32);
    Ok(UniformMassReport {
        exponent: s,
        properties: vec![
            PropertyCheck { name: "mass bound w(Q) <= C l^s".into(), constant: p1.0, bound: c_max, holds: p1.0 <= c_max, witness: p1.1 },
            PropertyCheck {
                name: "kept cubes per intermediary cell".into(),
                constant: p2.0 as f64,
                bound: bound2,
                holds: p2.0 as f64 <= bound2,
                witness: p2.1,
            },
            PropertyCheck { name: "cell mass mu(R) <= C M^-d mu(Q)".into(), constant: c3, bound: c_max, holds: c3 <= c_max, witness: p3.1 },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_levels(n: u64, depth: usize) -> (Vec<GridSet>, BranchingSchedule) {
        let s = BranchingSchedule::constant(1, n, 1, depth).unwrap();
        let levels = (0..=depth).map(|k| GridSet::full(1, k, &s).unwrap()).collect();
        (levels, s)
    }

    #[test]
    fn uniform_binary_tree_has_equal_leaves() {
        let (levels, s) = full_levels(2, 3);
        let t = canonical_weights(&levels, &s).unwrap();
        let eighth = BigRational::new(BigInt::one(), BigInt::from(8));
        assert!(t.weights(3).unwrap().iter().all(|w| *w == eighth));
        assert!(t.parent_sum_holds());
        let f = frostman_exponent(&t, 0..=3).unwrap();
        assert!((f.exponent - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_chain_has_exponent_zero() {
        let s = BranchingSchedule::constant(1, 2, 1, 3).unwrap();
        let levels: Vec<GridSet> =
            (0..=3).map(|k| GridSet::from_rows(1, 1, k, GridKind::Fine, 1 << k, vec![vec![0]]).unwrap()).collect();
        let t = canonical_weights(&levels, &s).unwrap();
        let f = frostman_exponent(&t, 0..=3).unwrap();
        assert_eq!(f.exponent, 0.0);
        assert_eq!(f.generation, 1);
    }

    #[test]
    fn barren_parent_is_rejected() {
        let s = BranchingSchedule::constant(1, 2, 1, 1).unwrap();
        let l0 = GridSet::unit(1);
        let l1 = GridSet::empty(1, 1, 1, GridKind::Fine, 2);
        assert!(matches!(canonical_weights(&[l0, l1], &s), Err(MeasureError::Barren { .. })));
    }

    #[test]
    fn ln_big_matches_float_for_large_values() {
        let x = num::pow(BigInt::from(3), 2000);
        assert!((ln_big(&x) - 2000.0 * 3f64.ln()).abs() < 1e-9);
    }
}
