//! Configurations presented as per-scale cube covers.
//!
//! A [`CoverOracle`] answers, for a denominator `D`, whether a product cube of
//! side `1/D` in `[0,1]^{dn}` belongs to its cover of the configuration. Every
//! cover is a superset: a cube meeting the configuration is always reported.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dyadic::{DyadicError, GridKind, GridSet};

/// Cap on cubes visited by a brute-force cover scan.
pub const SCAN_LIMIT: u128 = 1 << 27;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("a Lipschitz bound is required for zero-set covers")]
    MissingLipschitz,
    #[error("curve Lipschitz constant {0} is not below 1")]
    LipschitzTooLarge(f64),
    #[error("scan of {cubes} cubes exceeds the limit of {limit}")]
    ScanBudget { cubes: u128, limit: u128 },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("curve file line {line}: {msg}")]
    CurveParse { line: usize, msg: String },
    #[error(transparent)]
    Grid(#[from] DyadicError),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Per-scale cover of a configuration `Y` inside the space of `n`-tuples in `R^d`.
pub trait CoverOracle: Send + Sync + fmt::Debug {
    fn arity(&self) -> usize;
    fn point_dim(&self) -> usize;
    /// Declared upper bound `s` for the lower Minkowski dimension of `Y`.
    fn dim_bound(&self) -> f64;
    fn tag(&self) -> &str;

    /// Whether the product cube with integer corner `cube` (side `1/denom`) is in the cover.
    fn contains(&self, denom: u64, cube: &[u64]) -> bool;

    fn count(&self, denom: u64) -> Result<u128> {
        let mut total = 0u128;
        scan_cubes(self.point_dim() * self.arity(), denom, |c| {
            if self.contains(denom, c) {
                total += 1;
            }
        })?;
        Ok(total)
    }

    fn cover(&self, generation: usize, denom: u64) -> Result<GridSet> {
        let mut flat = Vec::new();
        scan_cubes(self.point_dim() * self.arity(), denom, |c| {
            if self.contains(denom, c) {
                flat.extend_from_slice(c);
            }
        })?;
        // Odometer order is lexicographic, so the buffer is already sorted.
        Ok(GridSet::from_sorted_flat(self.point_dim(), self.arity(), generation, GridKind::Fine, denom, flat))
    }
}

/// Visits every cube of `[0, denom)^dim` in lexicographic order.
pub fn scan_cubes<F: FnMut(&[u64])>(dim: usize, denom: u64, mut visit: F) -> Result<()> {
    let cubes = (denom as u128).checked_pow(dim as u32).unwrap_or(u128::MAX);
    if cubes > SCAN_LIMIT {
        return Err(ConfigError::ScanBudget { cubes, limit: SCAN_LIMIT });
    }
    let mut cur = vec![0u64; dim];
    for _ in 0..cubes {
        visit(&cur);
        for axis in (0..dim).rev() {
            cur[axis] += 1;
            if cur[axis] < denom {
                break;
            }
            cur[axis] = 0;
        }
    }
    Ok(())
}

/// Replays fixed cube lists, one per denominator.
#[derive(Clone, Debug)]
pub struct ExplicitCover {
    n: usize,
    d: usize,
    s: f64,
    tag: String,
    covers: HashMap<u64, GridSet>,
}

pub fn explicit_cover(n: usize, d: usize, s: f64, tag: &str, lists: Vec<GridSet>) -> Result<ExplicitCover> {
    let mut covers = HashMap::new();
    for set in lists {
        if set.dim() != n * d || set.kind() != GridKind::Fine {
            return Err(ConfigError::Invalid(format!("cover list of dimension {} for {n} points in R^{d}", set.dim())));
        }
        if covers.insert(set.denom(), set.with_blocks(d, n)?).is_some() {
            return Err(ConfigError::Invalid("two cover lists share a denominator".into()));
        }
    }
    Ok(ExplicitCover { n, d, s, tag: tag.to_string(), covers })
}

impl CoverOracle for ExplicitCover {
    fn arity(&self) -> usize {
        self.n
    }
    fn point_dim(&self) -> usize {
        self.d
    }
    fn dim_bound(&self) -> f64 {
        self.s
    }
    fn tag(&self) -> &str {
        &self.tag
    }
    fn contains(&self, denom: u64, cube: &[u64]) -> bool {
        self.covers.get(&denom).is_some_and(|c| c.contains(cube))
    }
    fn count(&self, denom: u64) -> Result<u128> {
        Ok(self.covers.get(&denom).map_or(0, |c| c.len() as u128))
    }
    fn cover(&self, generation: usize, denom: u64) -> Result<GridSet> {
        Ok(match self.covers.get(&denom) {
            Some(c) if c.generation() == generation => c.clone(),
            Some(c) => GridSet::from_sorted_flat(self.d, self.n, generation, GridKind::Fine, denom, c.flat().to_vec()),
            None => GridSet::empty(self.d, self.n, generation, GridKind::Fine, denom),
        })
    }
}

/// Closed-cube thickening of finitely many points in `R^d`; declared `s = 0`.
#[derive(Clone, Debug)]
pub struct PointSetCover {
    d: usize,
    points: Vec<Vec<f64>>,
    tag: String,
}

pub fn point_cover(d: usize, points: Vec<Vec<f64>>, tag: &str) -> Result<PointSetCover> {
    if points.iter().any(|p| p.len() != d || p.iter().any(|x| !(0.0..=1.0).contains(x))) {
        return Err(ConfigError::Invalid("points must lie in [0,1]^d".into()));
    }
    Ok(PointSetCover { d, points, tag: tag.to_string() })
}

impl CoverOracle for PointSetCover {
    fn arity(&self) -> usize {
        1
    }
    fn point_dim(&self) -> usize {
        self.d
    }
    fn dim_bound(&self) -> f64 {
        0.0
    }
    fn tag(&self) -> &str {
        &self.tag
    }
    fn contains(&self, denom: u64, cube: &[u64]) -> bool {
        self.points.iter().any(|p| {
            p.iter().zip(cube).all(|(&x, &c)| {
                let (lo, hi) = crate::dyadic::closed_index_range(x, denom);
                lo <= c && c <= hi
            })
        })
    }
    fn count(&self, denom: u64) -> Result<u128> {
        Ok(self.cover(0, denom)?.len() as u128)
    }
    fn cover(&self, generation: usize, denom: u64) -> Result<GridSet> {
        let mut rows = Vec::new();
        for p in &self.points {
            let ranges: Vec<(u64, u64)> = p.iter().map(|&x| crate::dyadic::closed_index_range(x, denom)).collect();
            let mut cur: Vec<u64> = ranges.iter().map(|r| r.0).collect();
            'odo: loop {
                rows.push(cur.clone());
                for axis in (0..self.d).rev() {
                    if cur[axis] < ranges[axis].1 {
                        cur[axis] += 1;
                        continue 'odo;
                    }
                    cur[axis] = ranges[axis].0;
                }
                break;
            }
        }
        Ok(GridSet::from_rows(self.d, 1, generation, GridKind::Fine, denom, rows)?)
    }
}

/// One monomial `coeff * x_1^e_1 ... x_n^e_n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: i64,
    pub exps: Vec<u32>,
}

/// Integer-coefficient polynomial in a fixed number of variables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Polynomial {
    pub nvars: usize,
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(nvars: usize, terms: Vec<(i64, Vec<u32>)>) -> Result<Self> {
        let terms: Vec<Monomial> = terms
            .into_iter()
            .filter(|(c, _)| *c != 0)
            .map(|(coeff, exps)| Monomial { coeff, exps })
            .collect();
        let p = Polynomial { nvars, terms };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.iter().any(|t| t.exps.len() != self.nvars) {
            return Err(ConfigError::Invalid(format!("monomial exponent list must have {} entries", self.nvars)));
        }
        Ok(())
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.exps.iter().sum::<u32>()).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coeff as f64 * t.exps.iter().zip(x).map(|(&e, &v)| v.powi(e as i32)).product::<f64>())
            .sum()
    }

    pub fn partial(&self, var: usize) -> Polynomial {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.exps[var] > 0)
            .map(|t| {
                let mut exps = t.exps.clone();
                exps[var] -= 1;
                Monomial { coeff: t.coeff * t.exps[var] as i64, exps }
            })
            .collect();
        Polynomial { nvars: self.nvars, terms }
    }

    /// Enclosure of the polynomial over a box, by interval arithmetic per monomial.
    pub fn enclose(&self, bx: &[(f64, f64)]) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for t in &self.terms {
            let mut acc = (1.0, 1.0);
            for (&e, &(a, b)) in t.exps.iter().zip(bx) {
                acc = interval_mul(acc, interval_pow(a, b, e));
            }
            let c = t.coeff as f64;
            let scaled = if c >= 0.0 { (c * acc.0, c * acc.1) } else { (c * acc.1, c * acc.0) };
            lo += scaled.0;
            hi += scaled.1;
        }
        // Outward padding absorbs rounding in the sums above.
        let pad = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        (lo - pad, hi + pad)
    }

    /// `f(num / denom) * denom^deg` computed exactly, or `None` on overflow.
    pub fn eval_scaled(&self, num: &[i128], denom: i128) -> Option<i128> {
        let deg = self.degree();
        let mut total: i128 = 0;
        for t in &self.terms {
            let mut v = t.coeff as i128;
            let mut used = 0;
            for (&e, &x) in t.exps.iter().zip(num) {
                v = v.checked_mul(x.checked_pow(e)?)?;
                used += e;
            }
            v = v.checked_mul(denom.checked_pow(deg - used)?)?;
            total = total.checked_add(v)?;
        }
        Some(total)
    }

    /// `sum |c| * deg(term)`: bounds `sum_i sup |d_i f|` on `[0,1]^n`.
    pub fn l1_gradient_bound(&self) -> f64 {
        self.terms.iter().map(|t| (t.coeff.unsigned_abs() as f64) * t.exps.iter().sum::<u32>() as f64).sum()
    }
}

fn interval_mul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let p = [a.0 * b.0, a.0 * b.1, a.1 * b.0, a.1 * b.1];
    (p.iter().copied().fold(f64::INFINITY, f64::min), p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

fn interval_pow(a: f64, b: f64, e: u32) -> (f64, f64) {
    if e == 0 {
        return (1.0, 1.0);
    }
    let (pa, pb) = (a.powi(e as i32), b.powi(e as i32));
    if e % 2 == 1 || a >= 0.0 {
        (pa.min(pb), pa.max(pb))
    } else if b <= 0.0 {
        (pb, pa)
    } else {
        (0.0, pa.max(pb))
    }
}

/// A map `g: [0,1]^{dn} -> R^m` whose zero set is the configuration.
#[derive(Clone)]
pub enum ZeroMap {
    /// Rows `a . x + b`.
    Affine { rows: Vec<Vec<f64>>, offsets: Vec<f64> },
    Polynomial(Vec<Polynomial>),
    Custom { codim: usize, eval: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync> },
}

impl fmt::Debug for ZeroMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZeroMap::Affine { rows, offsets } => f.debug_struct("Affine").field("rows", rows).field("offsets", offsets).finish(),
            ZeroMap::Polynomial(p) => f.debug_tuple("Polynomial").field(p).finish(),
            ZeroMap::Custom { codim, .. } => f.debug_struct("Custom").field("codim", codim).finish(),
        }
    }
}

impl ZeroMap {
    pub fn codim(&self) -> usize {
        match self {
            ZeroMap::Affine { rows, .. } => rows.len(),
            ZeroMap::Polynomial(p) => p.len(),
            ZeroMap::Custom { codim, .. } => *codim,
        }
    }

    fn input_dim(&self) -> Option<usize> {
        match self {
            ZeroMap::Affine { rows, .. } => rows.first().map(Vec::len),
            ZeroMap::Polynomial(p) => p.first().map(|q| q.nvars),
            ZeroMap::Custom { .. } => None,
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ZeroMap::Affine { rows, offsets } => {
                for ((o, row), b) in out.iter_mut().zip(rows).zip(offsets) {
                    *o = row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b;
                }
            }
            ZeroMap::Polynomial(ps) => {
                for (o, p) in out.iter_mut().zip(ps) {
                    *o = p.eval(x);
                }
            }
            ZeroMap::Custom { eval, .. } => eval(x, out),
        }
    }
}

/// Cover of `{g = 0}` by cubes where some corner has `|g| <= L sqrt(dn) / D`.
#[derive(Clone, Debug)]
pub struct ZeroSetCover {
    n: usize,
    d: usize,
    lipschitz: f64,
    map: ZeroMap,
    tag: String,
}

pub fn zero_set_cover(map: ZeroMap, lipschitz: Option<f64>, n: usize, d: usize, tag: &str) -> Result<ZeroSetCover> {
    let lipschitz = lipschitz.ok_or(ConfigError::MissingLipschitz)?;
    if !(lipschitz.is_finite() && lipschitz >= 0.0) {
        return Err(ConfigError::Invalid(format!("Lipschitz bound {lipschitz}")));
    }
    let m = map.codim();
    if m == 0 || m > n * d {
        return Err(ConfigError::Invalid(format!("codimension {m} in dimension {}", n * d)));
    }
    if map.input_dim().is_some_and(|k| k != n * d) {
        return Err(ConfigError::Invalid("map input dimension differs from n * d".into()));
    }
    if let ZeroMap::Affine { rows, offsets } = &map {
        if rows.iter().any(|r| r.len() != n * d) || offsets.len() != m {
            return Err(ConfigError::Invalid("ragged affine map".into()));
        }
    }
    if let ZeroMap::Polynomial(ps) = &map {
        for p in ps {
            p.validate()?;
        }
    }
    Ok(ZeroSetCover { n, d, lipschitz, map, tag: tag.to_string() })
}

impl ZeroSetCover {
    pub fn map(&self) -> &ZeroMap {
        &self.map
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn radius(&self, denom: u64) -> f64 {
        self.lipschitz * ((self.n * self.d) as f64).sqrt() / denom as f64
    }

    /// Candidate range for the last coordinate given the others, from an
    /// affine row with a nonzero last coefficient. Always a superset.
    fn last_axis_candidates(&self, denom: u64, prefix: &[u64]) -> Option<(u64, u64)> {
        let ZeroMap::Affine { rows, offsets } = &self.map else { return None };
        let (row, b) = rows.iter().zip(offsets).find(|(r, _)| r.last().is_some_and(|&a| a != 0.0))?;
        let a_last = *row.last().unwrap();
        let thr = self.radius(denom);
        let dd = denom as f64;
        // Range of the prefix part over the prefix cube corners.
        let mut lo = *b;
        let mut hi = *b;
        for (&a, &c) in row.iter().zip(prefix) {
            let (x0, x1) = (a * c as f64 / dd, a * (c + 1) as f64 / dd);
            lo += x0.min(x1);
            hi += x0.max(x1);
        }
        let (t0, t1) = ((-thr - hi) / a_last * dd, (thr - lo) / a_last * dd);
        let (t0, t1) = (t0.min(t1), t0.max(t1));
        let first = (t0.floor() - 2.0).max(0.0);
        let last = (t1.ceil() + 1.0).min(dd - 1.0);
        if first > last {
            return Some((1, 0));
        }
        Some((first as u64, last as u64))
    }

    fn for_each_covered<F: FnMut(&[u64])>(&self, denom: u64, mut visit: F) -> Result<()> {
        let dim = self.n * self.d;
        if self.last_axis_candidates(denom, &vec![0; dim - 1]).is_some() {
            let mut cube = vec![0u64; dim];
            return scan_cubes(dim - 1, denom, |prefix| {
                let (a, b) = self.last_axis_candidates(denom, prefix).unwrap();
                cube[..dim - 1].copy_from_slice(prefix);
                for j in a..=b {
                    cube[dim - 1] = j;
                    if self.contains(denom, &cube) {
                        visit(&cube);
                    }
                }
            });
        }
        scan_cubes(dim, denom, |c| {
            if self.contains(denom, c) {
                visit(c);
            }
        })
    }
}

impl CoverOracle for ZeroSetCover {
    fn arity(&self) -> usize {
        self.n
    }
    fn point_dim(&self) -> usize {
        self.d
    }
    fn dim_bound(&self) -> f64 {
        (self.n * self.d - self.map.codim()) as f64
    }
    fn tag(&self) -> &str {
        &self.tag
    }
    fn contains(&self, denom: u64, cube: &[u64]) -> bool {
        let dim = cube.len();
        let thr2 = self.radius(denom).powi(2);
        let mut x = vec![0.0; dim];
        let mut out = vec![0.0; self.map.codim()];
        for mask in 0u32..(1 << dim) {
            for (i, (xi, &c)) in x.iter_mut().zip(cube).enumerate() {
                *xi = (c + u64::from((mask >> (dim - 1 - i)) & 1)) as f64 / denom as f64;
            }
            self.map.eval(&x, &mut out);
            if out.iter().map(|v| v * v).sum::<f64>() <= thr2 {
                return true;
            }
        }
        false
    }
    fn count(&self, denom: u64) -> Result<u128> {
        let mut total = 0u128;
        self.for_each_covered(denom, |_| total += 1)?;
        Ok(total)
    }
    fn cover(&self, generation: usize, denom: u64) -> Result<GridSet> {
        let mut flat = Vec::new();
        self.for_each_covered(denom, |c| flat.extend_from_slice(c))?;
        Ok(GridSet::from_sorted_flat(self.d, self.n, generation, GridKind::Fine, denom, flat))
    }
}

/// Piecewise-linear curve `f: [0,1] -> R^{n-1}` through samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    ts: Vec<f64>,
    values: Vec<Vec<f64>>,
    lipschitz: f64,
}

impl CurveSpec {
    pub fn new(ts: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if ts.len() < 2 || ts.len() != values.len() {
            return Err(ConfigError::Invalid("a curve needs at least two samples, one value row each".into()));
        }
        if ts[0] > 0.0 || *ts.last().unwrap() < 1.0 || ts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::Invalid("sample parameters must increase strictly and span [0,1]".into()));
        }
        let width = values[0].len();
        if width == 0 || values.iter().any(|v| v.len() != width) {
            return Err(ConfigError::Invalid("curve values must share a positive width".into()));
        }
        let lipschitz = ts
            .windows(2)
            .zip(values.windows(2))
            .map(|(t, v)| dist(&v[0], &v[1]) / (t[1] - t[0]))
            .fold(0.0, f64::max);
        Ok(CurveSpec { ts, values, lipschitz })
    }

    /// Samples `f` at `samples + 1` equally spaced parameters.
    pub fn sampled<F: Fn(f64) -> Vec<f64>>(f: F, samples: usize) -> Result<Self> {
        let ts: Vec<f64> = (0..=samples).map(|i| i as f64 / samples as f64).collect();
        let values = ts.iter().map(|&t| f(t)).collect();
        Self::new(ts, values)
    }

    /// Reads `t f1 [f2 ...]` lines; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut ts = Vec::new();
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let nums: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| ConfigError::CurveParse { line: i + 1, msg: e.to_string() }))
                .collect::<Result<_>>()?;
            if nums.len() < 2 {
                return Err(ConfigError::CurveParse { line: i + 1, msg: "expected `t f1 [f2 ...]`".into() });
            }
            ts.push(nums[0]);
            values.push(nums[1..].to_vec());
        }
        Self::new(ts, values)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, v) in self.ts.iter().zip(&self.values) {
            out.push_str(&format!("{t:?}"));
            for x in v {
                out.push_str(&format!(" {x:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn width(&self) -> usize {
        self.values[0].len()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, 1.0);
        let i = self.ts.partition_point(|&s| s <= t).clamp(1, self.ts.len() - 1);
        let (t0, t1) = (self.ts[i - 1], self.ts[i]);
        let w = (t - t0) / (t1 - t0);
        self.values[i - 1].iter().zip(&self.values[i]).map(|(a, b)| a + w * (b - a)).collect()
    }

    /// The graph point `(t, f(t))`.
    pub fn point(&self, t: f64) -> Vec<f64> {
        let mut p = vec![t];
        p.extend(self.eval(t));
        p
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cover of parameter triples whose graph points can form an isosceles triangle.
///
/// For apex `p_c` and base `p_a, p_b` the condition is `h = u . v = 0` with
/// `u = p_c - (p_a + p_b)/2` and `v = p_b - p_a`. Moving each parameter within
/// its cube moves each point by at most `rho = sqrt(1 + L^2) l / 2`, so `h`
/// moves by at most `2 rho (|u| + |v|) + 4 rho^2`, evaluated at midpoints.
#[derive(Clone, Debug)]
pub struct IsoscelesCover {
    curve: CurveSpec,
    tag: String,
}

pub fn isosceles_oracle(curve: CurveSpec, tag: &str) -> Result<IsoscelesCover> {
    if curve.lipschitz() >= 1.0 {
        return Err(ConfigError::LipschitzTooLarge(curve.lipschitz()));
    }
    Ok(IsoscelesCover { curve, tag: tag.to_string() })
}

/// Cover at generation `k` of the dyadic tower `D_k = 2^k`.
pub fn isosceles_cover(curve: &CurveSpec, k: usize) -> Result<GridSet> {
    let oracle = isosceles_oracle(curve.clone(), "isosceles")?;
    oracle.cover(k, 1u64 << k)
}

impl IsoscelesCover {
    pub fn curve(&self) -> &CurveSpec {
        &self.curve
    }

    fn rho(&self, denom: u64) -> f64 {
        (1.0 + self.curve.lipschitz().powi(2)).sqrt() * 0.5 / denom as f64
    }

    fn midpoints(&self, denom: u64) -> Vec<Vec<f64>> {
        (0..denom).map(|c| self.curve.point((c as f64 + 0.5) / denom as f64)).collect()
    }

    fn near_isosceles(apex: &[f64], a: &[f64], b: &[f64], rho: f64) -> bool {
        let u: Vec<f64> = apex.iter().zip(a.iter().zip(b)).map(|(c, (x, y))| c - 0.5 * (x + y)).collect();
        let v: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - x).collect();
        let nu = dot(&u, &u).sqrt();
        let nv = dot(&v, &v).sqrt();
        dot(&u, &v).abs() <= 2.0 * rho * (nu + nv) + 4.0 * rho * rho
    }

    fn covered(p: [&[f64]; 3], rho: f64) -> bool {
        Self::near_isosceles(p[2], p[0], p[1], rho)
            || Self::near_isosceles(p[0], p[1], p[2], rho)
            || Self::near_isosceles(p[1], p[0], p[2], rho)
    }
}

impl CoverOracle for IsoscelesCover {
    fn arity(&self) -> usize {
        3
    }
    fn point_dim(&self) -> usize {
        1
    }
    fn dim_bound(&self) -> f64 {
        2.0
    }
    fn tag(&self) -> &str {
        &self.tag
    }
    fn contains(&self, denom: u64, cube: &[u64]) -> bool {
        let p: Vec<Vec<f64>> = cube.iter().map(|&c| self.curve.point((c as f64 + 0.5) / denom as f64)).collect();
        Self::covered([&p[0], &p[1], &p[2]], self.rho(denom))
    }
    fn count(&self, denom: u64) -> Result<u128> {
        let mut total = 0u128;
        self.scan(denom, |_| total += 1)?;
        Ok(total)
    }
    fn cover(&self, generation: usize, denom: u64) -> Result<GridSet> {
        let mut flat = Vec::new();
        self.scan(denom, |c| flat.extend_from_slice(&c))?;
        Ok(GridSet::from_sorted_flat(1, 3, generation, GridKind::Fine, denom, flat))
    }
}

impl IsoscelesCover {
    fn scan<F: FnMut([u64; 3])>(&self, denom: u64, mut visit: F) -> Result<()> {
        let cubes = (denom as u128).pow(3);
        if cubes > SCAN_LIMIT {
            return Err(ConfigError::ScanBudget { cubes, limit: SCAN_LIMIT });
        }
        let mids = self.midpoints(denom);
        let rho = self.rho(denom);
        for a in 0..denom {
            for b in 0..denom {
                for c in 0..denom {
                    let p = [&mids[a as usize][..], &mids[b as usize][..], &mids[c as usize][..]];
                    if Self::covered(p, rho) {
                        visit([a, b, c]);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pairs `(x, y)` with `x + y` in `Y` or `2y` in `Y`, for `Y` given by an arity-1 oracle.
///
/// With closed cubes `x in [a, a+1]/D`, `y in [b, b+1]/D` the sum lies in
/// `[a+b, a+b+2]/D`, which meets the `Y` cube `c` iff `a+b-1 <= c <= a+b+2`.
/// Likewise `2y` meets `c` iff `2b-1 <= c <= 2b+2`.
#[derive(Clone, Debug)]
pub struct SumsetCover {
    y: Arc<dyn CoverOracle>,
    tag: String,
}

pub fn sumset_cover(y: Arc<dyn CoverOracle>, tag: &str) -> Result<SumsetCover> {
    if y.arity() != 1 {
        return Err(ConfigError::Invalid(format!("sumset base has arity {}, expected 1", y.arity())));
    }
    Ok(SumsetCover { y, tag: tag.to_string() })
}

impl SumsetCover {
    pub fn base(&self) -> &Arc<dyn CoverOracle> {
        &self.y
    }

    /// Whether `Y`'s cover has a cube with `lo_i <= c_i <= lo_i + 3` on every axis.
    fn base_meets(&self, denom: u64, lo: &[i128]) -> bool {
        let d = lo.len();
        let mut off = vec![0i128; d];
        let mut c = vec![0u64; d];
        'odo: loop {
            let mut inside = true;
            for i in 0..d {
                let v = lo[i] + off[i];
                if v < 0 || v >= denom as i128 {
                    inside = false;
                    break;
                }
                c[i] = v as u64;
            }
            if inside && self.y.contains(denom, &c) {
                return true;
            }
            for i in (0..d).rev() {
                off[i] += 1;
                if off[i] < 4 {
                    continue 'odo;
                }
                off[i] = 0;
            }
            return false;
        }
    }

    fn rows_for_base(&self, denom: u64) -> Result<Vec<Vec<u64>>> {
        let d = self.y.point_dim();
        let base = self.y.cover(0, denom)?;
        let mut rows = Vec::new();
        let dd = denom as i128;
        // Sum part: every x, and y with c - x - 2 <= y <= c - x + 1.
        for c in base.iter() {
            let mut x = vec![0u64; d];
            'xs: loop {
                let ranges: Vec<(i128, i128)> = (0..d)
                    .map(|i| {
                        let lo = (c[i] as i128 - x[i] as i128 - 2).max(0);
                        let hi = (c[i] as i128 - x[i] as i128 + 1).min(dd - 1);
                        (lo, hi)
                    })
                    .collect();
                if ranges.iter().all(|r| r.0 <= r.1) {
                    push_pairs(&x, &ranges, &mut rows);
                }
                for i in (0..d).rev() {
                    x[i] += 1;
                    if x[i] < denom {
                        continue 'xs;
                    }
                    x[i] = 0;
                }
                break;
            }
            // Halved part: y with 2y - 1 <= c <= 2y + 2, any x.
            let ranges: Vec<(i128, i128)> = (0..d)
                .map(|i| {
                    let lo = ((c[i] as i128 - 2) as f64 / 2.0).ceil().max(0.0) as i128;
                    let hi = ((c[i] as i128 + 1) / 2).min(dd - 1);
                    (lo, hi)
                })
                .collect();
            if ranges.iter().all(|r| r.0 <= r.1) {
                let mut x = vec![0u64; d];
                'xs2: loop {
                    push_pairs(&x, &ranges, &mut rows);
                    for i in (0..d).rev() {
                        x[i] += 1;
                        if x[i] < denom {
                            continue 'xs2;
                        }
                        x[i] = 0;
                    }
                    break;
                }
            }
        }
        Ok(rows)
    }
}

fn push_pairs(x: &[u64], ranges: &[(i128, i128)], rows: &mut Vec<Vec<u64>>) {
    let d = x.len();
    let mut y: Vec<i128> = ranges.iter().map(|r| r.0).collect();
    'odo: loop {
        let mut row = x.to_vec();
        row.extend(y.iter().map(|&v| v as u64));
        rows.push(row);
        for i in (0..d).rev() {
            if y[i] < ranges[i].1 {
                y[i] += 1;
                continue 'odo;
            }
            y[i] = ranges[i].0;
        }
        break;
    }
}

impl CoverOracle for SumsetCover {
    fn arity(&self) -> usize {
        2
    }
    fn point_dim(&self) -> usize {
        self.y.point_dim()
    }
    fn dim_bound(&self) -> f64 {
        self.y.point_dim() as f64 + self.y.dim_bound()
    }
    fn tag(&self) -> &str {
        &self.tag
    }
    fn contains(&self, denom: u64, cube: &[u64]) -> bool {
        let d = self.y.point_dim();
        let (x, y) = cube.split_at(d);
        let sum_lo: Vec<i128> = x.iter().zip(y).map(|(&a, &b)| a as i128 + b as i128 - 1).collect();
        let half_lo: Vec<i128> = y.iter().map(|&b| 2 * b as i128 - 1).collect();
        self.base_meets(denom, &sum_lo) || self.base_meets(denom, &half_lo)
    }
    fn count(&self, denom: u64) -> Result<u128> {
        Ok(self.cover(0, denom)?.len() as u128)
    }
    fn cover(&self, generation: usize, denom: u64) -> Result<GridSet> {
        let d = self.y.point_dim();
        let rows = self.rows_for_base(denom)?;
        Ok(GridSet::from_rows(d, 2, generation, GridKind::Fine, denom, rows)?)
    }
}

/// Quadruples `(x1, x2, x3, x4)` in `R` whose cubes admit `x2 - x1 = x4 - x3`.
///
/// Over the closed cubes the value `(x2 - x1) - (x4 - x3)` ranges over
/// `[delta - 2, delta + 2] / D` with `delta` the same expression on corners.
#[derive(Clone, Debug, Default)]
pub struct TranslateConfig;

pub fn translate_config() -> TranslateConfig {
    TranslateConfig
}

impl CoverOracle for TranslateConfig {
    fn arity(&self) -> usize {
        4
    }
    fn point_dim(&self) -> usize {
        1
    }
    fn dim_bound(&self) -> f64 {
        3.0
    }
    fn tag(&self) -> &str {
        "translate"
    }
    fn contains(&self, _denom: u64, c: &[u64]) -> bool {
        let delta = (c[1] as i128 - c[0] as i128) - (c[3] as i128 - c[2] as i128);
        delta.abs() <= 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diagonal() -> ZeroSetCover {
        let map = ZeroMap::Affine { rows: vec![vec![1.0, -1.0]], offsets: vec![0.0] };
        zero_set_cover(map, Some(2f64.sqrt()), 2, 1, "diag").unwrap()
    }

    #[test]
    fn missing_lipschitz_is_rejected() {
        let map = ZeroMap::Affine { rows: vec![vec![1.0, -1.0]], offsets: vec![0.0] };
        assert!(matches!(zero_set_cover(map, None, 2, 1, "x"), Err(ConfigError::MissingLipschitz)));
    }

    #[test]
    fn diagonal_band_has_linear_count() {
        let z = diagonal();
        assert_eq!(z.dim_bound(), 1.0);
        for k in 3..8 {
            let denom = 1u64 << k;
            let c = z.count(denom).unwrap();
            // Some corner has |x - y| <= 2/D exactly when |a - b| <= 3.
            let direct = (0..denom as i64)
                .flat_map(|a| (0..denom as i64).map(move |b| (a, b)))
                .filter(|(a, b)| (a - b).abs() <= 3)
                .count() as u128;
            assert_eq!(c, direct, "denominator {denom}");
        }
    }

    #[test]
    fn constant_map_has_empty_cover() {
        let map = ZeroMap::Affine { rows: vec![vec![0.0, 0.0]], offsets: vec![1.0] };
        let z = zero_set_cover(map, Some(0.0), 2, 1, "one").unwrap();
        assert_eq!(z.count(64).unwrap(), 0);
    }

    #[test]
    fn isosceles_rejects_steep_curves() {
        let c = CurveSpec::new(vec![0.0, 1.0], vec![vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(isosceles_oracle(c, "iso"), Err(ConfigError::LipschitzTooLarge(_))));
    }

    #[test]
    fn flat_curve_covers_midpoint_triples() {
        let c = CurveSpec::new(vec![0.0, 1.0], vec![vec![0.0], vec![0.0]]).unwrap();
        let iso = isosceles_oracle(c, "iso").unwrap();
        assert!(iso.contains(64, &[10, 30, 20]));
        assert!(iso.contains(64, &[20, 10, 30]));
        assert!(!iso.contains(64, &[0, 2, 40]));
    }

    #[test]
    fn translate_examples() {
        let t = translate_config();
        assert!(t.contains(40, &[0, 5, 10, 15]));
        assert!(!t.contains(40, &[0, 5, 10, 18]));
    }

    #[test]
    fn curve_text_roundtrip() {
        let c = CurveSpec::sampled(|t| vec![0.25 * (2.0 * t).sin()], 16).unwrap();
        let back = CurveSpec::from_text(&c.to_text()).unwrap();
        assert_eq!(c, back);
        assert!(c.lipschitz() <= 0.5 + 1e-12);
    }
}
