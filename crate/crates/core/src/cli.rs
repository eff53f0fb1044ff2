//! Run configs, artifact files, replay and CSV export.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::avoidance::{lowrank_step, mathe_step, AvoidError, FpParams, HypothesisPolicy, Inequality, MatheParams, Ratio};
use crate::configs::{
    explicit_cover, isosceles_oracle, point_cover, sumset_cover, translate_config, zero_set_cover, ConfigError, CoverOracle, CurveSpec,
    Polynomial, ZeroMap,
};
use crate::construct::{
    build_strong_cover, default_eps, dimension_report, iterate_fourier, iterate_fp, iterate_keleti, iterate_main,
    processed_tuple_check, ConstructError, ConstructionState, MainParams, ScheduleChoice, StepLog, QUEUE_CAP,
};
use crate::dimension::{cantor_levels, minkowski_estimate, minkowski_of_levels, DimensionError};
use crate::dyadic::{make_schedule, thicken, BranchingSchedule, DyadicError, GridKind, GridSet, ScheduleSpec};
use crate::fourier::{decay_csv, measure_of_set, Exhaustion, FourierError, FourierParams};
use crate::measure::{canonical_weights, frostman_exponent};
use crate::verify::{assert_avoids, default_isosceles_gap, difference_check, isosceles_check, sumset_check, Target, VerifyError, VerifyReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Main,
    Keleti,
    Fp,
    Mathe,
    Lowrank,
    Fourier,
    Dimension,
    Verify,
}

impl Mode {
    pub fn randomized(self) -> bool {
        matches!(self, Mode::Main | Mode::Fourier)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Middle-thirds Cantor levels for `mode = dimension`.
    Cantor,
    /// `A + A` avoiding `Y = {1}` with constant branching 64 and 8 cells per side.
    Sumset,
    /// A Lipschitz-1/2 graph without isosceles triangles, branching 256 and 4 cells per side.
    Isosceles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurveSource {
    File { file: PathBuf },
    Samples { ts: Vec<f64>, values: Vec<Vec<f64>> },
    /// `t -> amplitude * sin(frequency * t)` sampled on a uniform grid.
    Sine { amplitude: f64, frequency: f64, samples: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolySpec {
    pub nvars: usize,
    /// `(coefficient, exponents)` per monomial.
    pub terms: Vec<(i64, Vec<u32>)>,
}

impl PolySpec {
    fn build(&self) -> Result<Polynomial, ConfigError> {
        Polynomial::new(self.nvars, self.terms.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    Points {
        d: usize,
        points: Vec<Vec<f64>>,
        #[serde(default)]
        tag: Option<String>,
    },
    /// One grid-set file per denominator.
    Explicit {
        n: usize,
        d: usize,
        s: f64,
        files: Vec<PathBuf>,
        #[serde(default)]
        tag: Option<String>,
    },
    Affine {
        n: usize,
        d: usize,
        rows: Vec<Vec<f64>>,
        offsets: Vec<f64>,
        #[serde(default)]
        lipschitz: Option<f64>,
        #[serde(default)]
        tag: Option<String>,
    },
    Polynomial {
        n: usize,
        d: usize,
        maps: Vec<PolySpec>,
        #[serde(default)]
        lipschitz: Option<f64>,
        #[serde(default)]
        tag: Option<String>,
    },
    Isosceles {
        curve: CurveSource,
        #[serde(default)]
        tag: Option<String>,
    },
    Sumset {
        base: Box<OracleSpec>,
        #[serde(default)]
        tag: Option<String>,
    },
    Translate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    #[serde(default = "default_verify_budget")]
    pub verify: u64,
    #[serde(default = "default_exhaustive")]
    pub exhaustive: u64,
    #[serde(default = "default_retry")]
    pub retry_limit: usize,
}

fn default_verify_budget() -> u64 {
    crate::verify::DEFAULT_BUDGET as u64
}

fn default_exhaustive() -> u64 {
    1 << 16
}

fn default_retry() -> usize {
    64
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets { verify: default_verify_budget(), exhaustive: default_exhaustive(), retry_limit: default_retry() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpSection {
    #[serde(default = "one")]
    pub c_f: f64,
    #[serde(default = "default_cap")]
    pub queue_cap: usize,
}

fn one() -> f64 {
    1.0
}

fn default_cap() -> usize {
    QUEUE_CAP
}

/// Disjoint families at one generation, for single-step modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSection {
    pub generation: usize,
    pub families: Vec<Vec<Vec<u64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatheSection {
    pub polynomial: PolySpec,
    pub c0: f64,
    pub c_big: f64,
    #[serde(default)]
    pub eps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowRankSection {
    /// Entries `(p, q)` standing for `p / q`.
    pub matrix: Vec<Vec<(i64, i64)>>,
    pub s: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierSection {
    pub s: f64,
    pub eps: f64,
    #[serde(default)]
    pub exhaustion: Exhaustion,
    /// Decay exponent for the CSV; defaults to `1/4 - eps`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub m_max: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyKind {
    Avoids,
    Sumset,
    Isosceles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub check: VerifyKind,
    #[serde(default)]
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub oracles: Vec<OracleSpec>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Per-generation `eps_k` for the main construction.
    #[serde(default)]
    pub eps: Option<Vec<f64>>,
    #[serde(default)]
    pub policy: Option<HypothesisPolicy>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Grid-set file for `dimension` and `verify`.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub fp: Option<FpSection>,
    #[serde(default)]
    pub step: Option<StepSection>,
    #[serde(default)]
    pub mathe: Option<MatheSection>,
    #[serde(default)]
    pub lowrank: Option<LowRankSection>,
    #[serde(default)]
    pub fourier: Option<FourierSection>,
    #[serde(default)]
    pub verify: Option<VerifySection>,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Fills fields a preset implies and the caller left out.
    pub fn apply_preset(&mut self) {
        match self.preset {
            Some(Preset::Cantor) => {
                self.depth.get_or_insert(8);
            }
            Some(Preset::Sumset) => {
                if self.oracles.is_empty() {
                    let base = OracleSpec::Points { d: 1, points: vec![vec![1.0]], tag: Some("Y".into()) };
                    self.oracles.push(OracleSpec::Sumset { base: Box::new(base), tag: Some("sumset".into()) });
                }
                let depth = *self.depth.get_or_insert(3);
                self.schedule.get_or_insert(ScheduleSpec::Constant { d: 1, n: 64, m: Some(8), depth });
                self.policy.get_or_insert(HypothesisPolicy::Report);
            }
            Some(Preset::Isosceles) => {
                if self.oracles.is_empty() {
                    let curve = CurveSource::Sine { amplitude: 0.25, frequency: 2.0, samples: 1024 };
                    self.oracles.push(OracleSpec::Isosceles { curve, tag: Some("isosceles".into()) });
                }
                let depth = *self.depth.get_or_insert(3);
                self.schedule.get_or_insert(ScheduleSpec::Constant { d: 1, n: 256, m: Some(4), depth });
                self.policy.get_or_insert(HypothesisPolicy::Report);
                self.eps.get_or_insert(vec![0.05; depth]);
            }
            None => {}
        }
    }

    fn policy(&self) -> HypothesisPolicy {
        self.policy.unwrap_or_default()
    }

    /// Presence of the fields each mode needs.
    pub fn validate(&self) -> anyhow::Result<()> {
        let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(anyhow::anyhow!("mode {:?} needs {what}", self.mode)) };
        if self.mode.randomized() {
            need(self.seed.is_some(), "a seed (config `seed` or --seed)")?;
        }
        match self.mode {
            Mode::Main => {
                need(!self.oracles.is_empty(), "at least one oracle")?;
                need(self.depth.is_some(), "depth")?;
            }
            Mode::Keleti => need(self.schedule.is_some() && self.depth.is_some(), "schedule and depth")?,
            Mode::Fp => {
                need(self.schedule.is_some() && self.depth.is_some(), "schedule and depth")?;
                need(
                    matches!(self.oracles.first(), Some(OracleSpec::Affine { .. } | OracleSpec::Polynomial { .. })),
                    "a zero-set oracle first",
                )?;
            }
            Mode::Mathe => need(self.schedule.is_some() && self.step.is_some() && self.mathe.is_some(), "schedule, step and mathe")?,
            Mode::Lowrank => need(self.schedule.is_some() && self.step.is_some() && self.lowrank.is_some(), "schedule, step and lowrank")?,
            Mode::Fourier => need(self.schedule.is_some() && self.depth.is_some() && self.fourier.is_some(), "schedule, depth and fourier")?,
            Mode::Dimension => need(
                self.preset == Some(Preset::Cantor) || (self.input.is_some() && self.schedule.is_some()),
                "the cantor preset, or input and schedule",
            )?,
            Mode::Verify => {
                need(self.input.is_some() && self.verify.is_some(), "input and verify")?;
                need(!self.oracles.is_empty(), "an oracle")?;
            }
        }
        if let Some(e) = &self.eps {
            need(self.depth.is_none_or(|d| e.len() >= d), "one eps value per generation")?;
        }
        Ok(())
    }
}

/// An oracle with what the checks need from its description.
#[derive(Clone)]
pub struct BuiltOracle {
    pub oracle: Arc<dyn CoverOracle>,
    pub curve: Option<CurveSpec>,
    pub sumset_base: Option<Arc<dyn CoverOracle>>,
    pub codim: Option<usize>,
}

fn tag_or(tag: &Option<String>, default: &str) -> String {
    tag.clone().unwrap_or_else(|| default.to_string())
}

fn load_curve(src: &CurveSource, base: &Path) -> anyhow::Result<CurveSpec> {
    Ok(match src {
        CurveSource::File { file } => {
            let path = base.join(file);
            CurveSpec::from_text(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?
        }
        CurveSource::Samples { ts, values } => CurveSpec::new(ts.clone(), values.clone())?,
        CurveSource::Sine { amplitude, frequency, samples } => {
            let (a, w) = (*amplitude, *frequency);
            CurveSpec::sampled(move |t| vec![a * (w * t).sin()], *samples)?
        }
    })
}

pub fn build_oracle(spec: &OracleSpec, base: &Path) -> anyhow::Result<BuiltOracle> {
    let plain = |oracle: Arc<dyn CoverOracle>| BuiltOracle { oracle, curve: None, sumset_base: None, codim: None };
    Ok(match spec {
        OracleSpec::Points { d, points, tag } => plain(Arc::new(point_cover(*d, points.clone(), &tag_or(tag, "points"))?)),
        OracleSpec::Explicit { n, d, s, files, tag } => {
            let mut lists = Vec::new();
            for f in files {
                let path = base.join(f);
                lists.push(GridSet::from_text(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?);
            }
            plain(Arc::new(explicit_cover(*n, *d, *s, &tag_or(tag, "explicit"), lists)?))
        }
        OracleSpec::Affine { n, d, rows, offsets, lipschitz, tag } => {
            // Frobenius norm bounds the operator norm.
            let frob = rows.iter().flatten().map(|a| a * a).sum::<f64>().sqrt();
            let map = ZeroMap::Affine { rows: rows.clone(), offsets: offsets.clone() };
            let codim = map.codim();
            let mut b = plain(Arc::new(zero_set_cover(map, Some(lipschitz.unwrap_or(frob)), *n, *d, &tag_or(tag, "affine"))?));
            b.codim = Some(codim);
            b
        }
        OracleSpec::Polynomial { n, d, maps, lipschitz, tag } => {
            let polys: Vec<Polynomial> = maps.iter().map(PolySpec::build).collect::<Result<_, _>>()?;
            let bound = polys.iter().map(|p| p.l1_gradient_bound().powi(2)).sum::<f64>().sqrt();
            let map = ZeroMap::Polynomial(polys);
            let codim = map.codim();
            let mut b = plain(Arc::new(zero_set_cover(map, Some(lipschitz.unwrap_or(bound)), *n, *d, &tag_or(tag, "polynomial"))?));
            b.codim = Some(codim);
            b
        }
        OracleSpec::Isosceles { curve, tag } => {
            let c = load_curve(curve, base)?;
            let mut b = plain(Arc::new(isosceles_oracle(c.clone(), &tag_or(tag, "isosceles"))?));
            b.curve = Some(c);
            b
        }
        OracleSpec::Sumset { base: inner, tag } => {
            let y = build_oracle(inner, base)?.oracle;
            let mut b = plain(Arc::new(sumset_cover(y.clone(), &tag_or(tag, "sumset"))?));
            b.sumset_base = Some(y);
            b
        }
        OracleSpec::Translate => plain(Arc::new(translate_config())),
    })
}

/// A validated config with its oracles built and inputs read.
pub struct Prepared {
    pub config: RunConfig,
    pub oracles: Vec<BuiltOracle>,
    pub schedule: Option<BranchingSchedule>,
    pub input: Option<GridSet>,
}

/// Everything a run computes before anything is written.
#[derive(Default)]
pub struct Outcome {
    pub schedule: Option<BranchingSchedule>,
    pub levels: Vec<GridSet>,
    pub sets: Vec<GridSet>,
    pub steps: Vec<StepLog>,
    pub interleave: Vec<usize>,
    pub checks: Vec<VerifyReport>,
    /// Exact statements that gate the exit status.
    pub invariants: Vec<Inequality>,
    /// Size hypotheses; they gate the exit status only under `enforce`.
    pub hypotheses: Vec<Inequality>,
    pub extra: serde_json::Value,
    pub csv: Vec<(String, String)>,
}

impl Outcome {
    pub fn passed(&self, policy: HypothesisPolicy) -> bool {
        self.checks.iter().all(VerifyReport::passed)
            && self.invariants.iter().all(|i| i.holds)
            && (policy == HypothesisPolicy::Report || self.hypotheses.iter().all(|i| i.holds))
    }

    fn from_state(state: ConstructionState) -> Self {
        let refines = state.refines();
        Outcome {
            schedule: Some(state.schedule),
            levels: state.levels,
            steps: state.steps,
            interleave: state.interleave,
            checks: state.certifications,
            invariants: vec![Inequality::exact("every cube's parent lies in the previous level", 0.0, 0.0, refines)],
            ..Outcome::default()
        }
    }
}

/// Classified failure of a run.
#[derive(Debug)]
pub enum RunFailure {
    /// Unreadable or inconsistent config; nothing was written.
    Parse(anyhow::Error),
    /// Integer, enumeration or hypothesis limit; nothing was written.
    Limit { kind: &'static str, error: anyhow::Error },
    Other(anyhow::Error),
}

impl RunFailure {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunFailure::Parse(_) => 2,
            RunFailure::Limit { .. } => 3,
            RunFailure::Other(_) => 1,
        }
    }

    pub fn diagnostic(&self) -> serde_json::Value {
        match self {
            RunFailure::Parse(e) => json!({"status": "parse_error", "message": format!("{e:#}")}),
            RunFailure::Limit { kind, error } => json!({"status": "limit", "kind": kind, "message": format!("{error:#}")}),
            RunFailure::Other(e) => json!({"status": "error", "message": format!("{e:#}")}),
        }
    }
}

fn limit_kind(e: &ConstructError) -> Option<&'static str> {
    match e {
        ConstructError::Budget { .. } | ConstructError::Grid(DyadicError::Budget { .. }) => Some("budget"),
        ConstructError::Sparsity { .. } | ConstructError::Hypothesis { .. } => Some("hypothesis"),
        ConstructError::Verify(VerifyError::Budget { .. }) | ConstructError::Config(ConfigError::ScanBudget { .. }) => Some("budget"),
        ConstructError::Verify(VerifyError::Grid(DyadicError::Budget { .. })) => Some("budget"),
        ConstructError::Dimension(DimensionError::Overflow { .. } | DimensionError::Grid(DyadicError::Budget { .. })) => Some("budget"),
        ConstructError::Avoid(a) | ConstructError::Fourier(FourierError::Avoid(a)) => avoid_limit(a),
        ConstructError::Fourier(FourierError::Hypothesis { .. } | FourierError::RetryExhausted { .. }) => Some("hypothesis"),
        ConstructError::Fourier(FourierError::TooLarge { .. } | FourierError::Grid(DyadicError::Budget { .. })) => Some("budget"),
        _ => None,
    }
}

fn avoid_limit(a: &AvoidError) -> Option<&'static str> {
    match a {
        AvoidError::Hypothesis { .. } | AvoidError::RetryExhausted { .. } | AvoidError::EmptyWindow { .. } | AvoidError::NoOffset { .. } => {
            Some("hypothesis")
        }
        AvoidError::Budget { .. } | AvoidError::Grid(DyadicError::Budget { .. }) | AvoidError::Config(ConfigError::ScanBudget { .. }) => {
            Some("budget")
        }
        _ => None,
    }
}

fn classify(e: ConstructError) -> RunFailure {
    match limit_kind(&e) {
        Some(kind) => RunFailure::Limit { kind, error: e.into() },
        None => RunFailure::Other(e.into()),
    }
}

/// Reads, presets, validates and builds; every failure here is a parse failure
/// except a schedule that overflows the integer budget.
pub fn prepare(mut config: RunConfig, base: &Path) -> Result<Prepared, RunFailure> {
    config.apply_preset();
    config.validate().map_err(RunFailure::Parse)?;
    let oracles = config.oracles.iter().map(|o| build_oracle(o, base)).collect::<anyhow::Result<Vec<_>>>().map_err(RunFailure::Parse)?;
    let schedule = match &config.schedule {
        Some(spec) => Some(make_schedule(spec).map_err(|e| match e {
            DyadicError::Budget { .. } => RunFailure::Limit { kind: "budget", error: e.into() },
            e => RunFailure::Parse(e.into()),
        })?),
        None => None,
    };
    let input = match &config.input {
        Some(p) => {
            let path = base.join(p);
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).map_err(RunFailure::Parse)?;
            Some(GridSet::from_text(&text).map_err(|e| RunFailure::Parse(e.into()))?)
        }
        None => None,
    };
    Ok(Prepared { config, oracles, schedule, input })
}

/// Runs the configured pipeline entirely in memory.
pub fn execute(p: &Prepared) -> Result<Outcome, ConstructError> {
    let cfg = &p.config;
    let budget = u128::from(cfg.budgets.verify);
    match cfg.mode {
        Mode::Main => run_main(p, budget),
        Mode::Keleti => {
            let sched = p.schedule.as_ref().expect("validated");
            let depth = cfg.depth.expect("validated");
            let state = iterate_keleti(sched, depth)?;
            let check = difference_check(state.current(), &state.processed, &state.schedule, budget)?;
            let mut law = Vec::new();
            for level in &state.levels {
                let k = level.generation();
                let expected = state.schedule.fine_denom(k)? / 10u64.pow(k as u32);
                law.push(Inequality::exact(&format!("#X_{k} = D_{k}/10^{k}"), level.len() as f64, expected as f64, level.len() as u64 == expected));
            }
            let mut out = Outcome::from_state(state);
            out.checks.push(check);
            out.invariants.extend(law);
            Ok(out)
        }
        Mode::Fp => {
            let sched = p.schedule.as_ref().expect("validated");
            let depth = cfg.depth.expect("validated");
            let sec = cfg.fp.clone().unwrap_or(FpSection { c_f: 1.0, queue_cap: QUEUE_CAP });
            let z = &p.oracles[0];
            let params = FpParams { c_f: sec.c_f, codim: z.codim.unwrap_or(1), policy: cfg.policy() };
            let state = iterate_fp(z.oracle.as_ref(), sched, depth, sec.queue_cap, &params)?;
            let check = processed_tuple_check(&state, z.oracle.as_ref(), budget)?;
            let extra = json!({
                "queue_cap": sec.queue_cap,
                "queue_offered": state.queue_offered.to_string(),
                "queue_dropped": state.queue_dropped.to_string(),
                "processed": state.fp_processed.len(),
            });
            let hyps: Vec<Inequality> =
                state.steps.iter().flat_map(|s| if let StepLog::Fp { checks, .. } = s { checks.clone() } else { Vec::new() }).collect();
            let mut out = Outcome::from_state(state);
            out.checks.push(check);
            out.hypotheses = hyps;
            out.extra = extra;
            Ok(out)
        }
        Mode::Mathe | Mode::Lowrank => run_single_step(p),
        Mode::Fourier => run_fourier(p, budget),
        Mode::Dimension => run_dimension(p),
        Mode::Verify => run_verify(p, budget),
    }
}

fn run_main(p: &Prepared, budget: u128) -> Result<Outcome, ConstructError> {
    let cfg = &p.config;
    let depth = cfg.depth.expect("validated");
    let oracles: Vec<Arc<dyn CoverOracle>> = p.oracles.iter().map(|b| b.oracle.clone()).collect();
    let first = &oracles[0];
    let (d, n) = (first.point_dim(), first.arity());
    let s = oracles.iter().map(|o| o.dim_bound()).fold(0.0, f64::max);
    let eps = cfg.eps.clone().unwrap_or_else(|| (1..=depth).map(|k| default_eps(d, n, s, k)).collect());
    let choice = match &p.schedule {
        Some(sched) => ScheduleChoice::Fixed(sched.clone()),
        None => ScheduleChoice::Search,
    };
    let policy = cfg.policy();
    let plan = build_strong_cover(&oracles, &eps, depth, choice, policy)?;
    let params = MainParams {
        seed: cfg.seed.expect("validated"),
        policy,
        retry_limit: cfg.budgets.retry_limit,
        exhaustive_limit: u128::from(cfg.budgets.exhaustive),
        verify_budget: budget,
    };
    let state = iterate_main(&plan, &oracles, &params, depth)?;
    let report = dimension_report(&state, plan.d, plan.n, plan.s)?;
    let mut hyps: Vec<Inequality> = plan.steps.iter().flat_map(|s| s.checks.clone()).collect();
    for step in &state.steps {
        if let StepLog::Avoid { report, .. } = step {
            hyps.extend(report.checks.iter().cloned());
        }
    }
    let mut extra_checks = Vec::new();
    let fin = state.current().clone();
    for b in &p.oracles {
        if let Some(y) = &b.sumset_base {
            let y_cover = y.cover(fin.generation(), fin.denom())?;
            extra_checks.push(sumset_check(&fin, &y_cover, budget)?);
        }
        if let Some(curve) = &b.curve {
            extra_checks.push(isosceles_check(&fin, curve, default_isosceles_gap(curve), budget)?);
        }
    }
    let mut out = Outcome::from_state(state);
    out.checks.extend(extra_checks);
    out.invariants.extend(report.checks.iter().cloned());
    out.hypotheses = hyps;
    out.extra = json!({ "eps": eps, "interleave": plan.interleave(), "dimension": report });
    Ok(out)
}

fn families(p: &Prepared) -> Result<Vec<GridSet>, ConstructError> {
    let sched = p.schedule.as_ref().expect("validated");
    let step = p.config.step.as_ref().expect("validated");
    let denom = sched.fine_denom(step.generation)?;
    step.families
        .iter()
        .map(|rows| {
            let d = rows.first().map_or(1, Vec::len);
            Ok(GridSet::from_rows(d, 1, step.generation, GridKind::Fine, denom, rows.iter().cloned())?)
        })
        .collect()
}

/// Splits step checks into the guarantee (last) and the size hypotheses.
fn split_checks(mut checks: Vec<Inequality>) -> (Vec<Inequality>, Vec<Inequality>) {
    let last = checks.pop().into_iter().collect();
    (last, checks)
}

fn run_single_step(p: &Prepared) -> Result<Outcome, ConstructError> {
    let cfg = &p.config;
    let sched = p.schedule.as_ref().expect("validated");
    let ts = families(p)?;
    let mut out = Outcome { schedule: Some(sched.clone()), ..Outcome::default() };
    if cfg.mode == Mode::Mathe {
        let sec = cfg.mathe.as_ref().expect("validated");
        let f = sec.polynomial.build()?;
        let params = MatheParams { c0: sec.c0, c_big: sec.c_big, eps: sec.eps, policy: cfg.policy() };
        let o = mathe_step(&ts, &f, &params, sched)?;
        (out.invariants, out.hypotheses) = split_checks(o.checks);
        out.extra = json!({"eps": o.eps, "shift": o.shift, "window": o.window, "min_margin": o.min_margin, "tuples": o.tuples});
        out.sets = o.sets;
    } else {
        let sec = cfg.lowrank.as_ref().expect("validated");
        let matrix: Vec<Vec<Ratio>> = sec.matrix.iter().map(|r| r.iter().map(|&(a, b)| Ratio::new(a, b)).collect()).collect();
        let k = ts.first().map_or(0, GridSet::generation);
        let denom = sched.fine_denom(k + 1)?;
        let rows = matrix.len();
        let b = match p.oracles.first() {
            Some(o) => o.oracle.cover(k + 1, denom)?,
            None => GridSet::empty(rows, 1, k + 1, GridKind::Fine, denom),
        };
        let o = lowrank_step(&ts, &matrix, &b, sec.s, sec.eps, sched, cfg.policy())?;
        (out.invariants, out.hypotheses) = split_checks(o.checks);
        out.extra = json!({"offset": o.offset, "a_m": o.a_m, "pivots": o.pivots, "offsets_examined": o.offsets_examined, "min_kept_fraction": o.min_kept_fraction});
        out.sets = o.sets;
    }
    Ok(out)
}

fn run_fourier(p: &Prepared, budget: u128) -> Result<Outcome, ConstructError> {
    let cfg = &p.config;
    let sched = p.schedule.as_ref().expect("validated");
    let depth = cfg.depth.expect("validated");
    let sec = cfg.fourier.as_ref().expect("validated");
    let oracle = p.oracles.first().map(|b| b.oracle.as_ref());
    let n = oracle.map_or(2, |o| o.arity());
    let params = FourierParams {
        s: sec.s,
        eps: sec.eps,
        n,
        retry_limit: cfg.budgets.retry_limit,
        seed: cfg.seed.expect("validated"),
        policy: cfg.policy(),
        exhaustion: sec.exhaustion,
    };
    let state = iterate_fourier(oracle, sched, depth, &params)?;
    let mut checks = Vec::new();
    if let Some(o) = oracle {
        for j in 1..=depth {
            let anc = thicken(state.current(), j, &state.schedule)?;
            let mut r = assert_avoids(&anc, Target::Oracle(o, state.schedule.fine_denom(j)?), n, budget)?;
            r.check = format!("avoids B_{j}");
            checks.push(r);
        }
    }
    let mut hyps = Vec::new();
    let mut accepted = Vec::new();
    for step in &state.steps {
        if let StepLog::Fourier { report } = step {
            hyps.extend(report.checks.iter().cloned());
            accepted.push(report.accepted);
        }
    }
    let alpha = sec.alpha.unwrap_or(0.25 - sec.eps);
    let mu = measure_of_set(state.current())?.mollified();
    let m_max = sec.m_max.unwrap_or(mu.denom.min(1024));
    let csv = decay_csv(&mu, alpha, m_max)?;
    let mut out = Outcome::from_state(state);
    out.checks.extend(checks);
    if sec.exhaustion == Exhaustion::Fail {
        out.invariants.push(Inequality::exact("every step accepted", 0.0, 0.0, accepted.iter().all(|&a| a)));
    }
    out.hypotheses = hyps;
    out.extra = json!({"accepted": accepted, "alpha": alpha});
    out.csv.push(("decay.csv".into(), csv));
    Ok(out)
}

fn run_dimension(p: &Prepared) -> Result<Outcome, ConstructError> {
    let cfg = &p.config;
    let (levels, sched) = match &p.input {
        Some(e) => (vec![e.clone()], p.schedule.clone().expect("validated")),
        None => cantor_levels(cfg.depth.expect("preset sets depth"))?,
    };
    let fin = levels.last().expect("nonempty").clone();
    let window = cfg.window.unwrap_or(3).min(fin.generation().max(1));
    let est = minkowski_estimate(&fin, window, &sched)?;
    let frostman = if levels.len() > 1 {
        let tree = canonical_weights(&levels, &sched)?;
        frostman_exponent(&tree, 1..=fin.generation()).ok()
    } else {
        None
    };
    let csv = est.to_csv();
    Ok(Outcome {
        schedule: Some(sched),
        levels,
        extra: json!({"lower": est.lower, "upper": est.upper, "window": est.window, "fitted_slope": est.fitted_slope(), "frostman": frostman}),
        csv: vec![("dimension.csv".into(), csv)],
        ..Outcome::default()
    })
}

fn run_verify(p: &Prepared, budget: u128) -> Result<Outcome, ConstructError> {
    let cfg = &p.config;
    let x = p.input.clone().expect("validated");
    let sec = cfg.verify.as_ref().expect("validated");
    let b = &p.oracles[0];
    let report = match sec.check {
        VerifyKind::Avoids => assert_avoids(&x, Target::Oracle(b.oracle.as_ref(), x.denom()), b.oracle.arity(), budget)?,
        VerifyKind::Sumset => {
            let y = b.sumset_base.clone().unwrap_or_else(|| b.oracle.clone());
            if y.arity() != 1 {
                return Err(ConstructError::Invalid("sumset check needs the set Y as an arity-1 oracle".into()));
            }
            sumset_check(&x, &y.cover(x.generation(), x.denom())?, budget)?
        }
        VerifyKind::Isosceles => {
            let curve = b.curve.as_ref().ok_or_else(|| ConstructError::Invalid("isosceles check needs an isosceles oracle".into()))?;
            isosceles_check(&x, curve, sec.tau.unwrap_or_else(|| default_isosceles_gap(curve)), budget)?
        }
    };
    Ok(Outcome { checks: vec![report], ..Outcome::default() })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub role: String,
    pub index: usize,
    pub path: String,
    pub sha256: String,
}

/// The audit record of one run.
#[derive(Clone, Debug, Serialize)]
pub struct History<'a> {
    pub format: u32,
    pub config: &'a RunConfig,
    /// Directory against which relative input paths were resolved.
    pub inputs_dir: String,
    pub schedule: &'a Option<BranchingSchedule>,
    pub interleave: &'a [usize],
    pub steps: &'a [StepLog],
    pub files: Vec<FileRecord>,
    pub checks: &'a [VerifyReport],
    pub invariants: &'a [Inequality],
    pub hypotheses: &'a [Inequality],
    pub passed: bool,
}

/// The parts of a history replay needs; everything else is informational.
#[derive(Clone, Debug, Deserialize)]
pub struct HistoryHead {
    pub format: u32,
    pub config: RunConfig,
    pub inputs_dir: String,
    pub schedule: Option<BranchingSchedule>,
    pub files: Vec<FileRecord>,
    pub passed: bool,
}

fn artifact_files(out: &Outcome) -> Vec<(FileRecord, String)> {
    let mut files = Vec::new();
    for (i, level) in out.levels.iter().enumerate() {
        let text = level.to_text();
        let path = format!("levels/X_{}.grid", level.generation());
        files.push((FileRecord { role: "level".into(), index: i, path, sha256: sha256_hex(text.as_bytes()) }, text));
    }
    for (i, set) in out.sets.iter().enumerate() {
        let text = set.to_text();
        let path = format!("sets/S_{}.grid", i + 1);
        files.push((FileRecord { role: "set".into(), index: i, path, sha256: sha256_hex(text.as_bytes()) }, text));
    }
    files
}

/// Writes grid sets, the weight dump, CSVs, `report.json` and `history.json`.
pub fn write_artifacts(out: &Outcome, config: &RunConfig, inputs_dir: &Path, dir: &Path) -> anyhow::Result<bool> {
    let passed = out.passed(config.policy());
    fs::create_dir_all(dir.join("levels"))?;
    if !out.sets.is_empty() {
        fs::create_dir_all(dir.join("sets"))?;
    }
    let files = artifact_files(out);
    for (rec, text) in &files {
        fs::write(dir.join(&rec.path), text)?;
    }
    if let Some(sched) = &out.schedule {
        if out.levels.len() > 1 {
            if let Ok(tree) = canonical_weights(&out.levels, sched) {
                fs::write(dir.join("weights.txt"), tree.dump())?;
            }
            let window = out.levels.len().saturating_sub(1).min(config.window.unwrap_or(3)).max(1);
            if !out.csv.iter().any(|(n, _)| n == "dimension.csv") {
                if let Ok(est) = minkowski_of_levels(&out.levels, window, sched) {
                    fs::write(dir.join("dimension.csv"), est.to_csv())?;
                }
            }
        }
    }
    for (name, text) in &out.csv {
        fs::write(dir.join(name), text)?;
    }
    let report = json!({
        "mode": config.mode,
        "passed": passed,
        "checks": out.checks,
        "invariants": out.invariants,
        "hypotheses": out.hypotheses,
        "extra": out.extra,
    });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let history = History {
        format: 1,
        config,
        inputs_dir: inputs_dir.display().to_string(),
        schedule: &out.schedule,
        interleave: &out.interleave,
        steps: &out.steps,
        files: files.into_iter().map(|f| f.0).collect(),
        checks: &out.checks,
        invariants: &out.invariants,
        hypotheses: &out.hypotheses,
        passed,
    };
    fs::write(dir.join("history.json"), serde_json::to_string_pretty(&history)? + "\n")?;
    Ok(passed)
}

/// Overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub depth: Option<usize>,
    pub output: Option<PathBuf>,
    pub policy: Option<HypothesisPolicy>,
}

/// Whole `run` subcommand; returns whether every check passed.
pub fn run(config_path: &Path, overrides: &Overrides) -> Result<bool, RunFailure> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))
        .map_err(RunFailure::Parse)?;
    let mut config = RunConfig::parse(&text).map_err(RunFailure::Parse)?;
    if overrides.seed.is_some() {
        config.seed = overrides.seed;
    }
    if overrides.depth.is_some() {
        config.depth = overrides.depth;
    }
    if overrides.output.is_some() {
        config.output = overrides.output.clone();
    }
    if overrides.policy.is_some() {
        config.policy = overrides.policy;
    }
    let base = match config_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let base = fs::canonicalize(&base).unwrap_or(base);
    let prepared = prepare(config, &base)?;
    let out = execute(&prepared).map_err(classify)?;
    let dir = prepared.config.output.clone().unwrap_or_else(|| PathBuf::from("out"));
    write_artifacts(&out, &prepared.config, &base, &dir).map_err(RunFailure::Other)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplayReport {
    pub files_checked: usize,
    /// Files whose bytes no longer match the recorded hash.
    pub tampered: Vec<String>,
    /// Files the re-run derives differently from the record.
    pub diverged: Vec<String>,
    pub stored_levels_refine: bool,
    pub checks: Vec<VerifyReport>,
    pub passed: bool,
}

/// Re-derives every recorded file from the stored config and seed, compares
/// hashes, and re-runs the verifiers.
pub fn replay(history_path: &Path) -> anyhow::Result<ReplayReport> {
    let dir = history_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let head: HistoryHead = serde_json::from_str(&fs::read_to_string(history_path)?).context("corrupted history")?;
    if head.format != 1 {
        anyhow::bail!("unknown history format {}", head.format);
    }
    let mut tampered = Vec::new();
    let mut stored = Vec::new();
    for rec in &head.files {
        let bytes = fs::read(dir.join(&rec.path)).with_context(|| format!("reading {}", rec.path))?;
        if sha256_hex(&bytes) != rec.sha256 {
            tampered.push(rec.path.clone());
        }
        if rec.role == "level" {
            stored.push(GridSet::from_text(std::str::from_utf8(&bytes)?).with_context(|| format!("parsing {}", rec.path))?);
        }
    }
    let stored_levels_refine = match &head.schedule {
        Some(sched) if stored.len() > 1 => {
            let state = ConstructionState { levels: stored, ..ConstructionState::new(sched.clone()) };
            state.refines()
        }
        _ => true,
    };
    let recorded = PathBuf::from(&head.inputs_dir);
    let base = if recorded.is_dir() { recorded } else { dir.clone() };
    let prepared = prepare(head.config.clone(), &base).map_err(|f| anyhow::anyhow!("{}", f.diagnostic()))?;
    let out = execute(&prepared)?;
    let fresh = artifact_files(&out);
    let mut diverged = Vec::new();
    for rec in &head.files {
        if !fresh.iter().any(|(f, _)| f.path == rec.path && f.sha256 == rec.sha256) {
            diverged.push(rec.path.clone());
        }
    }
    if fresh.len() != head.files.len() {
        diverged.push(format!("{} files recorded, {} derived", head.files.len(), fresh.len()));
    }
    let passed = tampered.is_empty()
        && diverged.is_empty()
        && stored_levels_refine
        && out.passed(prepared.config.policy()) == head.passed;
    Ok(ReplayReport { files_checked: head.files.len(), tampered, diverged, stored_levels_refine, checks: out.checks, passed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CsvKind {
    /// `k,count,ratio` of the recorded levels.
    Dimension,
    /// `m,re,im,abs,m^alpha*abs` of the mollified measure on the final level.
    Decay,
}

pub fn export_csv(history_path: &Path, kind: CsvKind, window: usize, alpha: f64, m_max: u64) -> anyhow::Result<String> {
    let dir = history_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let head: HistoryHead = serde_json::from_str(&fs::read_to_string(history_path)?).context("corrupted history")?;
    let mut levels = Vec::new();
    for rec in head.files.iter().filter(|r| r.role == "level") {
        levels.push(GridSet::from_text(&fs::read_to_string(dir.join(&rec.path))?)?);
    }
    let fin = levels.last().context("history records no levels")?;
    Ok(match kind {
        CsvKind::Dimension => {
            let sched = head.schedule.context("history records no schedule")?;
            let usable = levels.iter().filter(|l| l.generation() > 0).count();
            minkowski_of_levels(&levels, window.min(usable).max(1), &sched)?.to_csv()
        }
        CsvKind::Decay => decay_csv(&measure_of_set(fin)?.mollified(), alpha, m_max)?,
    })
}

#[derive(Debug, Parser)]
#[command(name = "fractal-avoid", version, about = "Build and audit sets that avoid configurations")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Enforce,
    Report,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a run config and write its artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
    },
    /// Re-derive a recorded run and compare every file hash.
    Replay { history: PathBuf },
    /// Print a CSV computed from a recorded run.
    ExportCsv {
        history: PathBuf,
        #[arg(long, value_enum)]
        kind: CsvKind,
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = 0.25)]
        alpha: f64,
        #[arg(long, default_value_t = 256)]
        m_max: u64,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point shared by the binary.
pub fn main_with(cli: Cli) -> ExitCode {
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            eprintln!("{}", json!({"status": "error", "message": e.to_string()}));
            return ExitCode::from(1);
        }
    }
    match cli.command {
        Command::Run { config, seed, depth, output, policy } => {
            let policy = policy.map(|p| match p {
                PolicyArg::Enforce => HypothesisPolicy::Enforce,
                PolicyArg::Report => HypothesisPolicy::Report,
            });
            match run(&config, &Overrides { seed, depth, output, policy }) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => {
                    eprintln!("{}", json!({"status": "check_failed"}));
                    ExitCode::from(1)
                }
                Err(f) => {
                    eprintln!("{}", f.diagnostic());
                    ExitCode::from(f.exit_code())
                }
            }
        }
        Command::Replay { history } => match replay(&history) {
            Ok(r) => {
                // A closed pipe is not a replay failure.
                let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&r).unwrap_or_default());
                if r.passed {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("{}", json!({"status": "error", "message": format!("{e:#}")}));
                ExitCode::from(1)
            }
        },
        Command::ExportCsv { history, kind, window, alpha, m_max, out } => match export_csv(&history, kind, window, alpha, m_max) {
            Ok(csv) => {
                let written = match out {
                    Some(p) => fs::write(p, csv).map_err(anyhow::Error::from),
                    None => {
                        let _ = write!(std::io::stdout(), "{csv}");
                        Ok(())
                    }
                };
                match written {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => {
                        eprintln!("{}", json!({"status": "error", "message": e.to_string()}));
                        ExitCode::from(1)
                    }
                }
            }
            Err(e) => {
                eprintln!("{}", json!({"status": "error", "message": format!("{e:#}")}));
                ExitCode::from(1)
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::parse(r#"{"mode": "main", "sed": 3}"#).is_err());
    }

    #[test]
    fn randomized_modes_need_a_seed() {
        let mut cfg = RunConfig::parse(r#"{"mode": "main", "preset": "sumset"}"#).unwrap();
        cfg.apply_preset();
        assert!(cfg.validate().is_err());
        cfg.seed = Some(1);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn cantor_preset_ratios() {
        let cfg = RunConfig::parse(r#"{"mode": "dimension", "preset": "cantor"}"#).unwrap();
        let p = prepare(cfg, Path::new(".")).unwrap();
        let out = execute(&p).unwrap();
        let lower = out.extra["lower"].as_f64().unwrap();
        assert!((lower - 2f64.ln() / 3f64.ln()).abs() < 1e-9);
    }
}
