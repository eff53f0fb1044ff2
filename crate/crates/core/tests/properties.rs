//! Invariants checked on random inputs.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::Arc;

use num::complex::Complex64;
use num::{BigRational, Zero};
use proptest::prelude::*;

use fractal_avoid::avoidance::{avoid_step, collision_set, kept_per_parent, random_select, AvoidParams, BadSet, HypothesisPolicy};
use fractal_avoid::configs::{explicit_cover, point_cover, sumset_cover, zero_set_cover, CoverOracle, ZeroMap};
use fractal_avoid::construct::{build_strong_cover, iterate_keleti, iterate_main, MainParams, ScheduleChoice};
use fractal_avoid::dimension::{covering_number, hyperdyadic_demo};
use fractal_avoid::dyadic::{
    cell_children, children, intermediary_cells, make_schedule, nondiagonal_filter, parent_of, thicken, BranchingSchedule, CubeIndex,
    GridKind, GridSet, ScheduleSpec,
};
use fractal_avoid::fourier::{cell_transform, fourier_coeff, DiscreteMeasure};
use fractal_avoid::measure::{canonical_weights, frostman_exponent};
use fractal_avoid::verify::{assert_avoids, Target};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sched_1d() -> BranchingSchedule {
    BranchingSchedule::new(1, vec![8, 4, 16], vec![2, 2, 4]).unwrap()
}

fn subset(denom: u64, max: usize) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::btree_set(0..denom, 1..max).prop_map(|s| s.into_iter().collect())
}

fn set_at(sched: &BranchingSchedule, k: usize, coords: &[u64]) -> GridSet {
    GridSet::from_rows(1, 1, k, GridKind::Fine, sched.fine_denom(k).unwrap(), coords.iter().map(|&c| vec![c])).unwrap()
}

proptest! {
    #[test]
    fn parent_inverts_children(c in 0u64..32, gen in 0usize..2) {
        let s = BranchingSchedule::new(2, vec![4, 8, 2], vec![2, 4, 1]).unwrap();
        let denom = s.fine_denom(gen).unwrap();
        let q = CubeIndex::fine(gen, vec![c % denom, (c * 7) % denom]);
        let kids = children(&q, &s).unwrap();
        let n = s.branching(gen + 1).unwrap() as usize;
        prop_assert_eq!(kids.len(), n * n);
        for i in 0..kids.len() {
            prop_assert_eq!(parent_of(&kids.cube(i), &s).unwrap(), q.clone());
        }
        let cells = intermediary_cells(&q, &s).unwrap();
        let m = s.intermediary(gen + 1).unwrap() as usize;
        prop_assert_eq!(cells.len(), m * m);
        for i in 0..cells.len() {
            prop_assert_eq!(cell_children(&cells.cube(i), &s).unwrap().len(), (n / m) * (n / m));
        }
    }

    #[test]
    fn nondiagonal_filter_is_a_projection(rows in prop::collection::vec((0u64..16, 0u64..16), 0..40)) {
        let b = GridSet::from_rows(1, 2, 1, GridKind::Fine, 16, rows.into_iter().map(|(a, b)| vec![a, b])).unwrap();
        let f = nondiagonal_filter(&b, 2, 1).unwrap();
        prop_assert!(f.is_subset(&b));
        prop_assert_eq!(nondiagonal_filter(&f, 2, 1).unwrap(), f);
    }

    #[test]
    fn thicken_is_monotone_and_idempotent(a in subset(512, 30), extra in subset(512, 30), k in 0usize..3) {
        let s = sched_1d();
        let e = set_at(&s, 3, &a);
        let f = e.union(&set_at(&s, 3, &extra)).unwrap();
        let te = thicken(&e, k, &s).unwrap();
        let tf = thicken(&f, k, &s).unwrap();
        prop_assert!(te.is_subset(&tf));
        prop_assert_eq!(thicken(&te, k, &s).unwrap(), te);
    }

    #[test]
    fn covering_number_is_monotone_and_subadditive(a in subset(512, 40), b in subset(512, 40), k in 0usize..4) {
        let s = sched_1d();
        let (ea, eb) = (set_at(&s, 3, &a), set_at(&s, 3, &b));
        let u = ea.union(&eb).unwrap();
        let (na, nb, nu) = (covering_number(&ea, k, &s).unwrap(), covering_number(&eb, k, &s).unwrap(), covering_number(&u, k, &s).unwrap());
        prop_assert!(nu <= na + nb);
        prop_assert!(na <= nu && nb <= nu);
    }

    #[test]
    fn parent_sums_are_exact(choice in prop::collection::vec(any::<u8>(), 64)) {
        let s = BranchingSchedule::constant(1, 4, 4, 3).unwrap();
        // Keep a nonempty pseudo-random subset of children under every cube.
        let mut levels = vec![GridSet::unit(1)];
        for k in 1..=3 {
            let mut rows = Vec::new();
            for (i, r) in levels[k - 1].iter().enumerate() {
                let mask = (choice[(i + 7 * k) % choice.len()] % 15) + 1;
                rows.extend((0..4u64).filter(|j| mask >> j & 1 == 1).map(|j| vec![r[0] * 4 + j]));
            }
            levels.push(set_at(&s, k, &rows.iter().map(|r| r[0]).collect::<Vec<_>>()));
        }
        let tree = canonical_weights(&levels, &s).unwrap();
        prop_assert!(tree.parent_sum_holds());
        for k in 0..=3 {
            let total: BigRational = tree.weights(k).unwrap().iter().cloned().fold(BigRational::zero(), |a, b| a + b);
            prop_assert_eq!(total, BigRational::from_integer(1.into()));
        }
    }

    #[test]
    fn removing_siblings_never_raises_the_exponent(drop in 1u64..4) {
        let s = BranchingSchedule::constant(1, 4, 4, 2).unwrap();
        let full: Vec<GridSet> = (0..=2).map(|k| GridSet::full(1, k, &s).unwrap()).collect();
        let mut thin = full.clone();
        // Generation 1 keeps only 4 - drop of its children; generation 2 follows.
        let keep: Vec<u64> = (0..4 - drop).collect();
        thin[1] = set_at(&s, 1, &keep);
        let rows: Vec<u64> = keep.iter().flat_map(|&c| (0..4).map(move |j| c * 4 + j)).collect();
        thin[2] = set_at(&s, 2, &rows);
        let a = frostman_exponent(&canonical_weights(&full, &s).unwrap(), 1..=2).unwrap().exponent;
        let b = frostman_exponent(&canonical_weights(&thin, &s).unwrap(), 1..=2).unwrap().exponent;
        prop_assert!(b <= a + 1e-12);
    }

    #[test]
    fn atomic_transforms_are_periodic(atoms in prop::collection::vec(0u64..64, 1..10), m in -200i64..200) {
        let w = 1.0 / atoms.len() as f64;
        let mu = DiscreteMeasure { generation: 1, denom: 64, atoms: atoms.iter().map(|&a| (a, w)).collect(), mollified: false };
        let d = (fourier_coeff(m, &mu) - fourier_coeff(m + 64, &mu)).norm();
        prop_assert!(d < 1e-9);
    }

    #[test]
    fn mollified_transform_matches_direct_integral(atoms in prop::collection::vec(0u64..64, 1..10), m in 1i64..500) {
        let w = 1.0 / atoms.len() as f64;
        let mu = DiscreteMeasure { generation: 1, denom: 64, atoms: atoms.iter().map(|&a| (a, w)).collect(), mollified: true };
        // Integral of 64 e^{-2 pi i m x} over [a/64, (a+1)/64], in closed form.
        let direct: Complex64 = atoms
            .iter()
            .map(|&a| {
                let e = |x: f64| Complex64::from_polar(1.0, -2.0 * PI * m as f64 * x);
                (e(a as f64 / 64.0) - e((a + 1) as f64 / 64.0)) * 64.0 * w / Complex64::new(0.0, 2.0 * PI * m as f64)
            })
            .sum();
        prop_assert!((fourier_coeff(m, &mu) - direct).norm() < 1e-12);
        let envelope = (64.0 / (PI * m as f64)).min(1.0);
        prop_assert!(cell_transform(m, 64).norm() <= envelope + 1e-12);
    }

    #[test]
    fn avoid_step_refines_and_avoids(seed in any::<u64>(), count in 1usize..64) {
        let s = BranchingSchedule::constant(1, 64, 8, 2).unwrap();
        let t = set_at(&s, 1, &(0..64).step_by(3).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = HashSet::new();
        while rows.len() < count {
            let (a, b) = (rand::Rng::gen_range(&mut rng, 0..4096u64), rand::Rng::gen_range(&mut rng, 0..4096u64));
            rows.insert(vec![a, b]);
        }
        let b = GridSet::from_rows(1, 2, 2, GridKind::Fine, 4096, rows).unwrap();
        let params = AvoidParams::new(1.0, 0.0, 1, 2, seed).unwrap().with_policy(HypothesisPolicy::Report);
        let (out, report) = avoid_step(&t, BadSet::Grid(&b), &params, &s).unwrap();
        prop_assert!(out.iter().all(|r| t.contains(&[r[0] / 64])));
        prop_assert!(kept_per_parent(&t, &out, &s).unwrap().iter().all(|&k| k >= 4));
        prop_assert!(report.min_kept() >= 4);
        prop_assert_eq!(assert_avoids(&out, Target::Grid(&b), 2, 1 << 22).unwrap().violation_count, 0);
    }

    #[test]
    fn point_and_sumset_covers_are_scale_coherent(y in 0.0f64..=1.0, k in 2u32..7) {
        let p: Arc<dyn CoverOracle> = Arc::new(point_cover(1, vec![vec![y]], "y").unwrap());
        let sum = sumset_cover(p.clone(), "sum").unwrap();
        for oracle in [p.as_ref(), &sum as &dyn CoverOracle] {
            let (coarse, fine) = (1u64 << k, 1u64 << (k + 1));
            let c = oracle.cover(k as usize, coarse).unwrap();
            let f = oracle.cover(k as usize + 1, fine).unwrap();
            for row in f.iter() {
                let parent: Vec<u64> = row.iter().map(|&x| x / 2).collect();
                // One-cube slack on every axis.
                let near = c.iter().any(|r| r.iter().zip(&parent).all(|(&a, &b)| a.abs_diff(b) <= 1));
                prop_assert!(near, "cube {:?} of the finer cover is not near the coarser one", row);
            }
        }
    }
}

#[test]
fn zero_set_sparsity() {
    let map = ZeroMap::Affine { rows: vec![vec![1.0, 1.0]], offsets: vec![-1.0] };
    let z = zero_set_cover(map, Some(2f64.sqrt()), 2, 1, "x+y=1").unwrap();
    // The cover of a curve grows like D up to a constant, so doubling D at most doubles it, with slack 2^0.25.
    for k in 8..=11 {
        let (a, b) = (z.count(1 << k).unwrap() as f64, z.count(1 << (k + 1)).unwrap() as f64);
        assert!(b / a <= 2f64.powf(1.25), "k={k}: {a} -> {b}");
    }
}

#[test]
fn empirical_collisions_match_the_joint_probability() {
    let s = BranchingSchedule::constant(1, 8, 2, 2).unwrap();
    let t = GridSet::full(1, 1, &s).unwrap();
    // Distinct-parent pairs only, so each lies in A^2 with probability (M/N)^2.
    let b = GridSet::from_rows(1, 2, 2, GridKind::Fine, 64, vec![vec![3, 42], vec![9, 17], vec![60, 1], vec![20, 33]]).unwrap();
    let trials = 4000u64;
    let mut total = 0usize;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_select(&t, &s, &mut rng).unwrap();
        total += collision_set(&a, BadSet::Grid(&b), 2).unwrap().len();
    }
    let mean = total as f64 / trials as f64;
    let expected = 4.0 / 16.0;
    let sigma = (4.0 * (1.0 / 16.0) * (15.0 / 16.0) / trials as f64).sqrt();
    assert!((mean - expected).abs() <= 4.0 * sigma, "{mean} vs {expected}");
}

#[test]
fn main_construction_transports_avoidance() {
    // Random explicit covers at every generation of a small tower.
    let s = BranchingSchedule::constant(1, 16, 4, 3).unwrap();
    let mut lists = Vec::new();
    for k in 1..=3 {
        let d = s.fine_denom(k).unwrap();
        let rows: Vec<Vec<u64>> = (0..d.min(64)).map(|i| vec![(i * 37) % d, (i * 91 + 5) % d]).collect();
        lists.push(GridSet::from_rows(1, 2, k, GridKind::Fine, d, rows).unwrap());
    }
    let oracle: Arc<dyn CoverOracle> = Arc::new(explicit_cover(2, 1, 1.0, "random", lists.clone()).unwrap());
    let plan = build_strong_cover(&[oracle.clone()], &[0.25; 3], 3, ScheduleChoice::Fixed(s.clone()), HypothesisPolicy::Report).unwrap();
    let state = iterate_main(&plan, &[oracle], &MainParams::new(3, HypothesisPolicy::Report), 3).unwrap();
    assert!(state.refines());
    for w in state.levels.windows(2) {
        let ratio = w[1].len() as f64 / w[0].len() as f64;
        assert!((2.0..=4.0).contains(&ratio), "count law ratio {ratio}");
    }
    for (j, b) in lists.iter().enumerate() {
        let anc = thicken(state.current(), j + 1, &s).unwrap();
        assert_eq!(assert_avoids(&anc, Target::Grid(b), 2, 1 << 22).unwrap().violation_count, 0);
    }
    assert!(state.certifications.iter().all(|c| c.passed()));
}

#[test]
fn keleti_refines() {
    let s = BranchingSchedule::new(1, vec![10, 20, 10], vec![10, 20, 10]).unwrap();
    assert!(iterate_keleti(&s, 3).unwrap().refines());
}

#[test]
fn subhyperdyadic_growth_decreases() {
    let s = make_schedule(&ScheduleSpec::Subhyperdyadic { d: 1, depth: 7, psi_scale: 1.5, m_fraction: None }).unwrap();
    let g = s.growth_diagnostics();
    assert!(g.windows(2).all(|w| w[1] < w[0]), "{g:?}");
}

#[test]
fn hyperdyadic_weights_and_scale_ratios() {
    let demo = hyperdyadic_demo(0.5, 8).unwrap();
    // Weights are 1/count on the kept cubes: w <= l^{1-c-eps} means the fine ratio is at least 1-c-eps.
    let eps = 0.01;
    assert!(demo.fine_ratios.iter().all(|r| r.ratio >= 0.5 - eps));
    // Yet at the intermediary scales the ratio drops below 1-c.
    assert!(demo.cell_ratios.iter().skip(4).all(|r| r.ratio < 0.5));
    assert!(demo.min_gap(6).unwrap() >= 0.05);
}

#[test]
fn budget_exhaustion_is_an_error() {
    let s = BranchingSchedule::constant(1, 16, 4, 1).unwrap();
    let x = GridSet::full(1, 1, &s).unwrap();
    let b = GridSet::empty(1, 2, 1, GridKind::Fine, 16);
    assert!(assert_avoids(&x, Target::Grid(&b), 2, 10).is_err());
}
