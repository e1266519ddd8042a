use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use qbsde_core::audit::audit_assumptions;
use qbsde_core::catalog::lookup_catalog;
use qbsde_core::girsanov::stochastic_exponential;
use qbsde_core::global::{localize, round_trip_error};
use qbsde_core::paths::{simulate_brownian, PathSegment};
use qbsde_core::planner::{eps_ok_contraction, eps_ok_decoupling, plan_partition, rho, PartitionPlan, Route};
use qbsde_core::problem::{Constants, ProblemSpec};
use qbsde_core::reflection::{complementarity_defect, domain_violation, skorokhod_1d, skorokhod_polyhedral, ReflectionSpec};
use qbsde_core::TimeGrid;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn plan_with(k: f64, c: f64, c_g: f64, n: u64) -> PartitionPlan {
    let delta = 1.0 / n as f64;
    PartitionPlan {
        route: Route::Lipschitz,
        horizon: 1.0,
        n_levels: n,
        delta,
        k,
        c,
        c_g,
        r_cap: f64::INFINITY,
        a: 2.0 * (c + 1.0) * delta + 4.0 * c_g * delta * delta,
        contraction: 0.0,
        decoupling: 0.0,
        contraction_ok: true,
        decoupling_ok: true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn brownian_paths_are_reproducible(seed in any::<u64>(), steps in 1usize..20) {
        let g = TimeGrid::uniform(1.0, steps).unwrap();
        let a = simulate_brownian(&g, 5, 2, seed).unwrap();
        let b = simulate_brownian(&g, 5, 2, seed).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn brownian_scaling_keeps_z_scores(seed in any::<u64>(), lambda in 0.01f64..100.0) {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let gs = g.rescale(lambda).unwrap();
        let a = simulate_brownian(&g, 3, 1, seed).unwrap();
        let b = simulate_brownian(&gs, 3, 1, seed).unwrap();
        for p in 0..3 {
            for i in 0..8 {
                let za = a.increment(p, i, 0) / g.dt(i).sqrt();
                let zb = b.increment(p, i, 0) / gs.dt(i).sqrt();
                prop_assert!((za - zb).abs() <= 1e-10 * (1.0 + za.abs()));
            }
        }
    }

    #[test]
    fn splice_is_associative(a in prop::collection::vec(-5.0f64..5.0, 1..5),
                             b in prop::collection::vec(-5.0f64..5.0, 1..5),
                             c in prop::collection::vec(-5.0f64..5.0, 1..5)) {
        let sa = PathSegment::new(1, 0, a.clone()).unwrap();
        let mut bv = vec![*a.last().unwrap()];
        bv.extend(&b);
        let sb = PathSegment::new(1, sa.end_idx(), bv).unwrap();
        let mut cv = vec![*b.last().unwrap()];
        cv.extend(&c);
        let sc = PathSegment::new(1, sb.end_idx(), cv).unwrap();
        let left = sa.splice(&sb).unwrap().splice(&sc).unwrap();
        let right = sa.splice(&sb.splice(&sc).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn level_recursion_matches_closed_form(k in 0.1f64..2.0, c in 0.0f64..2.0, c_g in 0.0f64..2.0, n in 1u64..1000) {
        let plan = plan_with(k, c, c_g, n);
        for (j, rec) in plan.levels().enumerate() {
            let closed = plan.level(j as u64);
            prop_assert!((rec - closed).abs() <= 1e-12 * rec.abs().max(1.0), "j = {}: {} vs {}", j, rec, closed);
        }
    }

    #[test]
    fn planned_partitions_respect_the_cap(k in 0.1f64..2.0, c in 0.1f64..2.0, c_g in 0.1f64..2.0) {
        if let Ok(plan) = plan_partition(k, c, c_g, 1.0, Route::Lipschitz, 1_000_000) {
            prop_assert!(plan.cap_certified());
            prop_assert!(plan.contraction_ok && plan.decoupling_ok);
        }
    }

    #[test]
    fn rho_dominates_k(x in 0.0f64..10.0, k in 0.0f64..10.0, c in 0.0f64..10.0) {
        prop_assert!(rho(x, k, c) >= k * (1.0 - 1e-15));
    }

    #[test]
    fn verdicts_change_sign_once(k in 0.1f64..5.0, c in 0.0f64..5.0, c_g in 0.01f64..5.0) {
        for ok in [eps_ok_contraction as fn(f64, f64, f64, f64) -> bool, eps_ok_decoupling] {
            let v: Vec<bool> = (1..=400).map(|j| ok(c, c_g, k, j as f64 * 1e-3)).collect();
            let flips = v.windows(2).filter(|w| w[0] != w[1]).count();
            prop_assert!(flips <= 1);
            prop_assert!(flips == 0 || v[0]);
        }
    }

    #[test]
    fn localizer_is_bounded_idempotent_and_nonexpansive(
        a in prop::collection::vec(-10.0f64..10.0, 4),
        b in prop::collection::vec(-10.0f64..10.0, 4),
        r in 0.01f64..5.0,
    ) {
        let la = localize(&a, r);
        let lb = localize(&b, r);
        prop_assert!(norm(&la) <= r * (1.0 + 1e-15));
        if norm(&a) <= r {
            prop_assert_eq!(&la, &a);
        }
        let twice = localize(&la, r);
        for (x, y) in twice.iter().zip(&la) {
            prop_assert!((x - y).abs() <= 1e-14 * (1.0 + y.abs()));
        }
        let d: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x - y).collect();
        let e: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        prop_assert!(norm(&d) <= norm(&e) * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn transform_round_trip(y in prop::collection::vec(-3.0f64..3.0, 2),
                            z in prop::collection::vec(-5.0f64..5.0, 4),
                            a in prop::collection::vec(prop_oneof![-2.0f64..-0.05, 0.05f64..2.0], 2)) {
        prop_assert!(round_trip_error(&y, &z, &a) <= 1e-12);
    }

    #[test]
    fn weights_are_positive(theta in prop::collection::vec(-3.0f64..3.0, 40), seed in any::<u64>()) {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let b = simulate_brownian(&g, 4, 1, seed).unwrap();
        let w = stochastic_exponential(&theta, &b).unwrap();
        prop_assert!(w.weights.iter().all(|v| *v > 0.0 && v.is_finite()));
    }

    #[test]
    fn one_sided_map_is_the_max_formula(steps in prop::collection::vec(-1.0f64..1.0, 1..200), start in 0.0f64..1.0) {
        let mut phi = vec![start];
        for s in &steps {
            phi.push(phi.last().unwrap() + s);
        }
        let out = skorokhod_1d(&phi, 0.0, None).unwrap();
        let mut run: f64 = 0.0;
        for (k, x) in phi.iter().enumerate() {
            run = run.max(-x);
            prop_assert!((out.values[k] - (x + run)).abs() <= 1e-12);
        }
    }

    #[test]
    fn wedge_paths_stay_inside_with_complementarity(steps in prop::collection::vec(-0.5f64..0.5, 2..120)) {
        let s = (1.0f64 + 0.09).sqrt();
        let t = (1.0f64 + 0.04).sqrt();
        let spec = ReflectionSpec::new(
            2,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            vec![vec![1.0 / s, 0.3 / s], vec![0.2 / t, 1.0 / t]],
        ).unwrap();
        let mut phi = vec![0.5, 0.5];
        for w in steps.chunks(2) {
            let (x, y) = (phi[phi.len() - 2], phi[phi.len() - 1]);
            phi.push(x + w[0]);
            phi.push(y + w.get(1).copied().unwrap_or(0.0));
        }
        let out = skorokhod_polyhedral(&phi, &spec).unwrap();
        prop_assert!(domain_violation(&spec, &out) <= 1e-12);
        prop_assert!(complementarity_defect(&spec, &out, 1e-12) <= 1e-12);
    }
}

#[test]
fn audit_maxima_grow_with_budget() {
    let spec = ProblemSpec::new(
        "scaled",
        1,
        1,
        1.0,
        Arc::new(|p, out| out[0] = 1.5 * p.current()[0].sin()),
        Constants::lipschitz(1.0, 4.0, 0.0),
    );
    let mut prev: Option<Vec<(f64, bool)>> = None;
    for budget in [100, 200, 400, 800] {
        let r = audit_assumptions(&spec, budget, 7).unwrap();
        let cur: Vec<(f64, bool)> = r.entries.iter().map(|e| (e.observed, e.pass)).collect();
        if let Some(p) = &prev {
            for ((o0, pass0), (o1, pass1)) in p.iter().zip(&cur) {
                assert!(o1 >= o0);
                assert!(pass0 >= pass1, "a failing entry turned into a pass");
            }
        }
        prev = Some(cur);
    }
    assert!(!audit_assumptions(&spec, 800, 7).unwrap().passed());
}

#[test]
fn catalog_passes_audit_at_full_budget() {
    for e in qbsde_core::catalog::catalog() {
        let s = lookup_catalog(e.name, &BTreeMap::new()).unwrap();
        let r = audit_assumptions(&s, 10_000, 11).unwrap();
        assert!(r.passed(), "{}", r.render());
    }
}
