use std::collections::BTreeMap;
use std::sync::Arc;

use qbsde_core::bsde::{solve_lipschitz_bsde, SolverConfig};
use qbsde_core::catalog::lookup_catalog;
use qbsde_core::global::{plan_for, solve_diagonal_quadratic, solve_global_lipschitz_g, solve_global_superquadratic};
use qbsde_core::paths::simulate_brownian;
use qbsde_core::planner::{Route, DEFAULT_CAP};
use qbsde_core::{PathBundle, TimeGrid};

fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
    kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn bundle(steps: usize, paths: usize, seed: u64) -> Arc<PathBundle> {
    Arc::new(simulate_brownian(&TimeGrid::uniform(1.0, steps).unwrap(), paths, 1, seed).unwrap())
}

#[test]
fn terminal_values_are_exact() {
    let spec = lookup_catalog("lipschitz-mix", &BTreeMap::new()).unwrap();
    let b = bundle(10, 2000, 1);
    let sol = solve_lipschitz_bsde(&spec, 0, 10, Arc::clone(&b), &SolverConfig::default()).unwrap();
    let mut xi = [0.0];
    for p in 0..2000 {
        spec.eval_terminal(&b.view(p, 10), &mut xi);
        assert_eq!(sol.y(p, 10)[0], xi[0]);
    }
}

#[test]
fn zero_driver_gives_a_discrete_martingale() {
    let spec = lookup_catalog("sine-terminal", &BTreeMap::new()).unwrap();
    let b = bundle(20, 20_000, 2);
    let sol = solve_lipschitz_bsde(&spec, 0, 20, b, &SolverConfig::default()).unwrap();
    for i in 0..20 {
        let d: Vec<f64> = (0..20_000).map(|p| sol.y(p, i + 1)[0] - sol.y(p, i)[0]).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let se = (var / d.len() as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se + 1e-15, "step {i}: {mean} vs {se}");
    }
}

#[test]
fn levels_chain_through_their_fields() {
    let spec = lookup_catalog("lipschitz-mix", &BTreeMap::new()).unwrap();
    let b = bundle(12, 3000, 3);
    let plan = plan_for(&spec, Route::Lipschitz, DEFAULT_CAP).unwrap();
    let g = solve_global_lipschitz_g(&spec, Arc::clone(&b), &plan, &SolverConfig::default()).unwrap();
    let mut out = [0.0];
    for &node in &g.level_nodes[..g.level_nodes.len() - 1] {
        let field = g.solution.y_fields[node].as_ref().unwrap();
        for p in (0..3000).step_by(37) {
            field.eval(&b.view(p, node), &mut out);
            assert!((out[0] - g.solution.y(p, node)[0]).abs() < 1e-10, "node {node}");
        }
    }
}

#[test]
fn routes_agree_bitwise_when_g_vanishes() {
    for name in ["sine-terminal", "constant-driver", "running-max"] {
        let spec = lookup_catalog(name, &BTreeMap::new()).unwrap();
        let b = bundle(10, 2000, 4);
        let cfg = SolverConfig::default();
        let plan = plan_for(&spec, Route::Lipschitz, DEFAULT_CAP).unwrap();
        let a = solve_global_lipschitz_g(&spec, Arc::clone(&b), &plan, &cfg).unwrap();
        let s = solve_global_superquadratic(&spec, b, &cfg).unwrap();
        for i in 0..=10 {
            assert_eq!(a.solution.y_at(i), s.solution.y_at(i), "{name}");
        }
    }
}

#[test]
fn small_quadratic_coefficient_recovers_the_lipschitz_route() {
    let a = 1e-3;
    let lin = lookup_catalog("sine-terminal", &params(&[("amp", 1.0)])).unwrap();
    let quad = lookup_catalog("quad-1d", &params(&[("a", a), ("amp", 1.0)])).unwrap();
    let b = bundle(10, 20_000, 5);
    let cfg = SolverConfig::default();
    let plan = plan_for(&lin, Route::Lipschitz, DEFAULT_CAP).unwrap();
    let y_lin = solve_global_lipschitz_g(&lin, Arc::clone(&b), &plan, &cfg).unwrap().solution.y0()[0];
    let y_quad = solve_diagonal_quadratic(&quad, b, &cfg).unwrap().solution.y0()[0];
    // Y_quad - Y_lin = a Var(xi) + O(a^2) with Var(sin W_1) < 1.
    assert!((y_quad - y_lin).abs() <= a + 1e-4, "{y_quad} vs {y_lin}");
}
