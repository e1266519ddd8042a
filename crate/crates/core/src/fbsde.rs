//! Fully coupled FBSDE on a short interval `[u, T]`.
//!
//! The outer loop iterates the map `(P, Q, R) -> (X, Y, Z)`: `X` is the Euler solution
//! with the coefficients frozen at the previous triple, and `(Y, Z)` solve the BSDE with
//! driver `f` along `X`. Contraction is tracked in squared triple norms
//! `|dX|^2_{S^2} + |dY|^2_{S^2} + |dZ|^2_{H^2}`.

use std::sync::Arc;

use crate::bsde::{Backward, DiscreteSolution, DriverAt, SolverConfig};
use crate::error::{Error, Result};
use crate::paths::{PathBundle, PathKind, PathPrefix};
use crate::planner;
use crate::problem::ProblemSpec;
use crate::reduce;
use crate::regression::StepModel;

/// History of the forward state before `u`.
#[derive(Clone, Debug)]
pub enum Prefix {
    /// One deterministic path shared by all samples.
    Shared(PathPrefix),
    /// Nodes `0..=u` of each path of a bundle on the full grid.
    PerPath(Arc<PathBundle>),
}

/// A discrete triple on `[u, T]`: `x` is the full spliced path, `y` and `z` are node-major
/// from node `u` (`(i - u) * n_paths + p`).
#[derive(Clone, Debug)]
pub struct Triple {
    pub u: usize,
    pub x: Arc<PathBundle>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LocalFbsdeSolution {
    pub u: usize,
    pub triple: Triple,
    pub solution: DiscreteSolution,
    /// Squared triple gap between successive iterates.
    pub contraction_log: Vec<f64>,
    pub iterations: usize,
    /// `k(u, .)` averaged over paths (the decoupling value for a shared prefix).
    pub k_u: Vec<f64>,
}

impl LocalFbsdeSolution {
    /// Successive ratios of the squared gaps.
    pub fn ratios(&self) -> Vec<f64> {
        self.contraction_log.windows(2).map(|w| w[1] / w[0]).collect()
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from("iteration,triple_gap_sq,ratio\n");
        for (k, g) in self.contraction_log.iter().enumerate() {
            let r = if k == 0 { String::new() } else { format!("{:.10e}", g / self.contraction_log[k - 1]) };
            s += &format!("{},{:.10e},{}\n", k + 1, g, r);
        }
        s
    }
}

fn check(spec: &ProblemSpec, u: usize, noise: &PathBundle) -> Result<()> {
    spec.validate()?;
    let grid = noise.grid();
    if noise.dim() != spec.n {
        return Err(Error::InvalidArgument(format!("noise has dimension {}, problem needs {}", noise.dim(), spec.n)));
    }
    if u >= grid.steps() {
        return Err(Error::InvalidArgument(format!("u index {u} leaves no interval")));
    }
    if (grid.horizon() - spec.horizon).abs() > 1e-12 {
        return Err(Error::InvalidArgument("noise grid must end at the problem horizon".into()));
    }
    if spec.diag_a.is_some() || !spec.constants.c_g.is_finite() {
        return Err(Error::Precondition(format!("problem `{}` needs a Lipschitz g for the local FBSDE", spec.name)));
    }
    if spec.g.is_some() && spec.m != spec.n {
        return Err(Error::Precondition("g must map into the forward state space with m = n".into()));
    }
    Ok(())
}

fn prefix_row(prefix: &Prefix, p: usize, u: usize, m: usize, row: &mut [f64]) -> Result<()> {
    match prefix {
        Prefix::Shared(pre) => {
            if pre.end_idx != u || pre.dim != m {
                return Err(Error::Splice(format!("prefix ends at node {} (dim {}), need node {u} (dim {m})", pre.end_idx, pre.dim)));
            }
            row[..(u + 1) * m].copy_from_slice(&pre.values);
        }
        Prefix::PerPath(b) => {
            if b.dim() != m {
                return Err(Error::Splice(format!("prefix bundle has dimension {}, need {m}", b.dim())));
            }
            row[..(u + 1) * m].copy_from_slice(&b.path(p)[..(u + 1) * m]);
        }
    }
    Ok(())
}

/// Starting triple: the prefix held at `x_u`, `Y = 0`, `Z = 0`.
pub fn initial_triple(spec: &ProblemSpec, u: usize, prefix: &Prefix, noise: &PathBundle) -> Result<Triple> {
    check(spec, u, noise)?;
    let (m, n_paths) = (spec.m, noise.n_paths());
    if let Prefix::PerPath(b) = prefix {
        if b.n_paths() != n_paths {
            return Err(Error::Splice("prefix bundle and noise have different path counts".into()));
        }
    }
    let nodes = noise.grid().steps() + 1;
    let stride = nodes * m;
    let mut values = vec![0.0; n_paths * stride];
    reduce::try_fill_rows(&mut values, stride, |p, row| {
        prefix_row(prefix, p, u, m, row)?;
        for i in u + 1..nodes {
            row.copy_within(u * m..(u + 1) * m, i * m);
        }
        Ok::<(), Error>(())
    })?;
    let x = Arc::new(PathBundle::new(noise.grid().clone(), m, n_paths, values, noise.seed(), PathKind::ForwardState)?);
    let span = nodes - u;
    Ok(Triple { u, x, y: vec![0.0; span * n_paths * spec.d], z: vec![0.0; span * n_paths * spec.d * spec.n] })
}

/// One application of the contraction map.
pub fn picard_map(
    prev: &Triple,
    spec: &ProblemSpec,
    prefix: &Prefix,
    noise: &Arc<PathBundle>,
    config: &SolverConfig,
) -> Result<(Triple, DiscreteSolution)> {
    let u = prev.u;
    check(spec, u, noise)?;
    let (m, n, d, n_paths) = (spec.m, spec.n, spec.d, noise.n_paths());
    let grid = noise.grid().clone();
    let nodes = grid.steps() + 1;
    let stride = nodes * m;
    let w = d * n;
    let px = &prev.x;
    let mut values = vec![0.0; n_paths * stride];
    reduce::try_fill_rows(&mut values, stride, |p, row| {
        prefix_row(prefix, p, u, m, row)?;
        let mut drift = vec![0.0; m];
        let mut vol = vec![0.0; m * n];
        for i in u..nodes - 1 {
            let view = px.view(p, i);
            let t = grid.t(i);
            match &spec.g {
                Some(g) => {
                    let o = (i - u) * n_paths + p;
                    g(t, &view, &prev.y[o * d..(o + 1) * d], &prev.z[o * w..(o + 1) * w], &mut drift);
                }
                None => drift.fill(0.0),
            }
            match &spec.sigma {
                Some(s) => s(t, &view, &mut vol),
                None => {
                    vol.fill(0.0);
                    for k in 0..m.min(n) {
                        vol[k * n + k] = 1.0;
                    }
                }
            }
            let dt = grid.dt(i);
            for r in 0..m {
                let mut inc = drift[r] * dt;
                for c in 0..n {
                    inc += vol[r * n + c] * noise.increment(p, i, c);
                }
                row[(i + 1) * m + r] = row[i * m + r] + inc;
            }
            if row[(i + 1) * m..(i + 2) * m].iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericBlowup { path: p, step: i + 1 });
            }
        }
        Ok(())
    })?;
    let x = Arc::new(PathBundle::new(grid.clone(), m, n_paths, values, noise.seed(), PathKind::ForwardState)?);
    let end = grid.steps();
    let mut term = vec![0.0; n_paths * d];
    reduce::fill_rows(&mut term, d, |p, out| spec.eval_terminal(&x.view(p, end), out));
    let inner = SolverConfig { tol: config.tol * 1e-2, ..config.clone() };
    let mut bw = Backward::new(Arc::clone(&x), Arc::clone(noise), d, inner)?;
    bw.set_terminal(end, &term)?;
    let drv = |i: usize, p: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        if let Some(f) = &spec.f {
            f(grid.t(i), &x.view(p, i), y, z, out)
        }
    };
    let driver: Option<&DriverAt> = if spec.f.is_some() { Some(&drv) } else { None };
    bw.solve_interval(u, driver)?;
    let sol = bw.finish();
    let span = nodes - u;
    let y = sol.raw_y()[u * n_paths * d..].to_vec();
    let z = sol.raw_z()[u * n_paths * w..].to_vec();
    debug_assert_eq!(y.len(), span * n_paths * d);
    Ok((Triple { u, x, y, z }, sol))
}

/// Squared triple gap `|dX|^2_{S^2} + |dY|^2_{S^2} + |dZ|^2_{H^2}` on `[u, T]`.
pub fn triple_gap_sq(a: &Triple, b: &Triple, d: usize, n: usize) -> f64 {
    let grid = a.x.grid();
    let (u, nodes, n_paths, m) = (a.u, grid.steps() + 1, a.x.n_paths(), a.x.dim());
    let w = d * n;
    let total = reduce::sum_by(n_paths, |p| {
        let (pa, pb) = (a.x.path(p), b.x.path(p));
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        let mut hz = 0.0;
        for i in u..nodes {
            let dx: f64 = (0..m).map(|k| (pa[i * m + k] - pb[i * m + k]).powi(2)).sum();
            sx = sx.max(dx);
            let o = (i - u) * n_paths + p;
            let dy: f64 = (0..d).map(|k| (a.y[o * d + k] - b.y[o * d + k]).powi(2)).sum();
            sy = sy.max(dy);
            if i + 1 < nodes {
                let dz: f64 = (0..w).map(|k| (a.z[o * w + k] - b.z[o * w + k]).powi(2)).sum();
                hz += dz * grid.dt(i);
            }
        }
        sx + sy + hz
    });
    total / n_paths as f64
}

/// `C~ = C_g (6 e^{2(C+1)eps}(K + C eps) + 1)(eps + 1) eps` for the spec's constants.
pub fn contraction_constant(spec: &ProblemSpec, eps: f64) -> f64 {
    let c = &spec.constants;
    planner::contraction_lhs(c.c, c.c_g, c.k, eps)
}

/// Iterates the map until the triple gap (not squared) is at most `config.tol`.
pub fn solve_local_fbsde(
    spec: &ProblemSpec,
    u: usize,
    prefix: &Prefix,
    noise: &Arc<PathBundle>,
    config: &SolverConfig,
) -> Result<LocalFbsdeSolution> {
    let mut cur = initial_triple(spec, u, prefix, noise)?;
    let mut log = Vec::new();
    let mut rising = 0;
    let mut last: Option<DiscreteSolution> = None;
    for iter in 1..=config.max_iter {
        let (next, sol) = picard_map(&cur, spec, prefix, noise, config).map_err(|e| match e {
            Error::Divergence { ratio, .. } => Error::Divergence { iteration: iter, ratio },
            other => other,
        })?;
        let gap = triple_gap_sq(&next, &cur, spec.d, spec.n);
        if let Some(prev) = log.last() {
            let ratio = gap / prev;
            rising = if ratio >= 1.0 && gap > 0.0 { rising + 1 } else { 0 };
            if rising >= 3 {
                return Err(Error::ContractionFailure { measured: ratio });
            }
        }
        log.push(gap);
        cur = next;
        last = Some(sol);
        // With g = 0 the map ignores (P, Q, R) after the first application.
        if gap.sqrt() <= config.tol || (spec.g.is_none() && spec.sigma.is_none() && iter >= 2) {
            break;
        }
        if iter == config.max_iter {
            return Err(Error::NoConvergence { tol: config.tol, max_iter: config.max_iter, gap: gap.sqrt() });
        }
    }
    let solution = last.expect("at least one iteration");
    let k_u = solution.y_mean(u);
    Ok(LocalFbsdeSolution { u, iterations: log.len(), triple: cur, solution, contraction_log: log, k_u })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecouplingProbe {
    /// Largest `|k(u,x) - k(u,x')|^2 / sup|x - x'|^2` seen.
    pub lipschitz_sq: f64,
    /// `rho_FB(T - u)`.
    pub bound: f64,
    pub pairs: usize,
}

/// Empirical squared Lipschitz constant of `x -> k(u, x)` over prefix pairs. Both prefixes of
/// a pair are solved with the same noise, so Monte Carlo error largely cancels in the difference.
pub fn decoupling_lipschitz_probe(
    spec: &ProblemSpec,
    u: usize,
    noise: &Arc<PathBundle>,
    n_prefix_pairs: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<DecouplingProbe> {
    let grid = noise.grid();
    let m = spec.m;
    let c = &spec.constants;
    let bound = planner::rho_fb(spec.horizon - grid.t(u), c.k, c.c, c.c_g);
    let mut worst = 0.0f64;
    let sub = crate::grid::TimeGrid::from_points(grid.points()[..=u].to_vec());
    for j in 0..n_prefix_pairs {
        let (a, b) = prefix_pair(spec, u, &sub, seed, j)?;
        let ka = solve_local_fbsde(spec, u, &Prefix::Shared(a.clone()), noise, config)?.k_u;
        let kb = solve_local_fbsde(spec, u, &Prefix::Shared(b.clone()), noise, config)?.k_u;
        let num: f64 = ka.iter().zip(&kb).map(|(x, y)| (x - y).powi(2)).sum();
        let den = crate::paths::sup_distance(&a.values, &b.values, m).powi(2);
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    Ok(DecouplingProbe { lipschitz_sq: worst, bound, pairs: n_prefix_pairs })
}

fn prefix_pair(
    spec: &ProblemSpec,
    u: usize,
    sub: &Result<crate::grid::TimeGrid>,
    seed: u64,
    j: usize,
) -> Result<(PathPrefix, PathPrefix)> {
    let m = spec.m;
    let mut rng = crate::rng::NormalStream::new(crate::rng::derive_seed(seed, 0xdec0), j as u64, 0);
    let make = |rng: &mut crate::rng::NormalStream| -> Vec<f64> {
        let mut v = vec![0.0; (u + 1) * m];
        v[..m].copy_from_slice(&spec.x0);
        if let Ok(g) = sub {
            for i in 0..u {
                let sq = g.dt(i).sqrt();
                for k in 0..m {
                    v[(i + 1) * m + k] = v[i * m + k] + sq * rng.next();
                }
            }
        }
        v
    };
    let a = make(&mut rng);
    let b = if j % 2 == 0 {
        make(&mut rng)
    } else {
        // Same history, moved endpoint.
        let mut b = a.clone();
        for k in 0..m {
            b[u * m + k] += 0.5 * rng.next();
        }
        b
    };
    Ok((PathPrefix::new(m, a)?, PathPrefix::new(m, b)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptednessReport {
    /// Per node in `(u, T)`: variance of `(Y, Z)` explained by forward-state features over
    /// the variance explained by Brownian features (1 when both explain nothing).
    pub ratios: Vec<f64>,
    pub min_ratio: f64,
}

/// Compares regressions of `(Y, Z)` on features of `X` and of `W` at every interior node.
pub fn adaptedness_diagnostic(sol: &LocalFbsdeSolution, noise: &PathBundle) -> Result<AdaptednessReport> {
    let s = &sol.solution;
    let (d, w, n) = (s.d, s.d * s.n, s.n_paths);
    let mut ratios = Vec::new();
    for i in sol.u + 1..s.end {
        let mut target = vec![0.0; n * (d + w)];
        for p in 0..n {
            target[p * (d + w)..p * (d + w) + d].copy_from_slice(s.y(p, i));
            target[p * (d + w) + d..(p + 1) * (d + w)].copy_from_slice(s.z(p, i));
        }
        let ess = |bundle: &PathBundle| -> Result<f64> {
            let model = Arc::new(StepModel::fit(&s.basis, bundle, i)?);
            let mut fitted = vec![0.0; target.len()];
            model.design(bundle).project(&target, d + w, &mut fitted);
            let width = d + w;
            let mean: Vec<f64> = (0..width).map(|k| (0..n).map(|p| fitted[p * width + k]).sum::<f64>() / n as f64).collect();
            Ok(reduce::sum_by(n, |p| (0..width).map(|k| (fitted[p * width + k] - mean[k]).powi(2)).sum::<f64>()))
        };
        let ex = ess(&sol.triple.x)?;
        let ew = ess(noise)?;
        let scale = ex.max(ew);
        ratios.push(if scale <= 1e-300 * n as f64 { 1.0 } else { ex / ew.max(1e-300) });
    }
    let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(AdaptednessReport { ratios, min_ratio: if min_ratio.is_finite() { min_ratio } else { 1.0 } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::lookup_catalog;
    use crate::grid::TimeGrid;
    use crate::paths::simulate_brownian;
    use crate::regression::FeatureBasis;
    use std::collections::BTreeMap;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn zero_problem_is_one_solve() {
        let spec = lookup_catalog("zero", &params(&[("horizon", 0.2)])).unwrap();
        let grid = TimeGrid::uniform(0.2, 8).unwrap();
        let noise = Arc::new(simulate_brownian(&grid, 1000, 1, 1).unwrap());
        let sol = solve_local_fbsde(&spec, 0, &Prefix::Shared(PathPrefix::constant(&[0.0], 0)), &noise, &SolverConfig::default())
            .unwrap();
        assert!(sol.triple.y.iter().all(|v| *v == 0.0));
        for p in 0..10 {
            assert_eq!(sol.triple.x.path(p), noise.path(p));
        }
    }

    #[test]
    fn linear_drift_fixed_point() {
        let c = 0.3;
        let spec = lookup_catalog("linear-drift", &params(&[("c", c), ("horizon", 0.25)])).unwrap();
        let grid = TimeGrid::uniform(0.25, 10).unwrap();
        let noise = Arc::new(simulate_brownian(&grid, 4000, 1, 2).unwrap());
        let cfg = SolverConfig { basis: FeatureBasis::polynomial(1), ..SolverConfig::default() };
        let sol = solve_local_fbsde(&spec, 0, &Prefix::Shared(PathPrefix::constant(&[0.0], 0)), &noise, &cfg).unwrap();
        for p in (0..4000).step_by(500) {
            for i in 0..=10 {
                let x = sol.triple.x.value(p, i)[0];
                assert!((x - (c * grid.t(i) + noise.value(p, i)[0])).abs() < 1e-12);
                let y = sol.solution.y(p, i)[0];
                assert!((y - (x + c * (0.25 - grid.t(i)))).abs() < 1e-2, "{y} vs {x}");
            }
        }
    }

    #[test]
    fn affine_entry_contracts() {
        let spec = lookup_catalog("coupled-affine", &params(&[("horizon", 0.1)])).unwrap();
        let grid = TimeGrid::uniform(0.1, 10).unwrap();
        let noise = Arc::new(simulate_brownian(&grid, 4000, 1, 3).unwrap());
        let cfg = SolverConfig { basis: FeatureBasis::polynomial(1), tol: 1e-6, max_iter: 20 };
        let sol = solve_local_fbsde(&spec, 0, &Prefix::Shared(PathPrefix::constant(&[0.0], 0)), &noise, &cfg).unwrap();
        let ct = contraction_constant(&spec, 0.1);
        assert!(ct < 0.5);
        for r in sol.ratios().iter().skip(1) {
            assert!(*r <= ct * 1.1, "{r} vs {ct}");
        }
        assert!(sol.iterations <= 5, "{}", sol.iterations);
        let alpha = 1.0 / (1.0 - 0.5 * 0.1);
        let y0 = sol.k_u[0];
        let exact = 0.2 * (alpha - 1.0) / 0.5;
        assert!((y0 - exact).abs() < 5e-3, "{y0} vs {exact}");
        let rep = adaptedness_diagnostic(&sol, &noise).unwrap();
        assert!(rep.min_ratio >= 0.99, "{:?}", rep.ratios);
        // Fixed-point residual.
        let (again, _) = picard_map(&sol.triple, &spec, &Prefix::Shared(PathPrefix::constant(&[0.0], 0)), &noise, &cfg).unwrap();
        assert!(triple_gap_sq(&again, &sol.triple, 1, 1).sqrt() <= 2e-6);
    }

    #[test]
    fn decoupling_probe_on_affine_entry() {
        let spec = lookup_catalog("coupled-affine", &params(&[])).unwrap();
        let grid = TimeGrid::uniform(1.0, 40).unwrap();
        let noise = Arc::new(simulate_brownian(&grid, 2000, 1, 4).unwrap());
        let cfg = SolverConfig { basis: FeatureBasis::polynomial(1), tol: 1e-7, max_iter: 30 };
        let probe = decoupling_lipschitz_probe(&spec, 36, &noise, 4, 9, &cfg).unwrap();
        let alpha = 1.0 / (1.0 - 0.5 * 0.1);
        assert!((probe.lipschitz_sq - alpha * alpha).abs() < 0.02, "{}", probe.lipschitz_sq);
        assert!(probe.lipschitz_sq <= probe.bound);
    }
}
