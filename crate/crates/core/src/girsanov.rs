//! Measure changes and the FBSDE-via-BSDE construction.
//!
//! Integrands `theta` are stored path-major, `theta[(p * M + i) * n + k]`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::global::GlobalSolution;
use crate::grid::TimeGrid;
use crate::paths::{PathBundle, PathKind, PathView};
use crate::problem::{with_scratch, ProblemSpec};
use crate::reduce;
use crate::regression::{FeatureBasis, StepModel};

/// Drifts above this size are treated as unbounded.
pub const DRIFT_LIMIT: f64 = 1e8;

#[derive(Clone, Debug)]
pub struct GirsanovWeights {
    /// `E(-int theta^T dW)_T` per path.
    pub weights: Vec<f64>,
    /// Per-step log-density increments, path-major.
    pub log_increments: Vec<f64>,
    /// `max |theta|` over paths and steps.
    pub theta_bound: f64,
}

impl GirsanovWeights {
    /// Sample mean and its standard error.
    pub fn mean_and_se(&self) -> (f64, f64) {
        mean_se(&self.weights)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,weight\n");
        for (p, w) in self.weights.iter().enumerate() {
            s += &format!("{p},{w:.12e}\n");
        }
        s
    }
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = reduce::sum_by(v.len(), |i| v[i]) / n;
    let var = reduce::sum_by(v.len(), |i| (v[i] - mean).powi(2)) / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn check_theta(theta: &[f64], bundle: &PathBundle) -> Result<usize> {
    let (np, m, nb) = (bundle.n_paths(), bundle.grid().steps(), bundle.dim());
    if theta.len() != np * m * nb {
        return Err(Error::InvalidArgument(format!("integrand has {} values, expected {}", theta.len(), np * m * nb)));
    }
    if let Some(bad) = theta.iter().position(|v| !v.is_finite()) {
        let step = (bad / nb) % m;
        return Err(Error::InvalidArgument(format!("integrand is not finite on path {} at step {step}", bad / (m * nb))));
    }
    Ok(nb)
}

/// Discrete Doleans-Dade exponential `exp(-sum theta dW - 1/2 sum |theta|^2 dt)`.
pub fn stochastic_exponential(theta: &[f64], bundle: &PathBundle) -> Result<GirsanovWeights> {
    let nb = check_theta(theta, bundle)?;
    let grid = bundle.grid();
    let m = grid.steps();
    let mut log_increments = vec![0.0; bundle.n_paths() * m];
    reduce::fill_rows(&mut log_increments, m, |p, row| {
        for i in 0..m {
            let th = &theta[(p * m + i) * nb..(p * m + i + 1) * nb];
            let mut dot = 0.0;
            let mut sq = 0.0;
            for k in 0..nb {
                dot += th[k] * bundle.increment(p, i, k);
                sq += th[k] * th[k];
            }
            row[i] = -dot - 0.5 * sq * grid.dt(i);
        }
    });
    let weights: Vec<f64> = log_increments.chunks(m.max(1)).map(|r| r.iter().sum::<f64>().exp()).collect();
    let theta_bound = theta.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(GirsanovWeights { weights, log_increments, theta_bound })
}

/// `max_i sup_p Ê[int_{t_i}^T |theta|^2 ds | F_{t_i}]`, square-rooted, with conditional
/// expectations by regression on `state`. Grid times stand in for stopping times, so the
/// true BMO norm can only be larger.
pub fn bmo_norm_estimate(theta: &[f64], noise: &PathBundle, state: &PathBundle, basis: &FeatureBasis) -> Result<f64> {
    let nb = check_theta(theta, noise)?;
    if state.n_paths() != noise.n_paths() || state.grid() != noise.grid() {
        return Err(Error::InvalidArgument("state and noise bundles must share paths and grid".into()));
    }
    let grid = noise.grid();
    let (np, m) = (noise.n_paths(), grid.steps());
    // Remaining quadratic variation per path and node, node-major.
    let mut rem = vec![0.0; np * (m + 1)];
    let mut acc = vec![0.0; np];
    for i in (0..m).rev() {
        for p in 0..np {
            let th = &theta[(p * m + i) * nb..(p * m + i + 1) * nb];
            acc[p] += th.iter().map(|v| v * v).sum::<f64>() * grid.dt(i);
            rem[i * np + p] = acc[p];
        }
    }
    let mut best: f64 = 0.0;
    let mut fitted = vec![0.0; np];
    for i in 0..m {
        let model = Arc::new(StepModel::fit(basis, state, i)?);
        let design = model.design(state);
        design.project(&rem[i * np..(i + 1) * np], 1, &mut fitted);
        best = best.max(fitted.iter().fold(0.0f64, |a, v| a.max(*v)));
    }
    Ok(best.sqrt())
}

/// Candidate `(P, Q, R)` on a shared grid. `q` is `n_paths x (M+1) x d`, `r` is
/// `n_paths x M x (d n)`, both path-major.
#[derive(Clone, Debug)]
pub struct FbsdeCandidate {
    pub p: Arc<PathBundle>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub noise: Arc<PathBundle>,
    pub d: usize,
    pub n: usize,
    /// `max |g|` met along the forward Euler scheme.
    pub drift_bound: f64,
}

impl FbsdeCandidate {
    pub fn grid(&self) -> &TimeGrid {
        self.noise.grid()
    }

    pub fn q_at(&self, p: usize, i: usize) -> &[f64] {
        let nodes = self.grid().steps() + 1;
        &self.q[(p * nodes + i) * self.d..(p * nodes + i + 1) * self.d]
    }

    pub fn r_at(&self, p: usize, i: usize) -> &[f64] {
        let (m, w) = (self.grid().steps(), self.d * self.n);
        &self.r[(p * m + i) * w..(p * m + i + 1) * w]
    }

    /// The forward drift `g(t, P, Q, R)` along every path, path-major, for measure changes.
    pub fn drift_integrand(&self, spec: &ProblemSpec) -> Vec<f64> {
        let (np, m, n) = (self.noise.n_paths(), self.grid().steps(), self.n);
        let mut out = vec![0.0; np * m * n];
        if let Some(g) = &spec.g {
            reduce::fill_rows(&mut out, m * n, |p, row| {
                for i in 0..m {
                    g(self.grid().t(i), &self.p.view(p, i), self.q_at(p, i), self.r_at(p, i), &mut row[i * n..(i + 1) * n]);
                }
            });
        }
        out
    }
}

/// Freezes the fields of `sol` and runs `dP = g(t, P, y(t, P), z(t, P)) dt + dW` on the
/// Brownian `fresh` bundle; `Q = y(., P)`, `R = z(., P)` and `Q_T = xi(P)`.
pub fn fbsde_via_bsde(spec: &ProblemSpec, sol: &GlobalSolution, fresh: Arc<PathBundle>) -> Result<FbsdeCandidate> {
    spec.validate()?;
    if !spec.markovian {
        return Err(Error::Precondition(format!(
            "problem `{}` is path-dependent; frozen fields may only give a weak solution",
            spec.name
        )));
    }
    if spec.sigma.is_some() || fresh.dim() != spec.n || spec.m != spec.n {
        return Err(Error::Precondition("the forward equation needs identity volatility and an n-dimensional noise".into()));
    }
    let s = &sol.solution;
    if fresh.grid() != &s.grid || s.start != 0 {
        return Err(Error::InvalidArgument("fresh bundle must share the solution grid, solved from 0".into()));
    }
    let grid = s.grid.clone();
    let (d, n, m) = (spec.d, spec.n, grid.steps());
    let np = fresh.n_paths();
    let nodes = m + 1;
    let w = d * n;
    let mut pv = vec![0.0; np * nodes * n];
    let mut q = vec![0.0; np * nodes * d];
    let mut r = vec![0.0; np * m * w];
    let results: Vec<Result<f64>> = {
        use rayon::prelude::*;
        pv.par_chunks_mut(nodes * n)
            .zip(q.par_chunks_mut(nodes * d))
            .zip(r.par_chunks_mut(m * w))
            .enumerate()
            .map(|(p, ((path, qp), rp))| {
                path[..n].copy_from_slice(&spec.x0);
                let mut bound: f64 = 0.0;
                with_scratch(n, |gv| -> Result<()> {
                    for i in 0..m {
                        let view = PathView::new(&path[..(i + 1) * n], n, &grid);
                        sol.eval_y(i, &view, &mut qp[i * d..(i + 1) * d])?;
                        sol.eval_z(i, &view, &mut rp[i * w..(i + 1) * w])?;
                        match &spec.g {
                            Some(g) => g(grid.t(i), &view, &qp[i * d..(i + 1) * d], &rp[i * w..(i + 1) * w], gv),
                            None => gv.iter_mut().for_each(|v| *v = 0.0),
                        }
                        let gmax = gv.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                        if !(gmax <= DRIFT_LIMIT) {
                            return Err(Error::Precondition(format!(
                                "forward drift probe |g| = {gmax:e} on path {p} at step {i} exceeds {DRIFT_LIMIT:e}"
                            )));
                        }
                        bound = bound.max(gmax);
                        let dt = grid.dt(i);
                        for k in 0..n {
                            path[(i + 1) * n + k] = path[i * n + k] + gv[k] * dt + fresh.increment(p, i, k);
                        }
                    }
                    Ok(())
                })?;
                let view = PathView::new(path, n, &grid);
                spec.eval_terminal(&view, &mut qp[m * d..(m + 1) * d]);
                Ok(bound)
            })
            .collect()
    };
    let mut drift_bound: f64 = 0.0;
    for res in results {
        drift_bound = drift_bound.max(res?);
    }
    if let Some(bad) = q.iter().chain(&r).position(|v| !v.is_finite()) {
        return Err(Error::NumericBlowup { path: bad / (nodes * d), step: 0 });
    }
    let p = PathBundle::new(grid, n, np, pv, fresh.seed(), PathKind::ForwardState)?;
    Ok(FbsdeCandidate { p: Arc::new(p), q, r, noise: fresh, d, n, drift_bound })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    /// `||Q_T - xi(P)||_2`.
    pub terminal: f64,
    /// `max_i ||Q_i - Q_T - sum f dt + sum R dW||_2`.
    pub backward: f64,
    /// `max_i ||P_i - P_0 - sum g dt - (W_i - W_0)||_2`.
    pub forward: f64,
}

impl ResidualReport {
    pub fn render(&self) -> String {
        format!(
            "terminal residual = {:.6e}\nbackward residual = {:.6e}\nforward residual = {:.6e}\n",
            self.terminal, self.backward, self.forward
        )
    }
}

/// Residuals of the discrete FBSDE on the candidate's own noise.
pub fn fbsde_residual(c: &FbsdeCandidate, spec: &ProblemSpec) -> Result<ResidualReport> {
    let (d, n) = (c.d, c.n);
    if spec.d != d || spec.n != n || c.p.dim() != spec.m {
        return Err(Error::InvalidArgument("candidate and problem differ in dimensions".into()));
    }
    let grid = c.grid().clone();
    let m = grid.steps();
    let np = c.noise.n_paths();
    let w = d * n;
    // Per node: backward squared error, forward squared error; then the terminal one.
    let sums = reduce::sum_vec_by(np, 2 * (m + 1) + 1, |p, acc| {
        let mut fv = vec![0.0; d];
        let mut gv = vec![0.0; n];
        let mut xi = vec![0.0; d];
        spec.eval_terminal(&c.p.view(p, m), &mut xi);
        let qt = c.q_at(p, m);
        acc[2 * (m + 1)] += xi.iter().zip(qt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        // Backward: running sum of f dt - R dW from the horizon.
        let mut run = vec![0.0; d];
        for i in (0..m).rev() {
            let view = c.p.view(p, i);
            let (qi, ri) = (c.q_at(p, i), c.r_at(p, i));
            match &spec.f {
                Some(f) => f(grid.t(i), &view, qi, ri, &mut fv),
                None => fv.iter_mut().for_each(|v| *v = 0.0),
            }
            let dt = grid.dt(i);
            for k in 0..d {
                let mut s = fv[k] * dt;
                for j in 0..n {
                    s -= ri[k * n + j] * c.noise.increment(p, i, j);
                }
                run[k] += s;
            }
            acc[i] += (0..d).map(|k| (qi[k] - qt[k] - run[k]).powi(2)).sum::<f64>();
        }
        // Forward: P_i - P_0 - sum g dt - (W_i - W_0).
        let mut drift = vec![0.0; n];
        for i in 0..m {
            let view = c.p.view(p, i);
            match &spec.g {
                Some(g) => g(grid.t(i), &view, c.q_at(p, i), c.r_at(p, i), &mut gv),
                None => gv.iter_mut().for_each(|v| *v = 0.0),
            }
            for k in 0..n {
                drift[k] += gv[k] * grid.dt(i);
            }
            let (pi, p0) = (c.p.value(p, i + 1), c.p.value(p, 0));
            let (wi, w0) = (c.noise.value(p, i + 1), c.noise.value(p, 0));
            acc[m + 1 + i + 1] += (0..n).map(|k| (pi[k] - p0[k] - drift[k] - (wi[k] - w0[k])).powi(2)).sum::<f64>();
        }
        let _ = w;
    });
    let npf = np as f64;
    let backward = (0..=m).map(|i| (sums[i] / npf).sqrt()).fold(0.0, f64::max);
    let forward = (0..=m).map(|i| (sums[m + 1 + i] / npf).sqrt()).fold(0.0, f64::max);
    let terminal = (sums[2 * (m + 1)] / npf).sqrt();
    Ok(ResidualReport { terminal, backward, forward })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::SolverConfig;
    use crate::catalog::lookup_catalog;
    use crate::global::{plan_for, solve_global_lipschitz_g};
    use crate::paths::simulate_brownian;
    use crate::planner::{Route, DEFAULT_CAP};
    use std::collections::BTreeMap;

    fn bm(steps: usize, paths: usize, seed: u64) -> Arc<PathBundle> {
        Arc::new(simulate_brownian(&TimeGrid::uniform(1.0, steps).unwrap(), paths, 1, seed).unwrap())
    }

    #[test]
    fn zero_integrand_gives_unit_weights() {
        let b = bm(10, 100, 1);
        let w = stochastic_exponential(&vec![0.0; 1000], &b).unwrap();
        assert!(w.weights.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn constant_integrand_is_lognormal() {
        let b = bm(10, 100_000, 2);
        let c = 0.7;
        let w = stochastic_exponential(&vec![c; 1_000_000], &b).unwrap();
        for p in 0..100 {
            let exact = (-c * b.value(p, 10)[0] - 0.5 * c * c).exp();
            assert!((w.weights[p] - exact).abs() < 1e-12 * exact);
        }
        let (mean, se) = w.mean_and_se();
        assert!((mean - 1.0).abs() < 3.0 * se, "{mean} {se}");
        // One-step Girsanov identity: E[dW weight] = -c dt.
        let dw: Vec<f64> = (0..100_000).map(|p| b.increment(p, 0, 0) * w.weights[p]).collect();
        let (m0, se0) = mean_se(&dw);
        assert!((m0 + c * 0.1).abs() < 3.0 * se0, "{m0} {se0}");
    }

    #[test]
    fn non_finite_integrand_is_rejected() {
        let b = bm(2, 2, 0);
        assert!(stochastic_exponential(&[0.0, f64::NAN, 0.0, 0.0], &b).is_err());
    }

    #[test]
    fn bmo_of_constant() {
        let b = bm(20, 500, 3);
        let c = 1.5;
        let v = bmo_norm_estimate(&vec![c; 500 * 20], &b, &b, &FeatureBasis::binned(8, 0)).unwrap();
        assert!((v - c).abs() < 1e-12, "{v}");
        assert_eq!(bmo_norm_estimate(&vec![0.0; 500 * 20], &b, &b, &FeatureBasis::binned(8, 0)).unwrap(), 0.0);
    }

    fn affine_candidate(paths: usize) -> (ProblemSpec, FbsdeCandidate) {
        let c = 0.3;
        let spec = lookup_catalog("linear-drift", &[("c".to_string(), c)].into_iter().collect()).unwrap();
        let b = bm(20, paths, 4);
        let plan = plan_for(&spec, Route::Lipschitz, DEFAULT_CAP).unwrap();
        let sol = solve_global_lipschitz_g(&spec, b, &plan, &SolverConfig::with_basis(FeatureBasis::polynomial(1))).unwrap();
        let cand = fbsde_via_bsde(&spec, &sol, bm(20, paths, 99)).unwrap();
        (spec, cand)
    }

    #[test]
    fn affine_round_trip() {
        let (spec, cand) = affine_candidate(20_000);
        // P = c t + W, Q = P + c (T - t), R = 1.
        for p in 0..50 {
            for i in 0..20 {
                let t = 0.05 * i as f64;
                let pi = cand.p.value(p, i)[0];
                assert!((pi - 0.3 * t - cand.noise.value(p, i)[0]).abs() < 1e-12);
                assert!((cand.q_at(p, i)[0] - pi - 0.3 * (1.0 - t)).abs() < 0.05);
                assert!((cand.r_at(p, i)[0] - 1.0).abs() < 0.15, "{p} {i} {}", cand.r_at(p, i)[0]);
            }
        }
        let r = fbsde_residual(&cand, &spec).unwrap();
        assert_eq!(r.terminal, 0.0);
        assert!(r.forward < 1e-12, "{}", r.render());
        assert!(r.backward < 0.05, "{}", r.render());
        let mut bad = cand.clone();
        bad.q.iter_mut().for_each(|v| *v += 0.1);
        let r = fbsde_residual(&bad, &spec).unwrap();
        assert!((r.terminal - 0.1).abs() < 1e-9);
    }

    #[test]
    fn zero_problem_has_zero_residuals() {
        let spec = lookup_catalog("zero", &BTreeMap::new()).unwrap();
        let b = bm(10, 1000, 1);
        let plan = plan_for(&spec, Route::Lipschitz, DEFAULT_CAP).unwrap();
        let sol = solve_global_lipschitz_g(&spec, b, &plan, &SolverConfig::default()).unwrap();
        let cand = fbsde_via_bsde(&spec, &sol, bm(10, 1000, 2)).unwrap();
        let r = fbsde_residual(&cand, &spec).unwrap();
        assert_eq!((r.terminal, r.backward, r.forward), (0.0, 0.0, 0.0));
    }

    #[test]
    fn path_dependent_problem_is_refused() {
        let spec = lookup_catalog("running-max", &BTreeMap::new()).unwrap();
        let b = bm(10, 1000, 1);
        let plan = plan_for(&spec, Route::Lipschitz, DEFAULT_CAP).unwrap();
        let sol = solve_global_lipschitz_g(&spec, b, &plan, &SolverConfig::default()).unwrap();
        assert!(matches!(fbsde_via_bsde(&spec, &sol, bm(10, 1000, 2)), Err(Error::Precondition(_))));
    }
}
