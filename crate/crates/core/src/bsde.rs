//! Backward regression scheme with Picard iteration, and the stability and a priori
//! estimates for Lipschitz BSDEs.
//!
//! On `[t_s, t_e]`, one Picard sweep walks backwards and sets
//!
//! ```text
//! A_i = E_i[Y_{i+1}]
//! Z_i = E_i[(Y_{i+1} - A_i) dW_i^T] / dt_i
//! Y_i = A_i + dt_i E_i[F(t_i, Y_i^prev, Z_i)]
//! ```
//!
//! where `E_i` is regression on the state at `t_i` and `Y^prev` is the previous sweep.
//! Subtracting `A_i` before multiplying by `dW_i` leaves the expectation unchanged and
//! removes most of the variance.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::PathBundle;
use crate::planner::rho;
use crate::problem::{norm, ProblemSpec};
use crate::reduce;
use crate::regression::{Design, FeatureBasis, Field, StepModel};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 50;

/// Driver at node `i` on path `p`: `(i, p, y, z, out)`.
pub type DriverAt<'a> = dyn Fn(usize, usize, &[f64], &[f64], &mut [f64]) + Sync + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub basis: FeatureBasis,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { basis: FeatureBasis::binned(32, 0), tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

impl SolverConfig {
    pub fn with_basis(basis: FeatureBasis) -> Self {
        Self { basis, ..Self::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Picard sweeps, summed over intervals.
    pub iterations: usize,
    /// Gap after each sweep, in order, across intervals.
    pub gaps: Vec<f64>,
    pub last_gap: f64,
    /// Every interval reached the tolerance.
    pub converged: bool,
    /// `max_p |Z_{t_i}|` per node (NaN where undefined).
    pub max_abs_z: Vec<f64>,
    /// Mean squared residual of the last projection of `Y_{i+1}` per node.
    pub residual_y: Vec<f64>,
}

/// Pathwise `(Y, Z)` on a grid, with the regression fields behind them.
#[derive(Clone, Debug)]
pub struct DiscreteSolution {
    pub grid: TimeGrid,
    pub start: usize,
    pub end: usize,
    pub n_paths: usize,
    pub d: usize,
    /// Brownian dimension.
    pub n: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    /// Field for `Y` at each node in `start..end` (`None` elsewhere).
    pub y_fields: Vec<Option<Field>>,
    pub z_fields: Vec<Option<Field>>,
    /// Paths the fields read.
    pub state: Arc<PathBundle>,
    /// Brownian increments used for `Z`.
    pub noise: Arc<PathBundle>,
    pub basis: FeatureBasis,
    pub diagnostics: Diagnostics,
}

impl DiscreteSolution {
    pub fn y(&self, p: usize, i: usize) -> &[f64] {
        let o = (i * self.n_paths + p) * self.d;
        &self.y[o..o + self.d]
    }

    pub fn z(&self, p: usize, i: usize) -> &[f64] {
        let w = self.d * self.n;
        let o = (i * self.n_paths + p) * w;
        &self.z[o..o + w]
    }

    /// All `Y` at node `i`, path-major.
    pub fn y_at(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_paths * self.d..(i + 1) * self.n_paths * self.d]
    }

    pub fn z_at(&self, i: usize) -> &[f64] {
        let w = self.d * self.n;
        &self.z[i * self.n_paths * w..(i + 1) * self.n_paths * w]
    }

    pub fn y_mean(&self, i: usize) -> Vec<f64> {
        let d = self.d;
        let ys = self.y_at(i);
        let s = reduce::sum_vec_by(self.n_paths, d, |p, acc| {
            for k in 0..d {
                acc[k] += ys[p * d + k];
            }
        });
        s.into_iter().map(|v| v / self.n_paths as f64).collect()
    }

    pub fn y_std(&self, i: usize) -> Vec<f64> {
        let d = self.d;
        let mean = self.y_mean(i);
        let ys = self.y_at(i);
        let s = reduce::sum_vec_by(self.n_paths, d, |p, acc| {
            for k in 0..d {
                acc[k] += (ys[p * d + k] - mean[k]).powi(2);
            }
        });
        s.into_iter().map(|v| (v / self.n_paths as f64).sqrt()).collect()
    }

    pub fn z_abs_mean(&self, i: usize) -> f64 {
        reduce::sum_by(self.n_paths, |p| norm(self.z(p, i))) / self.n_paths as f64
    }

    pub fn z_abs_max(&self, i: usize) -> f64 {
        reduce::max_by(self.n_paths, |p| norm(self.z(p, i)))
    }

    /// Mean of `Y` at the first node.
    pub fn y0(&self) -> Vec<f64> {
        self.y_mean(self.start)
    }

    /// Applies `f` to every `(Y, Z)` pair in place (used by the exponential transform).
    pub fn map_pathwise(&mut self, f: impl Fn(usize, &mut [f64], &mut [f64]) + Sync) {
        let (d, w) = (self.d, self.d * self.n);
        let n = self.n_paths;
        for i in self.start..=self.end {
            let ys = &mut self.y[i * n * d..(i + 1) * n * d];
            let zs = &mut self.z[i * n * w..(i + 1) * n * w];
            for (yy, zz) in ys.chunks_mut(d).zip(zs.chunks_mut(w)) {
                f(i, yy, zz);
            }
        }
    }

    /// Adds `other` pathwise, and field-wise where both carry fields on the same models.
    pub fn add_solution(&mut self, other: &DiscreteSolution) -> Result<()> {
        if self.y.len() != other.y.len() || self.z.len() != other.z.len() {
            return Err(Error::InvalidArgument("solutions differ in shape".into()));
        }
        for (a, b) in self.y.iter_mut().zip(&other.y) {
            *a += b;
        }
        for (a, b) in self.z.iter_mut().zip(&other.z) {
            *a += b;
        }
        let add = |mine: &mut Vec<Option<Field>>, theirs: &[Option<Field>]| {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a = match (a.take(), b) {
                    (Some(x), Some(y)) if Arc::ptr_eq(x.model(), y.model()) => Some(x.axpy(1.0, y)),
                    _ => None,
                };
            }
        };
        add(&mut self.y_fields, &other.y_fields);
        add(&mut self.z_fields, &other.z_fields);
        self.start = self.start.max(other.start);
        Ok(())
    }

    /// Fraction of `(path, node)` samples in `[start, end)` with `|Z| > radius`.
    pub fn z_exceedance(&self, radius: f64) -> f64 {
        let nodes = self.end - self.start;
        if nodes == 0 {
            return 0.0;
        }
        let hits = reduce::sum_by(self.n_paths, |p| (self.start..self.end).filter(|&i| norm(self.z(p, i)) > radius).count() as f64);
        hits / (self.n_paths * nodes) as f64
    }

    /// CSV with columns `t, Y_k means, Y_k stddevs, |Z| mean, |Z| max, sqrt_rho_bound`.
    pub fn to_csv(&self, bound: impl Fn(f64) -> f64) -> String {
        let mut s = String::from("t");
        for k in 1..=self.d {
            s += &format!(",Y{k}_mean");
        }
        for k in 1..=self.d {
            s += &format!(",Y{k}_std");
        }
        s += ",Z_abs_mean,Z_abs_max,sqrt_rho_bound\n";
        for i in self.start..=self.end {
            let t = self.grid.t(i);
            s += &format!("{t:.10}");
            for v in self.y_mean(i) {
                s += &format!(",{v:.10e}");
            }
            for v in self.y_std(i) {
                s += &format!(",{v:.10e}");
            }
            if i < self.end {
                s += &format!(",{:.10e},{:.10e}", self.z_abs_mean(i), self.z_abs_max(i));
            } else {
                s += ",,";
            }
            s += &format!(",{:.10e}\n", bound(self.grid.horizon() - t));
        }
        s
    }

    /// Node-major `Y` values.
    pub fn raw_y(&self) -> &[f64] {
        &self.y
    }

    pub fn raw_z(&self) -> &[f64] {
        &self.z
    }
}

/// Incremental backward solver over one state/noise pair. Intervals are solved from the
/// horizon down; each one reads its terminal values from what is already stored.
pub struct Backward {
    state: Arc<PathBundle>,
    noise: Arc<PathBundle>,
    config: SolverConfig,
    d: usize,
    n_paths: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    y_fields: Vec<Option<Field>>,
    z_fields: Vec<Option<Field>>,
    models: Vec<Option<Arc<StepModel>>>,
    diag: Diagnostics,
    lowest: usize,
    end: usize,
}

/// Designs are cached across Picard sweeps below this many stored numbers.
const DESIGN_CACHE_LIMIT: usize = 40_000_000;

impl Backward {
    pub fn new(state: Arc<PathBundle>, noise: Arc<PathBundle>, d: usize, config: SolverConfig) -> Result<Self> {
        if state.n_paths() != noise.n_paths() || state.grid() != noise.grid() {
            return Err(Error::InvalidArgument("state and noise bundles must share paths and grid".into()));
        }
        if !(config.tol > 0.0) || config.max_iter == 0 {
            return Err(Error::InvalidArgument("tol must be positive and max_iter at least 1".into()));
        }
        let nodes = state.grid().steps() + 1;
        let n_paths = state.n_paths();
        let w = d * noise.dim();
        Ok(Self {
            y: vec![0.0; nodes * n_paths * d],
            z: vec![0.0; nodes * n_paths * w],
            y_fields: vec![None; nodes],
            z_fields: vec![None; nodes],
            models: vec![None; nodes],
            diag: Diagnostics {
                converged: true,
                max_abs_z: vec![f64::NAN; nodes],
                residual_y: vec![f64::NAN; nodes],
                ..Diagnostics::default()
            },
            lowest: nodes - 1,
            end: nodes - 1,
            state,
            noise,
            config,
            d,
            n_paths,
        })
    }

    fn zw(&self) -> usize {
        self.d * self.noise.dim()
    }

    /// Terminal values at node `end` (`n_paths x d`). Call once, before any interval.
    pub fn set_terminal(&mut self, end: usize, values: &[f64]) -> Result<()> {
        let (n, d) = (self.n_paths, self.d);
        if values.len() != n * d {
            return Err(Error::InvalidArgument(format!("terminal has {} values, expected {}", values.len(), n * d)));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericBlowup { path: p / d, step: end });
        }
        self.y[end * n * d..(end + 1) * n * d].copy_from_slice(values);
        self.end = end;
        self.lowest = end;
        Ok(())
    }

    pub fn y_at(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_paths * self.d..(i + 1) * self.n_paths * self.d]
    }

    /// Reuses the regression models behind `sol`'s fields (same state bundle), so that
    /// fields of the two solves can be added.
    pub fn share_models(&mut self, sol: &DiscreteSolution) -> Result<()> {
        if !Arc::ptr_eq(&self.state, &sol.state) {
            return Err(Error::InvalidArgument("models can only be shared over the same state bundle".into()));
        }
        for (slot, f) in self.models.iter_mut().zip(&sol.y_fields) {
            if let Some(f) = f {
                *slot = Some(Arc::clone(f.model()));
            }
        }
        Ok(())
    }

    fn model(&mut self, i: usize) -> Result<Arc<StepModel>> {
        if self.models[i].is_none() {
            self.models[i] = Some(Arc::new(StepModel::fit(&self.config.basis, &self.state, i)?));
        }
        Ok(Arc::clone(self.models[i].as_ref().unwrap()))
    }

    /// Solves on `[t_start, t_end]` where `t_end` is the lowest node solved so far.
    pub fn solve_interval(&mut self, start: usize, driver: Option<&DriverAt>) -> Result<()> {
        let end = self.lowest;
        if start >= end {
            return Err(Error::InvalidArgument(format!("interval [{start}, {end}] is empty")));
        }
        let (n, d, nb, w) = (self.n_paths, self.d, self.noise.dim(), self.zw());
        let grid = self.state.grid().clone();
        // Flat start: mean terminal value, zero Z.
        let term = self.y_at(end).to_vec();
        let mean: Vec<f64> = (0..d).map(|k| (0..n).map(|p| term[p * d + k]).sum::<f64>() / n as f64).collect();
        for i in start..end {
            for p in 0..n {
                self.y[(i * n + p) * d..(i * n + p + 1) * d].copy_from_slice(&mean);
            }
            self.z[i * n * w..(i + 1) * n * w].iter_mut().for_each(|v| *v = 0.0);
        }
        let mut models = Vec::with_capacity(end - start);
        for i in start..end {
            models.push(self.model(i)?);
        }
        let per_design: usize = models.iter().map(|m| m.n_coef().min(64) * n).sum();
        let mut cache: Vec<Option<Design>> = (start..end).map(|_| None).collect();
        let cache_designs = per_design < DESIGN_CACHE_LIMIT;

        let mut a = vec![0.0; n * d];
        let mut zt = vec![0.0; n * w];
        let mut zf = vec![0.0; n * w];
        let mut fv = vec![0.0; n * d];
        let mut fb = vec![0.0; n * d];
        let mut prev_gap = f64::NAN;
        let mut rising = 0;
        let mut converged = false;
        let mut iter = 0;
        while iter < self.config.max_iter {
            iter += 1;
            let mut gap_y = 0.0f64;
            let mut gap_z = 0.0;
            for i in (start..end).rev() {
                let slot = i - start;
                let fresh;
                let design = if cache_designs {
                    if cache[slot].is_none() {
                        cache[slot] = Some(models[slot].design(&self.state));
                    }
                    cache[slot].as_ref().unwrap()
                } else {
                    fresh = models[slot].design(&self.state);
                    &fresh
                };
                let dt = grid.dt(i);
                let next = &self.y[(i + 1) * n * d..(i + 2) * n * d];
                let pa = design.project(next, d, &mut a);
                let noise = &self.noise;
                reduce::fill_rows(&mut zt, w, |p, row| {
                    for k in 0..d {
                        let r = next[p * d + k] - a[p * d + k];
                        for j in 0..nb {
                            row[k * nb + j] = r * noise.increment(p, i, j) / dt;
                        }
                    }
                });
                let pz = design.project(&zt, w, &mut zf);
                let yfield = Field::new(Arc::clone(design.model()), &pa);
                let cur_y = &self.y[i * n * d..(i + 1) * n * d];
                let yfield = match driver {
                    Some(drv) => {
                        reduce::fill_rows(&mut fv, d, |p, out| drv(i, p, &cur_y[p * d..(p + 1) * d], &zf[p * w..(p + 1) * w], out));
                        if let Some(bad) = fv.iter().position(|v| !v.is_finite()) {
                            return Err(Error::NumericBlowup { path: bad / d, step: i });
                        }
                        let pf = design.project(&fv, d, &mut fb);
                        yfield.axpy(dt, &Field::new(Arc::clone(design.model()), &pf))
                    }
                    None => {
                        fb.iter_mut().for_each(|v| *v = 0.0);
                        yfield
                    }
                };
                let gy = reduce::sum_by(n, |p| {
                    (0..d).map(|k| (a[p * d + k] + dt * fb[p * d + k] - cur_y[p * d + k]).powi(2)).sum::<f64>()
                }) / n as f64;
                let cur_z = &self.z[i * n * w..(i + 1) * n * w];
                let gz = reduce::sum_by(n, |p| (0..w).map(|k| (zf[p * w + k] - cur_z[p * w + k]).powi(2)).sum::<f64>()) / n as f64;
                gap_y = gap_y.max(gy);
                gap_z += gz * dt;
                let ys = &mut self.y[i * n * d..(i + 1) * n * d];
                for ((y, av), bv) in ys.iter_mut().zip(&a).zip(&fb) {
                    *y = av + dt * bv;
                }
                self.z[i * n * w..(i + 1) * n * w].copy_from_slice(&zf);
                self.y_fields[i] = Some(yfield);
                self.z_fields[i] = Some(Field::new(Arc::clone(design.model()), &pz));
                self.diag.residual_y[i] = pa.residual;
            }
            let gap = gap_y.sqrt() + gap_z.sqrt();
            self.diag.gaps.push(gap);
            self.diag.last_gap = gap;
            if driver.is_none() || gap <= self.config.tol {
                converged = true;
                break;
            }
            if prev_gap.is_finite() && prev_gap > 0.0 {
                let ratio = gap / prev_gap;
                rising = if ratio >= 1.0 { rising + 1 } else { 0 };
                if rising >= 3 {
                    return Err(Error::Divergence { iteration: iter, ratio });
                }
            }
            prev_gap = gap;
        }
        if let Some(bad) = self.y[start * n * d..end * n * d].iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericBlowup { path: (bad / d) % n, step: start + bad / (n * d) });
        }
        self.diag.iterations += iter;
        self.diag.converged &= converged;
        for i in start..end {
            let zs = &self.z[i * n * w..(i + 1) * n * w];
            self.diag.max_abs_z[i] = reduce::max_by(n, |p| norm(&zs[p * w..(p + 1) * w]));
        }
        self.lowest = start;
        Ok(())
    }

    pub fn finish(self) -> DiscreteSolution {
        let grid = self.state.grid().clone();
        DiscreteSolution {
            grid,
            start: self.lowest,
            end: self.end,
            n_paths: self.n_paths,
            d: self.d,
            n: self.noise.dim(),
            y: self.y,
            z: self.z,
            y_fields: self.y_fields,
            z_fields: self.z_fields,
            state: self.state,
            noise: self.noise,
            basis: self.config.basis,
            diagnostics: self.diag,
        }
    }
}

fn require_brownian_state(spec: &ProblemSpec, bundle: &PathBundle) -> Result<()> {
    if spec.sigma.is_some() || spec.m != spec.n || bundle.dim() != spec.n {
        return Err(Error::Precondition(format!(
            "problem `{}` needs identity volatility and a {}-dimensional Brownian bundle",
            spec.name, spec.n
        )));
    }
    Ok(())
}

/// `xi` on every path of `bundle`, at node `end`.
pub fn terminal_values(spec: &ProblemSpec, bundle: &PathBundle, end: usize) -> Result<Vec<f64>> {
    let d = spec.d;
    let mut out = vec![0.0; bundle.n_paths() * d];
    reduce::fill_rows(&mut out, d, |p, row| spec.eval_terminal(&bundle.view(p, end), row));
    if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericBlowup { path: bad / d, step: end });
    }
    Ok(out)
}

/// Lipschitz BSDE on `[t_start, t_end]` driven by the Brownian `bundle`.
pub fn solve_lipschitz_bsde(
    spec: &ProblemSpec,
    start: usize,
    end: usize,
    bundle: Arc<PathBundle>,
    config: &SolverConfig,
) -> Result<DiscreteSolution> {
    spec.validate()?;
    require_brownian_state(spec, &bundle)?;
    if spec.diag_a.is_some() || (spec.g.is_some() && !spec.constants.c_g.is_finite()) {
        return Err(Error::Precondition(format!(
            "problem `{}` has a non-Lipschitz driver; use a global route",
            spec.name
        )));
    }
    if end > bundle.grid().steps() || start >= end {
        return Err(Error::InvalidArgument(format!("bad interval [{start}, {end}]")));
    }
    let term = terminal_values(spec, &bundle, end)?;
    let mut bw = Backward::new(Arc::clone(&bundle), Arc::clone(&bundle), spec.d, config.clone())?;
    bw.set_terminal(end, &term)?;
    let grid = bundle.grid().clone();
    let drv = |i: usize, p: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        spec.total_driver(grid.t(i), &bundle.view(p, i), y, z, out)
    };
    let driver: Option<&DriverAt> = if spec.driver_is_zero() { None } else { Some(&drv) };
    bw.solve_interval(start, driver)?;
    Ok(bw.finish())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityGap {
    pub lhs: f64,
    pub rhs: f64,
    /// `b = 2(C+1)`.
    pub b: f64,
    pub delta_xi: f64,
    pub delta_f: f64,
}

/// Both sides of `|dY|^2_{S^2} + |dZ|^2_{H^2} <= 6 e^{b(T-t)} (|dXi|^2 + |dF|^2_{H^2})` on
/// `[t_i, T]`, where `dF_s = F(s, Y'_s, Z'_s) - F'(s, Y'_s, Z'_s)` and `C` is the shared constant.
pub fn stability_gap(
    spec_a: &ProblemSpec,
    sol_a: &DiscreteSolution,
    spec_b: &ProblemSpec,
    sol_b: &DiscreteSolution,
    i: usize,
    c: f64,
) -> Result<StabilityGap> {
    if sol_a.n_paths != sol_b.n_paths || sol_a.grid != sol_b.grid || sol_a.d != sol_b.d || sol_a.n != sol_b.n {
        return Err(Error::InvalidArgument("solutions must share grid and paths".into()));
    }
    let (n, d, w) = (sol_a.n_paths, sol_a.d, sol_a.d * sol_a.n);
    let end = sol_a.end;
    let grid = &sol_a.grid;
    let state = &sol_b.state;
    let s_y = reduce::sum_by(n, |p| {
        (i..=end).map(|k| (0..d).map(|c| (sol_a.y(p, k)[c] - sol_b.y(p, k)[c]).powi(2)).sum::<f64>()).fold(0.0, f64::max)
    }) / n as f64;
    let h_z = reduce::sum_by(n, |p| {
        (i..end)
            .map(|k| grid.dt(k) * (0..w).map(|c| (sol_a.z(p, k)[c] - sol_b.z(p, k)[c]).powi(2)).sum::<f64>())
            .sum::<f64>()
    }) / n as f64;
    let dxi = reduce::sum_by(n, |p| (0..d).map(|c| (sol_a.y(p, end)[c] - sol_b.y(p, end)[c]).powi(2)).sum::<f64>()) / n as f64;
    let df = reduce::sum_by(n, |p| {
        let mut fa = vec![0.0; d];
        let mut fb = vec![0.0; d];
        (i..end)
            .map(|k| {
                let view = state.view(p, k);
                spec_a.total_driver(grid.t(k), &view, sol_b.y(p, k), sol_b.z(p, k), &mut fa);
                spec_b.total_driver(grid.t(k), &view, sol_b.y(p, k), sol_b.z(p, k), &mut fb);
                grid.dt(k) * fa.iter().zip(&fb).map(|(u, v)| (u - v).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
    }) / n as f64;
    let b = 2.0 * (c + 1.0);
    let rhs = 6.0 * (b * (grid.horizon() - grid.t(i))).exp() * (dxi + df);
    Ok(StabilityGap { lhs: s_y + h_z, rhs, b, delta_xi: dxi, delta_f: df })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AprioriReport {
    pub holds: bool,
    /// `e^{aT}(C + T/2)` with `a = 4C + 1/2`.
    pub bound: f64,
    /// Largest estimate of `|Y_t|^2 + E_t[int_t^T |Z|^2 ds] / 2` per node.
    pub per_node: Vec<f64>,
    /// `bound / max(per_node)`.
    pub margin: f64,
}

pub const APRIORI_SLACK: f64 = 0.10;

/// Checks `|Y_t|^2 + E_t[int_t^T |Z_s|^2 ds] / 2 <= e^{aT}(C + T/2)` pathwise at every node,
/// with the conditional expectation estimated by regression.
pub fn apriori_bound_check(spec: &ProblemSpec, sol: &DiscreteSolution) -> Result<AprioriReport> {
    let c = spec.constants.c;
    let horizon = sol.grid.horizon();
    let a = 4.0 * c + 0.5;
    let bound = (a * horizon).exp() * (c + horizon / 2.0);
    let n = sol.n_paths;
    let mut tail = vec![0.0; n];
    let mut per_node = vec![0.0; sol.end + 1];
    let mut fitted = vec![0.0; n];
    for i in (sol.start..=sol.end).rev() {
        if i < sol.end {
            let dt = sol.grid.dt(i);
            for (p, t) in tail.iter_mut().enumerate() {
                *t += dt * sol.z(p, i).iter().map(|v| v * v).sum::<f64>();
            }
            let model = Arc::new(StepModel::fit(&sol.basis, &sol.state, i)?);
            model.design(&sol.state).project(&tail, 1, &mut fitted);
        }
        per_node[i] = reduce::max_by(n, |p| {
            let y2: f64 = sol.y(p, i).iter().map(|v| v * v).sum();
            y2 + 0.5 * if i < sol.end { fitted[p].max(0.0) } else { 0.0 }
        });
    }
    let worst = per_node[sol.start..].iter().cloned().fold(0.0, f64::max);
    Ok(AprioriReport {
        holds: worst <= bound * (1.0 + APRIORI_SLACK),
        bound,
        margin: if worst > 0.0 { bound / worst } else { f64::INFINITY },
        per_node,
    })
}

/// Per-node Z-bound certificate `max_p |Z_{t_i}| <= sqrt(rho(T - t_i)) * (1 + slack)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZBoundCertificate {
    pub max_abs_z: Vec<f64>,
    pub bound: Vec<f64>,
    pub slack: f64,
    /// The declared terminal is not Lipschitz, so the bound is infinite.
    pub vacuous: bool,
    pub holds: bool,
    /// Largest `max|Z| / bound` over nodes.
    pub worst_ratio: f64,
}

pub const Z_BOUND_SLACK: f64 = 0.05;

pub fn z_bound_certificate(sol: &DiscreteSolution, k: f64, c: f64) -> ZBoundCertificate {
    let horizon = sol.grid.horizon();
    let mut max_abs_z = Vec::new();
    let mut bound = Vec::new();
    let mut worst: f64 = 0.0;
    for i in sol.start..sol.end {
        let m = sol.z_abs_max(i);
        let b = rho(horizon - sol.grid.t(i), k, c).sqrt();
        if b.is_finite() {
            worst = worst.max(m / b);
        } else if m.is_nan() {
            worst = f64::NAN;
        }
        max_abs_z.push(m);
        bound.push(b);
    }
    let vacuous = !k.is_finite();
    ZBoundCertificate {
        holds: vacuous || worst <= 1.0 + Z_BOUND_SLACK,
        max_abs_z,
        bound,
        slack: Z_BOUND_SLACK,
        vacuous,
        worst_ratio: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::simulate_brownian;
    use crate::problem::{Constants, TerminalFn};

    fn spec_with(term: TerminalFn) -> ProblemSpec {
        ProblemSpec::new("t", 1, 1, 1.0, term, Constants::lipschitz(1.0, 1.0, 0.0))
    }

    #[test]
    fn zero_problem_is_exactly_zero() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = Arc::new(simulate_brownian(&grid, 2000, 1, 1).unwrap());
        let spec = spec_with(Arc::new(|_, out| out[0] = 0.0));
        let sol = solve_lipschitz_bsde(&spec, 0, 10, b, &SolverConfig::default()).unwrap();
        assert!(sol.raw_y().iter().all(|&v| v == 0.0));
        assert!(sol.raw_z().iter().all(|&v| v == 0.0));
        assert_eq!(sol.diagnostics.iterations, 1);
    }

    #[test]
    fn brownian_terminal_gives_unit_z() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = Arc::new(simulate_brownian(&grid, 20_000, 1, 2).unwrap());
        let spec = spec_with(Arc::new(|p, out| out[0] = p.current()[0]));
        let sol = solve_lipschitz_bsde(&spec, 0, 10, Arc::clone(&b), &SolverConfig::with_basis(FeatureBasis::polynomial(1))).unwrap();
        for i in 0..10 {
            let zm = sol.z_abs_mean(i);
            assert!((zm - 1.0).abs() < 0.03, "node {i}: {zm}");
            for p in (0..20_000).step_by(997) {
                assert!((sol.y(p, i)[0] - b.value(p, i)[0]).abs() < 0.03);
            }
        }
        assert_eq!(sol.y(5, 10)[0], b.value(5, 10)[0]);
    }

    #[test]
    fn constant_driver_shifts_y() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let b = Arc::new(simulate_brownian(&grid, 4000, 1, 3).unwrap());
        let mut spec = spec_with(Arc::new(|_, out| out[0] = 0.5));
        spec.f = Some(Arc::new(|_, _, _, _, out| out[0] = 2.0));
        let sol = solve_lipschitz_bsde(&spec, 0, 8, b, &SolverConfig::default()).unwrap();
        assert!((sol.y0()[0] - 2.5).abs() < 1e-12);
        assert!(sol.diagnostics.converged);
    }

    #[test]
    fn y_dependent_driver_converges_geometrically() {
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let b = Arc::new(simulate_brownian(&grid, 4000, 1, 4).unwrap());
        let mut spec = spec_with(Arc::new(|_, out| out[0] = 1.0));
        spec.f = Some(Arc::new(|_, _, y, _, out| out[0] = -0.5 * y[0]));
        let sol = solve_lipschitz_bsde(&spec, 0, 20, b, &SolverConfig::default()).unwrap();
        // Explicit backward Euler of y' = 0.5 y from 1 at T = 1 with the previous sweep.
        let exact = (-0.5f64).exp();
        assert!((sol.y0()[0] - exact).abs() < 0.02);
        let g = &sol.diagnostics.gaps;
        assert!(g.windows(2).skip(1).all(|w| w[1] < w[0]));
    }

    #[test]
    fn divergence_is_reported() {
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let b = Arc::new(simulate_brownian(&grid, 2000, 1, 5).unwrap());
        let mut spec = spec_with(Arc::new(|_, out| out[0] = 1.0));
        spec.f = Some(Arc::new(|_, _, y, _, out| out[0] = 50.0 * y[0]));
        let cfg = SolverConfig { tol: 1e-300, ..SolverConfig::default() };
        assert!(matches!(solve_lipschitz_bsde(&spec, 0, 20, b, &cfg), Err(Error::Divergence { .. })));
    }
}
