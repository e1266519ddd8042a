//! Global solutions on `[0, T]`.
//!
//! The Lipschitz-in-`z` route solves the localized BSDE level by level from the horizon
//! down, each level taking the previous one's values at its left endpoint as terminal
//! condition. The superquadratic route is the same construction with radius
//! `sqrt(rho(T))`; the diagonal route runs it on the exponential transform; the perturbed
//! route adds a difference BSDE on top of a base solution.

use std::sync::Arc;

use crate::bsde::{terminal_values, z_bound_certificate, Backward, DiscreteSolution, DriverAt, SolverConfig, ZBoundCertificate};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::{PathBundle, PathView};
use crate::planner::{plan_partition, rho, tevzadze_margin, MarginReport, PartitionPlan, Route, DEFAULT_CAP};
use crate::problem::{norm, with_scratch, Constants, DriverFn, ProblemSpec};
use crate::reduce;
use crate::rng::{derive_seed, NormalStream, UniformStream};

/// Largest fraction of `(path, node)` samples allowed to hit the superquadratic localizer.
pub const ACTIVE_LIMIT: f64 = 1e-3;
/// Pathwise slack of the envelope check on the transformed solution.
pub const ENVELOPE_PATH_SLACK: f64 = 0.02;
const DEVIATION_TAG: u64 = 0xde71;
const DEVIATION_STEPS: usize = 32;

/// `radius z / max(radius, |z|)` with the Frobenius norm, written into `out`.
pub fn localize_into(z: &[f64], radius: f64, out: &mut [f64]) {
    let r = norm(z);
    if r <= radius {
        out.copy_from_slice(z);
    } else {
        for (o, v) in out.iter_mut().zip(z) {
            *o = radius * v / r;
        }
    }
}

pub fn localize(z: &[f64], radius: f64) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    localize_into(z, radius, &mut out);
    out
}

/// Envelope check of the transformed solution against `e^{+-2|a|(C + C-bar (T - t))}`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeReport {
    pub means_ok: bool,
    pub pathwise_ok: bool,
    /// Largest relative excursion of a node mean outside the band.
    pub worst_mean: f64,
    /// Largest relative excursion of a single path outside the band.
    pub worst_path: f64,
    /// Some `a^i < 0`, for which the band is the mirrored one.
    pub mirrored: bool,
}

impl EnvelopeReport {
    pub fn holds(&self) -> bool {
        self.means_ok && self.pathwise_ok
    }
}

#[derive(Clone, Debug)]
pub struct GlobalSolution {
    pub route: Route,
    pub solution: DiscreteSolution,
    pub plan: PartitionPlan,
    /// Level boundaries, from `0` up to the last node.
    pub level_nodes: Vec<usize>,
    /// Localizer radius on `z` (infinite when no localizer was needed).
    pub radius: f64,
    /// Constants of the `sqrt(rho(T - t))` bound.
    pub bound_k: f64,
    pub bound_c: f64,
    pub certificate: ZBoundCertificate,
    /// Fraction of `(path, node)` samples with `|Z| > radius`.
    pub localizer_active: f64,
    pub self_consistent: bool,
    pub envelope: Option<EnvelopeReport>,
    /// Diagonal coefficients when `solution` is the inverse of a transformed solve; the
    /// fields then still describe the transformed processes.
    pub transform: Option<Vec<f64>>,
    pub margin: Option<MarginReport>,
    pub notes: Vec<String>,
}

impl GlobalSolution {
    /// `Y` field at node `i` on a path prefix, inverted through the transform if any.
    pub fn eval_y(&self, i: usize, view: &PathView, out: &mut [f64]) -> Result<()> {
        let f = self.solution.y_fields.get(i).and_then(|f| f.as_ref()).ok_or_else(|| no_field(i))?;
        f.eval(view, out);
        if let Some(a) = &self.transform {
            for (v, ai) in out.iter_mut().zip(a) {
                *v = v.max(f64::MIN_POSITIVE).ln() / (2.0 * ai);
            }
        }
        Ok(())
    }

    pub fn eval_z(&self, i: usize, view: &PathView, out: &mut [f64]) -> Result<()> {
        let f = self.solution.z_fields.get(i).and_then(|f| f.as_ref()).ok_or_else(|| no_field(i))?;
        f.eval(view, out);
        if let Some(a) = &self.transform {
            let yf = self.solution.y_fields[i].as_ref().ok_or_else(|| no_field(i))?;
            let d = a.len();
            let n = out.len() / d;
            with_scratch(d, |ybar| {
                yf.eval(view, ybar);
                for k in 0..d {
                    let s = 2.0 * a[k] * ybar[k].max(f64::MIN_POSITIVE);
                    out[k * n..(k + 1) * n].iter_mut().for_each(|v| *v /= s);
                }
            });
        }
        Ok(())
    }

    pub fn bound(&self, time_to_go: f64) -> f64 {
        rho(time_to_go, self.bound_k, self.bound_c).sqrt()
    }

    pub fn to_csv(&self) -> String {
        self.solution.to_csv(|x| self.bound(x))
    }

    /// Plaintext certificate block.
    pub fn certificate_text(&self) -> String {
        let mut s = format!("route = {}\n", self.route.as_str());
        s += &format!("paths = {}\nsteps = {}\n", self.solution.n_paths, self.solution.grid.steps());
        s += &format!("y0 = {:?}\n", self.solution.y0());
        s += "[plan]\n";
        s += &self.plan.report(12);
        s += "[z bound]\n";
        let c = &self.certificate;
        if c.vacuous {
            s += "sqrt(rho) bound: vacuous (terminal not Lipschitz)\n";
        } else {
            s += &format!(
                "max |Z| / sqrt(rho(T-t)) = {:.6} (slack {}) {}\n",
                c.worst_ratio,
                c.slack,
                verdict(c.holds)
            );
        }
        s += &format!("localizer radius = {:.6e}\n", self.radius);
        s += &format!("localizer active fraction = {:.3e} {}\n", self.localizer_active, verdict(self.self_consistent));
        if let Some(e) = &self.envelope {
            s += "[envelope]\n";
            s += &format!("means {} (worst {:.3e})\n", verdict(e.means_ok), e.worst_mean);
            s += &format!("pathwise {} (worst {:.3e}, slack {})\n", verdict(e.pathwise_ok), e.worst_path, ENVELOPE_PATH_SLACK);
            if e.mirrored {
                s += "band mirrored for negative coefficients (inferred, not stated for a < 0)\n";
            }
        }
        if let Some(m) = &self.margin {
            s += "[margin]\n";
            s += &format!(
                "deviation = {:.6e}, threshold = {:.6e}, beta = {:.6e} {}\n",
                m.deviation,
                m.threshold,
                m.beta,
                verdict(m.pass)
            );
        }
        s += &format!("converged = {}\n", self.solution.diagnostics.converged);
        for n in &self.notes {
            s += &format!("note: {n}\n");
        }
        s
    }
}

fn no_field(i: usize) -> Error {
    Error::InvalidArgument(format!("no regression field at node {i}"))
}

fn verdict(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "FAIL"
    }
}

/// Level boundaries `round(j M / N)`, deduplicated, for `j = 0..=N`.
pub fn level_nodes(steps: usize, n_levels: u64) -> Vec<usize> {
    let n = n_levels.max(1);
    let mut nodes: Vec<usize> = Vec::new();
    if n as usize >= steps {
        nodes.extend(0..=steps);
    } else {
        for j in 0..=n {
            let b = ((j as f64) * steps as f64 / n as f64).round() as usize;
            if nodes.last() != Some(&b) {
                nodes.push(b);
            }
        }
    }
    nodes
}

/// Writes `f + L(z) g(., L(z))` (plus the diagonal term, if any) into `out`.
fn localized_driver(spec: &ProblemSpec, radius: f64, t: f64, view: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
    if spec.g.is_none() || norm(z) <= radius {
        spec.total_driver(t, view, y, z, out);
        return;
    }
    with_scratch(z.len(), |lz| {
        localize_into(z, radius, lz);
        let g = spec.g.as_ref().unwrap();
        let (d, n) = (spec.d, spec.n);
        match &spec.f {
            Some(f) => f(t, view, y, z, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
        if let Some(a) = &spec.diag_a {
            for i in 0..d {
                out[i] += a[i] * z[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>();
            }
        }
        with_scratch(n, |gv| {
            g(t, view, y, lz, gv);
            for i in 0..d {
                out[i] += (0..n).map(|j| lz[i * n + j] * gv[j]).sum::<f64>();
            }
        });
    });
}

fn require_brownian(spec: &ProblemSpec, bundle: &PathBundle) -> Result<()> {
    spec.validate()?;
    if spec.sigma.is_some() || spec.m != spec.n || bundle.dim() != spec.n {
        return Err(Error::Precondition(format!(
            "problem `{}` needs identity volatility and a {}-dimensional Brownian bundle",
            spec.name, spec.n
        )));
    }
    Ok(())
}

fn glue(
    spec: &ProblemSpec,
    bundle: &Arc<PathBundle>,
    plan: &PartitionPlan,
    config: &SolverConfig,
    radius: f64,
) -> Result<(DiscreteSolution, Vec<usize>)> {
    let steps = bundle.grid().steps();
    let nodes = level_nodes(steps, plan.n_levels);
    let term = terminal_values(spec, bundle, steps)?;
    let mut bw = Backward::new(Arc::clone(bundle), Arc::clone(bundle), spec.d, config.clone())?;
    bw.set_terminal(steps, &term)?;
    let grid = bundle.grid().clone();
    let drv = |i: usize, p: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        localized_driver(spec, radius, grid.t(i), &bundle.view(p, i), y, z, out)
    };
    let driver: Option<&DriverAt> = if spec.driver_is_zero() { None } else { Some(&drv) };
    for (level, w) in nodes.windows(2).rev().enumerate() {
        bw.solve_interval(w[0], driver).map_err(|e| Error::Level { level: level + 1, source: Box::new(e) })?;
    }
    Ok((bw.finish(), nodes))
}

fn finish(
    route: Route,
    spec: &ProblemSpec,
    solution: DiscreteSolution,
    plan: PartitionPlan,
    level_nodes: Vec<usize>,
    radius: f64,
) -> GlobalSolution {
    let c = &spec.constants;
    let certificate = z_bound_certificate(&solution, c.k, c.c);
    let localizer_active = if radius.is_finite() { solution.z_exceedance(radius) } else { 0.0 };
    let mut notes = Vec::new();
    if !solution.diagnostics.converged {
        notes.push("Picard iteration stopped at max_iter on some level".into());
    }
    GlobalSolution {
        route,
        solution,
        plan,
        level_nodes,
        radius,
        bound_k: c.k,
        bound_c: c.c,
        certificate,
        localizer_active,
        self_consistent: true,
        envelope: None,
        transform: None,
        margin: None,
        notes,
    }
}

/// Plan for `spec` on `route` using its declared constants (effective `C_g` on the
/// superquadratic route).
pub fn plan_for(spec: &ProblemSpec, route: Route, cap: u64) -> Result<PartitionPlan> {
    let c = &spec.constants;
    let c_g = match route {
        Route::Superquadratic => spec.effective_growth(2.0 * superquadratic_radius(spec)),
        _ if spec.g.is_none() => 0.0,
        _ => c.c_g,
    };
    plan_partition(c.k, c.c, c_g, spec.horizon, route, cap)
}

/// Glued solution of the BSDE with driver `f + L(z) g(., L(z))`, radius `sqrt(R)`.
pub fn solve_global_lipschitz_g(
    spec: &ProblemSpec,
    bundle: Arc<PathBundle>,
    plan: &PartitionPlan,
    config: &SolverConfig,
) -> Result<GlobalSolution> {
    require_brownian(spec, &bundle)?;
    if spec.diag_a.is_some() {
        return Err(Error::Precondition(format!("problem `{}` has a quadratic term; use the diagonal route", spec.name)));
    }
    if spec.g.is_some() && !spec.constants.c_g.is_finite() {
        return Err(Error::Precondition(format!("problem `{}` has no finite C_g; use the superquadratic route", spec.name)));
    }
    let radius = plan.r_cap.sqrt();
    let (sol, nodes) = glue(spec, &bundle, plan, config, radius)?;
    Ok(finish(Route::Lipschitz, spec, sol, plan.clone(), nodes, radius))
}

/// `sqrt(rho(T))` from the declared `K` and `C`.
pub fn superquadratic_radius(spec: &ProblemSpec) -> f64 {
    let c = &spec.constants;
    rho(spec.horizon, c.k, c.c).sqrt()
}

/// Localization at `sqrt(rho(T))` with effective `C_g = l(2 sqrt(rho(T)))`.
pub fn solve_global_superquadratic(spec: &ProblemSpec, bundle: Arc<PathBundle>, config: &SolverConfig) -> Result<GlobalSolution> {
    require_brownian(spec, &bundle)?;
    if spec.diag_a.is_some() {
        return Err(Error::Precondition(format!("problem `{}` has a quadratic term; use the diagonal route", spec.name)));
    }
    let radius = superquadratic_radius(spec);
    let plan = plan_for(spec, Route::Superquadratic, DEFAULT_CAP)?;
    let (sol, nodes) = glue(spec, &bundle, &plan, config, radius)?;
    let mut out = finish(Route::Superquadratic, spec, sol, plan, nodes, radius);
    if out.localizer_active > ACTIVE_LIMIT {
        out.self_consistent = false;
        out.notes.push(format!(
            "localizer active on {:.3e} of samples (limit {ACTIVE_LIMIT}); the result solves the localized equation only",
            out.localizer_active
        ));
    }
    Ok(out)
}

/// Clamp bound `M = C + C-bar T`.
fn clamp_level(spec: &ProblemSpec) -> f64 {
    spec.constants.c + spec.constants.c_bar.unwrap_or(0.0) * spec.horizon
}

/// Lower and upper envelope of the transformed component with coefficient `a`.
pub fn envelope_band(a: f64, c: f64, c_bar: f64, time_to_go: f64) -> (f64, f64) {
    let e = 2.0 * a * (c + c_bar * time_to_go);
    let (lo, hi) = ((-e).exp(), e.exp());
    (lo.min(hi), lo.max(hi))
}

/// The transformed problem for `Y-bar^i = e^{2 a^i Y^i}`.
pub fn transformed_spec(spec: &ProblemSpec) -> Result<ProblemSpec> {
    let a = spec.diag_a.clone().ok_or_else(|| Error::Precondition(format!("problem `{}` has no diagonal coefficient", spec.name)))?;
    if a.iter().any(|v| *v == 0.0 || !v.is_finite()) {
        return Err(Error::Precondition("diagonal coefficients must be finite and nonzero".into()));
    }
    let c_bar = match (spec.f.is_some(), spec.constants.c_bar) {
        (true, None) => return Err(Error::Precondition("a bound C-bar on |f| is required when f is present".into())),
        (_, b) => b.unwrap_or(0.0),
    };
    let m = clamp_level(spec);
    let (d, n) = (spec.d, spec.n);
    let lo_hi: Vec<(f64, f64)> = a.iter().map(|ai| envelope_band(*ai, m, 0.0, 0.0)).collect();
    let lo_hi = Arc::new(lo_hi);
    let a = Arc::new(a);
    let base = spec.terminal.clone();
    let at = Arc::clone(&a);
    let terminal: crate::problem::TerminalFn = Arc::new(move |p, out| {
        base(p, out);
        for (v, ai) in out.iter_mut().zip(at.iter()) {
            *v = (2.0 * ai * *v).exp();
        }
    });
    let c = &spec.constants;
    let amax = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k_t = 4.0 * amax * amax * (4.0 * amax * c.c).exp() * c.k;
    let mut c_t = (4.0 * amax * c.c).exp();
    if spec.f.is_some() {
        c_t = c_t.max(4.0 * amax * amax * (4.0 * amax * m).exp() * (c_bar * c_bar + c.c));
    }
    let mut out = ProblemSpec::new(
        format!("{}~exp", spec.name),
        d,
        n,
        spec.horizon,
        terminal,
        Constants { k: k_t, c: c_t, c_g: c.c_g, c_bar: None, ellipticity: c.ellipticity, terminal_bounded: true },
    );
    out.x0 = spec.x0.clone();
    out.m = spec.m;
    out.markovian = spec.markovian;
    out.growth = spec.growth.clone();
    // Original-scale (y, z) from clamped transformed values.
    let back = {
        let a = Arc::clone(&a);
        let lo_hi = Arc::clone(&lo_hi);
        move |y: &[f64], z: &[f64], yo: &mut [f64], zo: &mut [f64], yc: &mut [f64]| {
            for k in 0..d {
                let (lo, hi) = lo_hi[k];
                yc[k] = y[k].clamp(lo, hi);
                yo[k] = yc[k].ln() / (2.0 * a[k]);
                for j in 0..n {
                    zo[k * n + j] = z[k * n + j] / (2.0 * a[k] * yc[k]);
                }
            }
        }
    };
    let back = Arc::new(back);
    if let Some(f) = spec.f.clone() {
        let (a, back) = (Arc::clone(&a), Arc::clone(&back));
        let ft: DriverFn = Arc::new(move |t, p, y, z, out| {
            let mut yo = vec![0.0; d];
            let mut zo = vec![0.0; d * n];
            let mut yc = vec![0.0; d];
            back(y, z, &mut yo, &mut zo, &mut yc);
            f(t, p, &yo, &zo, out);
            for k in 0..d {
                out[k] *= 2.0 * a[k] * yc[k];
            }
        });
        out.f = Some(ft);
    }
    if let Some(g) = spec.g.clone() {
        let back = Arc::clone(&back);
        let gt: DriverFn = Arc::new(move |t, p, y, z, out| {
            let mut yo = vec![0.0; d];
            let mut zo = vec![0.0; d * n];
            let mut yc = vec![0.0; d];
            back(y, z, &mut yo, &mut zo, &mut yc);
            g(t, p, &yo, &zo, out);
        });
        out.g = Some(gt);
    }
    Ok(out)
}

/// Relative error of `inverse(forward(y, z))` against `(y, z)`, maximised.
pub fn round_trip_error(y: &[f64], z: &[f64], a: &[f64]) -> f64 {
    let d = a.len();
    let n = z.len() / d.max(1);
    let mut worst: f64 = 0.0;
    let rel = |x: f64, r: f64| if r == 0.0 { x.abs() } else { ((x - r) / r).abs() };
    for k in 0..d {
        let yb = (2.0 * a[k] * y[k]).exp();
        worst = worst.max(rel(yb.ln() / (2.0 * a[k]), y[k]));
        for j in 0..n {
            let zb = 2.0 * a[k] * yb * z[k * n + j];
            worst = worst.max(rel(zb / (2.0 * a[k] * yb), z[k * n + j]));
        }
    }
    worst
}

fn check_envelope(spec: &ProblemSpec, sol: &DiscreteSolution, a: &[f64]) -> EnvelopeReport {
    let (c, c_bar) = (spec.constants.c, spec.constants.c_bar.unwrap_or(0.0));
    let horizon = sol.grid.horizon();
    let d = sol.d;
    let mut worst_mean: f64 = 0.0;
    let mut worst_path: f64 = 0.0;
    for i in sol.start..=sol.end {
        let ttg = horizon - sol.grid.t(i);
        let bands: Vec<(f64, f64)> = a.iter().map(|ai| envelope_band(*ai, c, c_bar, ttg)).collect();
        let excess = |k: usize, v: f64| {
            let (lo, hi) = bands[k];
            if v < lo {
                (lo - v) / lo
            } else if v > hi {
                (v - hi) / hi
            } else {
                0.0
            }
        };
        for (k, m) in sol.y_mean(i).iter().enumerate() {
            worst_mean = worst_mean.max(excess(k, *m));
        }
        let w = reduce::max_by(sol.n_paths, |p| (0..d).map(|k| excess(k, sol.y(p, i)[k])).fold(0.0, f64::max));
        worst_path = worst_path.max(w);
    }
    EnvelopeReport {
        means_ok: worst_mean == 0.0,
        pathwise_ok: worst_path <= ENVELOPE_PATH_SLACK,
        worst_mean,
        worst_path,
        mirrored: a.iter().any(|v| *v < 0.0),
    }
}

/// Solves through `Y-bar = e^{2 a Y}` and inverts.
pub fn solve_diagonal_quadratic(spec: &ProblemSpec, bundle: Arc<PathBundle>, config: &SolverConfig) -> Result<GlobalSolution> {
    require_brownian(spec, &bundle)?;
    let ts = transformed_spec(spec)?;
    let a = spec.diag_a.clone().unwrap();
    let inner = solve_global_superquadratic(&ts, bundle, config)?;
    let mut sol = inner.solution;
    let (d, n) = (sol.d, sol.n);
    for i in sol.start..=sol.end {
        for p in 0..sol.n_paths {
            if let Some(k) = sol.y(p, i).iter().position(|v| !(*v > 0.0)) {
                return Err(Error::TransformDomain(format!(
                    "transformed component {k} is {} on path {p} at step {i}",
                    sol.y(p, i)[k]
                )));
            }
        }
    }
    let envelope = check_envelope(spec, &sol, &a);
    let transformed_cert = inner.certificate;
    let last = sol.end;
    let at = a.clone();
    sol.map_pathwise(move |i, y, z| {
        for k in 0..d {
            let yb = y[k];
            y[k] = yb.ln() / (2.0 * at[k]);
            if i < last {
                for j in 0..n {
                    z[k * n + j] /= 2.0 * at[k] * yb;
                }
            }
        }
    });
    let mut notes = inner.notes;
    notes.push("z bound certified on the transformed solution with transformed constants".into());
    Ok(GlobalSolution {
        route: Route::Diagonal,
        solution: sol,
        plan: PartitionPlan { route: Route::Diagonal, ..inner.plan },
        level_nodes: inner.level_nodes,
        radius: inner.radius,
        bound_k: ts.constants.k,
        bound_c: ts.constants.c,
        certificate: transformed_cert,
        localizer_active: inner.localizer_active,
        self_consistent: inner.self_consistent,
        envelope: Some(envelope),
        transform: Some(a),
        margin: None,
        notes,
    })
}

/// Sampled `sup |xi - xi-bar| + int |F - F-bar| ds` over `probes` paths and `(y, z)` draws
/// held fixed in time.
pub fn measure_deviation(target: &ProblemSpec, base: &ProblemSpec, probes: usize, seed: u64) -> Result<f64> {
    target.validate()?;
    base.validate()?;
    if (target.d, target.n, target.m) != (base.d, base.n, base.m) {
        return Err(Error::InvalidArgument("target and base differ in dimensions".into()));
    }
    let (d, n, m) = (target.d, target.n, target.m);
    let grid = TimeGrid::uniform(target.horizon, DEVIATION_STEPS)?;
    let seed = derive_seed(seed, DEVIATION_TAG);
    let worst = reduce::max_by(probes, |k| {
        let mut g = NormalStream::new(seed, k as u64, 0);
        let mut u = UniformStream::new(seed, k as u64);
        let mut x = vec![0.0; (DEVIATION_STEPS + 1) * m];
        x[..m].copy_from_slice(&target.x0);
        for i in 0..DEVIATION_STEPS {
            let sq = grid.dt(i).sqrt();
            for c in 0..m {
                x[(i + 1) * m + c] = x[i * m + c] + sq * g.next();
            }
        }
        let scale = [0.1, 1.0, 5.0][u.index(3)];
        let y: Vec<f64> = (0..d).map(|_| scale * g.next()).collect();
        let z: Vec<f64> = (0..d * n).map(|_| scale * g.next()).collect();
        let view = PathView::new(&x, m, &grid);
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        target.eval_terminal(&view, &mut a);
        base.eval_terminal(&view, &mut b);
        let mut dev = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        for i in 0..DEVIATION_STEPS {
            let pv = view.truncate(i);
            let t = grid.t(i);
            target.total_driver(t, &pv, &y, &z, &mut a);
            base.total_driver(t, &pv, &y, &z, &mut b);
            dev += grid.dt(i) * a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
        dev
    });
    if !worst.is_finite() {
        return Err(Error::NumericBlowup { path: 0, step: 0 });
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub enum PerturbedOutcome {
    /// A solution (the theorem gives existence only).
    Solved(Box<GlobalSolution>),
    Rejected(MarginReport),
}

/// `(Y-bar + P, Z-bar + Q)` where `(P, Q)` solves the difference BSDE with driver
/// `F(P + Y-bar, L(Q) + Z-bar) - F-bar(Y-bar, Z-bar)` and terminal `xi - xi-bar`.
/// `base` must be a solution of `base_spec` on a Brownian bundle.
pub fn solve_perturbed(
    target: &ProblemSpec,
    base_spec: &ProblemSpec,
    base: &GlobalSolution,
    c_y: f64,
    c_z: f64,
    probes: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<PerturbedOutcome> {
    if base.transform.is_some() {
        return Err(Error::Precondition("the base solution must be untransformed".into()));
    }
    let deviation = measure_deviation(target, base_spec, probes, seed)?;
    let margin = tevzadze_margin(c_y, c_z, target.horizon, deviation)?;
    if !margin.pass {
        return Ok(PerturbedOutcome::Rejected(margin));
    }
    let bsol = &base.solution;
    let bundle = Arc::clone(&bsol.state);
    require_brownian(target, &bundle)?;
    let steps = bundle.grid().steps();
    if bsol.start != 0 || bsol.end != steps {
        return Err(Error::InvalidArgument("base solution must cover the whole grid".into()));
    }
    let (d, np) = (target.d, bsol.n_paths);
    let t_target = terminal_values(target, &bundle, steps)?;
    let t_base = terminal_values(base_spec, &bundle, steps)?;
    let delta: Vec<f64> = t_target.iter().zip(&t_base).map(|(a, b)| a - b).collect();
    let radius = 2.0 * margin.threshold.sqrt();
    let mut bw = Backward::new(Arc::clone(&bundle), Arc::clone(&bsol.noise), d, config.clone())?;
    bw.share_models(bsol)?;
    bw.set_terminal(steps, &delta)?;
    let grid = bundle.grid().clone();
    let drv = |i: usize, p: usize, y: &[f64], z: &[f64], out: &mut [f64]| {
        let (yb, zb) = (bsol.y(p, i), bsol.z(p, i));
        let view = bundle.view(p, i);
        let t = grid.t(i);
        with_scratch(d + z.len() + d, |buf| {
            let (ys, rest) = buf.split_at_mut(d);
            let (zs, fb) = rest.split_at_mut(z.len());
            localize_into(z, radius, zs);
            for k in 0..d {
                ys[k] = y[k] + yb[k];
            }
            for (v, b) in zs.iter_mut().zip(zb) {
                *v += b;
            }
            target.total_driver(t, &view, ys, zs, out);
            base_spec.total_driver(t, &view, yb, zb, fb);
            for k in 0..d {
                out[k] -= fb[k];
            }
        });
    };
    let zero_driver = target.driver_is_zero() && base_spec.driver_is_zero();
    let driver: Option<&DriverAt> = if zero_driver { None } else { Some(&drv) };
    for (level, w) in base.level_nodes.windows(2).rev().enumerate() {
        bw.solve_interval(w[0], driver).map_err(|e| Error::Level { level: level + 1, source: Box::new(e) })?;
    }
    let mut sol = bw.finish();
    debug_assert_eq!(sol.n_paths, np);
    sol.add_solution(bsol)?;
    let mut out = finish(Route::Perturbed, target, sol, PartitionPlan { route: Route::Perturbed, ..base.plan.clone() }, base.level_nodes.clone(), radius);
    out.margin = Some(margin);
    out.notes.push("existence only: this is a solution, uniqueness is not claimed".into());
    Ok(PerturbedOutcome::Solved(Box::new(out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::lookup_catalog;
    use crate::paths::simulate_brownian;
    use crate::regression::FeatureBasis;
    use std::collections::BTreeMap;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn bundle(steps: usize, paths: usize, seed: u64) -> Arc<PathBundle> {
        let g = TimeGrid::uniform(1.0, steps).unwrap();
        Arc::new(simulate_brownian(&g, paths, 1, seed).unwrap())
    }

    #[test]
    fn localizer_examples() {
        assert_eq!(localize(&[3.0, 4.0], 1.0), vec![0.6, 0.8]);
        assert_eq!(localize(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        assert_eq!(localize(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn level_nodes_cover_grid() {
        assert_eq!(level_nodes(10, 2), vec![0, 5, 10]);
        assert_eq!(level_nodes(4, 100), vec![0, 1, 2, 3, 4]);
        assert_eq!(level_nodes(10, 3), vec![0, 3, 7, 10]);
    }

    #[test]
    fn affine_entry_is_exact() {
        let spec = lookup_catalog("linear-drift", &params(&[("c", 0.5)])).unwrap();
        let b = bundle(20, 4000, 5);
        let plan = plan_for(&spec, Route::Lipschitz, DEFAULT_CAP).unwrap();
        let sol = solve_global_lipschitz_g(&spec, b, &plan, &SolverConfig::with_basis(FeatureBasis::polynomial(1))).unwrap();
        let s = &sol.solution;
        let w_mean = s.y_mean(20)[0];
        assert!((s.y0()[0] - w_mean - 0.5).abs() < 0.01, "{:?} {w_mean}", s.y0());
        for i in 0..20 {
            assert!((s.z_abs_mean(i) - 1.0).abs() < 0.05, "{i} {}", s.z_abs_mean(i));
        }
        assert!(sol.certificate.holds, "{}", sol.certificate_text());
        assert!(sol.level_nodes.len() >= 3);
    }

    #[test]
    fn superquadratic_matches_lipschitz_without_g() {
        let spec = lookup_catalog("sine-terminal", &BTreeMap::new()).unwrap();
        let b = bundle(10, 2000, 9);
        let cfg = SolverConfig::default();
        let plan = plan_for(&spec, Route::Lipschitz, DEFAULT_CAP).unwrap();
        let a = solve_global_lipschitz_g(&spec, Arc::clone(&b), &plan, &cfg).unwrap();
        let s = solve_global_superquadratic(&spec, b, &cfg).unwrap();
        assert_eq!(a.solution.y0(), s.solution.y0());
        for i in 0..10 {
            assert_eq!(a.solution.y_at(i), s.solution.y_at(i));
            assert_eq!(a.solution.z_at(i), s.solution.z_at(i));
        }
    }

    #[test]
    fn superquadratic_radius_value() {
        let spec = lookup_catalog("sine-terminal", &params(&[("amp", 1.0)])).unwrap();
        let mut s = spec.clone();
        s.constants.k = 1.0;
        s.constants.c = 1.0;
        let expect = (1.25 * 4f64.exp() - 0.25).sqrt();
        assert!((superquadratic_radius(&s) - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn superquadratic_entry_is_self_consistent() {
        let spec = lookup_catalog("superquadratic", &params(&[("horizon", 0.25)])).unwrap();
        let g = TimeGrid::uniform(0.25, 10).unwrap();
        let b = Arc::new(simulate_brownian(&g, 20000, 1, 3).unwrap());
        let s = solve_global_superquadratic(&spec, b, &SolverConfig::with_basis(FeatureBasis::binned(8, 0))).unwrap();
        let r: Vec<f64> = s.certificate.max_abs_z.iter().zip(&s.certificate.bound).map(|(a, b)| a / b).collect();
        assert!(s.self_consistent && s.certificate.holds, "{:?}", r);
    }

    #[test]
    fn envelope_band_example() {
        let (lo, hi) = envelope_band(1.0, 1.0, 0.0, 0.7);
        assert_eq!((lo, hi), ((-2f64).exp(), 2f64.exp()));
        assert_eq!(envelope_band(-1.0, 1.0, 0.0, 0.0), ((-2f64).exp(), 2f64.exp()));
    }

    #[test]
    fn round_trip_is_identity() {
        let e = round_trip_error(&[0.3, -1.2], &[0.5, -0.25, 2.0, 1e-3], &[1.0, -0.4]);
        assert!(e < 1e-12, "{e}");
    }

    #[test]
    fn constant_terminal_on_diagonal_route() {
        let mut spec = lookup_catalog("quad-1d", &BTreeMap::new()).unwrap();
        spec.terminal = Arc::new(|_, out| out[0] = 0.3);
        let s = solve_diagonal_quadratic(&spec, bundle(10, 500, 1), &SolverConfig::default()).unwrap();
        for i in 0..=10 {
            for p in 0..500 {
                assert!((s.solution.y(p, i)[0] - 0.3).abs() < 1e-12);
                if i < 10 {
                    assert!(s.solution.z(p, i)[0].abs() < 1e-12);
                }
            }
        }
        assert!(s.envelope.as_ref().unwrap().holds());
    }

    #[test]
    fn diagonal_route_negative_coefficient() {
        let spec = lookup_catalog("quad-1d", &params(&[("a", -0.5)])).unwrap();
        let s = solve_diagonal_quadratic(&spec, bundle(10, 2000, 4), &SolverConfig::default()).unwrap();
        let e = s.envelope.unwrap();
        assert!(e.holds() && e.mirrored);
    }

    #[test]
    fn perturbed_zero_deviation_returns_base() {
        let spec = lookup_catalog("lipschitz-mix", &BTreeMap::new()).unwrap();
        let b = bundle(10, 1000, 2);
        let cfg = SolverConfig::default();
        let plan = plan_for(&spec, Route::Lipschitz, DEFAULT_CAP).unwrap();
        let base = solve_global_lipschitz_g(&spec, b, &plan, &cfg).unwrap();
        match solve_perturbed(&spec, &spec, &base, 1.0, 1.0, 200, 0, &cfg).unwrap() {
            PerturbedOutcome::Solved(s) => {
                for i in 0..=10 {
                    assert_eq!(s.solution.y_at(i), base.solution.y_at(i));
                }
            }
            PerturbedOutcome::Rejected(m) => panic!("{m:?}"),
        }
    }

    #[test]
    fn perturbed_constant_bump() {
        let spec = lookup_catalog("linear-drift", &params(&[("c", 0.2)])).unwrap();
        let b = bundle(10, 1000, 2);
        let cfg = SolverConfig::default();
        let plan = plan_for(&spec, Route::Lipschitz, DEFAULT_CAP).unwrap();
        let base = solve_global_lipschitz_g(&spec, b, &plan, &cfg).unwrap();
        let eps0 = 1e-3;
        let mut target = spec.clone();
        let t0 = spec.terminal.clone();
        target.terminal = Arc::new(move |p, out| {
            t0(p, out);
            out[0] += eps0;
        });
        match solve_perturbed(&target, &spec, &base, 1.0, 1.0, 200, 0, &cfg).unwrap() {
            PerturbedOutcome::Solved(s) => {
                for i in 0..=10 {
                    for p in 0..1000 {
                        assert!((s.solution.y(p, i)[0] - base.solution.y(p, i)[0] - eps0).abs() < 1e-12);
                    }
                }
            }
            PerturbedOutcome::Rejected(m) => panic!("{m:?}"),
        }
        let big = 0.01;
        let t1 = spec.terminal.clone();
        target.terminal = Arc::new(move |p, out| {
            t1(p, out);
            out[0] += big;
        });
        assert!(matches!(solve_perturbed(&target, &spec, &base, 1.0, 1.0, 200, 0, &cfg).unwrap(), PerturbedOutcome::Rejected(_)));
    }

    #[test]
    fn diagonal_route_matches_log_transform_integral() {
        let spec = lookup_catalog("quad-1d", &params(&[("a", 1.0), ("amp", 1.0)])).unwrap();
        let s = solve_diagonal_quadratic(&spec, bundle(20, 50_000, 8), &SolverConfig::default()).unwrap();
        // 0.5 log E[e^{2 sin W_1}] by the trapezoidal rule on [-10, 10].
        let h = 1e-3;
        let mut acc = 0.0;
        for k in -10_000i32..=10_000 {
            let x = k as f64 * h;
            let w = if k.abs() == 10_000 { 0.5 } else { 1.0 };
            acc += w * h * (2.0 * x.sin()).exp() * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        }
        let exact = 0.5 * acc.ln();
        let y0 = s.solution.y0()[0];
        assert!((y0 - exact).abs() < 0.02 * exact.abs(), "{y0} vs {exact}");
        assert!(s.envelope.as_ref().unwrap().holds(), "{}", s.certificate_text());
    }
}
