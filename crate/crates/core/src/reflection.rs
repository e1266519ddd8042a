//! SDE solution maps and Skorokhod reflection on intervals and polyhedra.
//!
//! The polyhedral map is the usual discrete scheme: move by the increment, then
//! push back along the oblique directions. The push solves the complementarity
//! problem `w = s + R alpha >= 0, alpha >= 0, <alpha, w> = 0` with
//! `R_ij = <n_i, v_j>` by projected Gauss-Seidel, finished by an exact solve on
//! the detected active set.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::{self, PathBundle, PathKind, PathView};
use crate::reduce;
use crate::rng::UniformStream;

/// Sup-norm Lipschitz constant of the discrete interval map (one- or two-sided).
pub const INTERVAL_MAP_LIPSCHITZ: f64 = 2.0;
pub const DEFAULT_PROJECTION_CAP: usize = 100;
/// Tolerance for domain and complementarity checks.
pub const TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionFlags {
    /// Condition (i); certified via `v_i = n_i` or the diagonal-dominance check.
    pub oblique_regular: bool,
    /// Condition (ii), probed: `pi` fixes `G` and pushes along the direction cone.
    pub projection: bool,
    /// Condition (iii), probed on boundary points.
    pub boundary_normal: bool,
    pub interior: bool,
}

impl ConditionFlags {
    pub fn all(&self) -> bool {
        self.oblique_regular && self.projection && self.boundary_normal && self.interior
    }
}

/// `G = {x : <n_i, x> >= c_i}` with oblique directions `v_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionSpec {
    dim: usize,
    normals: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    directions: Vec<Vec<f64>>,
    r: Vec<f64>,
    cap: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ReflectionSpec {
    pub fn new(dim: usize, normals: Vec<Vec<f64>>, offsets: Vec<f64>, directions: Vec<Vec<f64>>) -> Result<Self> {
        let h = normals.len();
        if dim == 0 || offsets.len() != h || directions.len() != h {
            return Err(Error::Reflection("normals, offsets and directions must have equal length".into()));
        }
        for i in 0..h {
            if normals[i].len() != dim || directions[i].len() != dim {
                return Err(Error::Reflection(format!("half-space {i}: vectors must have dimension {dim}")));
            }
            for (what, v) in [("normal", &normals[i]), ("direction", &directions[i])] {
                let nv = dot(v, v).sqrt();
                if (nv - 1.0).abs() > 1e-9 {
                    return Err(Error::Reflection(format!("half-space {i}: {what} has norm {nv}, expected 1")));
                }
            }
            if !offsets[i].is_finite() {
                return Err(Error::Reflection(format!("half-space {i}: offset must be finite")));
            }
            if dot(&normals[i], &directions[i]) <= 0.0 {
                return Err(Error::Reflection(format!("half-space {i}: need <v_i, n_i> > 0")));
            }
        }
        let mut r = vec![0.0; h * h];
        for i in 0..h {
            for j in 0..h {
                r[i * h + j] = dot(&normals[i], &directions[j]);
            }
        }
        Ok(Self { dim, normals, offsets, directions, r, cap: DEFAULT_PROJECTION_CAP })
    }

    /// Whole space.
    pub fn unconstrained(dim: usize) -> Self {
        Self { dim, normals: vec![], offsets: vec![], directions: vec![], r: vec![], cap: DEFAULT_PROJECTION_CAP }
    }

    /// `{x >= 0}` with normal reflection.
    pub fn orthant(dim: usize) -> Self {
        let e: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self::new(dim, e.clone(), vec![0.0; dim], e).expect("orthant is valid")
    }

    /// `[lo, hi]` in one dimension with normal reflection.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::Reflection(format!("need lo < hi, got [{lo}, {hi}]")));
        }
        Self::new(1, vec![vec![1.0], vec![-1.0]], vec![lo, -hi], vec![vec![1.0], vec![-1.0]])
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_faces(&self) -> usize {
        self.normals.len()
    }

    /// `min_i (<n_i, x> - c_i)`: distance to the boundary for `x` in `G`, negative outside.
    pub fn slack(&self, x: &[f64]) -> f64 {
        self.normals.iter().zip(&self.offsets).map(|(n, c)| dot(n, x) - c).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.slack(x) >= -tol
    }

    /// Oblique projection of `y` onto `G`. Writes the pushes `alpha_i >= 0` into `alpha`
    /// (one per face) and returns `pi(y)`. `step` only labels the error.
    pub fn project(&self, y: &[f64], alpha: &mut [f64], step: usize) -> Result<Vec<f64>> {
        let mut x = vec![0.0; y.len()];
        self.project_into(y, alpha, &mut x, step)?;
        Ok(x)
    }

    /// As [`project`](Self::project), writing `pi(y)` into `x`.
    pub fn project_into(&self, y: &[f64], alpha: &mut [f64], x: &mut [f64], step: usize) -> Result<()> {
        let h = self.n_faces();
        alpha.fill(0.0);
        if (0..h).all(|i| dot(&self.normals[i], y) - self.offsets[i] >= 0.0) {
            x.copy_from_slice(y);
            return Ok(());
        }
        let s: Vec<f64> = (0..h).map(|i| dot(&self.normals[i], y) - self.offsets[i]).collect();
        let rr = |i: usize, j: usize| self.r[i * h + j];
        let mut w = s.clone();
        for _ in 0..self.cap {
            for i in 0..h {
                let new = (alpha[i] - w[i] / rr(i, i)).max(0.0);
                let d = new - alpha[i];
                if d != 0.0 {
                    alpha[i] = new;
                    for (k, wk) in w.iter_mut().enumerate() {
                        *wk += rr(k, i) * d;
                    }
                }
            }
            if !w.iter().all(|v| v.is_finite()) {
                break;
            }
            let active: Vec<usize> = (0..h).filter(|&i| alpha[i] > 0.0).collect();
            if let Some(exact) = self.solve_active(&s, &active) {
                let mut candidate = vec![0.0; h];
                for (a, &i) in exact.iter().zip(&active) {
                    candidate[i] = *a;
                }
                let ok = (0..h).all(|i| s[i] + (0..h).map(|j| rr(i, j) * candidate[j]).sum::<f64>() >= -TOL);
                if ok {
                    alpha.copy_from_slice(&candidate);
                    x.copy_from_slice(y);
                    for (i, a) in alpha.iter().enumerate() {
                        if *a > 0.0 {
                            for (xk, vk) in x.iter_mut().zip(&self.directions[i]) {
                                *xk += a * vk;
                            }
                        }
                    }
                    return Ok(());
                }
            }
        }
        Err(Error::ProjectionNonConvergence { step, cap: self.cap })
    }

    fn solve_active(&self, s: &[f64], active: &[usize]) -> Option<Vec<f64>> {
        let h = self.n_faces();
        let k = active.len();
        if k == 0 {
            return None;
        }
        let m = DMatrix::from_fn(k, k, |a, b| self.r[active[a] * h + active[b]]);
        let rhs = DVector::from_fn(k, |a, _| -s[active[a]]);
        let sol = m.lu().solve(&rhs)?;
        if sol.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Some(sol.iter().copied().collect())
        } else {
            None
        }
    }

    /// Dupuis-Ishii sufficient condition for (i): positive weights `a` with
    /// `a_i <n_i, v_i> > sum_{j != i} a_j |<n_i, v_j>|`. Such weights exist iff the
    /// comparison matrix is a nonsingular M-matrix; returns `a = M^{-1} 1` then.
    pub fn dominance_weights(&self) -> Option<Vec<f64>> {
        let h = self.n_faces();
        if h == 0 {
            return Some(vec![]);
        }
        let m = DMatrix::from_fn(h, h, |i, j| if i == j { self.r[i * h + i] } else { -self.r[i * h + j].abs() });
        let inv = m.try_inverse()?;
        if inv.iter().any(|v| *v < -1e-14) {
            return None;
        }
        let a: Vec<f64> = (0..h).map(|i| inv.row(i).sum()).collect();
        let strict = (0..h).all(|i| {
            let off: f64 = (0..h).filter(|&j| j != i).map(|j| a[j] * self.r[i * h + j].abs()).sum();
            a[i] > 0.0 && a[i] * self.r[i * h + i] > off
        });
        strict.then_some(a)
    }

    fn normal_reflection(&self) -> bool {
        self.normals.iter().zip(&self.directions).all(|(n, v)| n.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-14))
    }

    /// A point with `slack > 0`, if one is found.
    pub fn interior_point(&self, seed: u64) -> Option<Vec<f64>> {
        if self.n_faces() == 0 {
            return Some(vec![0.0; self.dim]);
        }
        let scale = 1.0 + self.offsets.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let mut rng = UniformStream::new(seed, 0x5eed);
        let mut alpha = vec![0.0; self.n_faces()];
        let inward: Vec<f64> = (0..self.dim).map(|k| self.normals.iter().map(|n| n[k]).sum()).collect();
        for _ in 0..2000 {
            let y: Vec<f64> = (0..self.dim).map(|_| rng.range(-2.0 * scale, 2.0 * scale)).collect();
            if self.slack(&y) > 0.0 {
                return Some(y);
            }
            if let Ok(x) = self.project(&y, &mut alpha, 0) {
                for eps in [1e-3, 1e-2, 1e-1] {
                    let z: Vec<f64> = x.iter().zip(&inward).map(|(a, b)| a + eps * scale * b).collect();
                    if self.slack(&z) > 0.0 {
                        return Some(z);
                    }
                }
            }
        }
        None
    }

    /// Probes conditions (i)-(iii) on `n_probes` sampled points.
    pub fn probe_conditions(&self, seed: u64, n_probes: usize) -> ConditionFlags {
        let h = self.n_faces();
        let interior = self.interior_point(seed);
        let oblique_regular = self.normal_reflection() || self.dominance_weights().is_some();
        let Some(center) = interior.clone() else {
            return ConditionFlags { oblique_regular, projection: false, boundary_normal: false, interior: false };
        };
        let scale = 1.0 + center.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let mut rng = UniformStream::new(seed, 0x0b5e);
        let mut alpha = vec![0.0; h];
        let (mut projection, mut boundary_normal) = (true, true);
        for _ in 0..n_probes {
            let y: Vec<f64> = center.iter().map(|c| c + rng.range(-3.0 * scale, 3.0 * scale)).collect();
            let Ok(x) = self.project(&y, &mut alpha, 0) else {
                projection = false;
                continue;
            };
            if self.slack(&y) >= 0.0 {
                projection &= x == y;
                continue;
            }
            // pi(y) on the boundary, and every push along a face active at pi(y).
            let sl = self.slack(&x);
            projection &= sl.abs() <= TOL * scale;
            let act: Vec<usize> =
                (0..h).filter(|&i| (dot(&self.normals[i], &x) - self.offsets[i]).abs() <= TOL * scale).collect();
            projection &= (0..h).all(|i| alpha[i] == 0.0 || act.contains(&i));
            boundary_normal &= self.has_separating_normal(&act, &mut rng);
        }
        ConditionFlags { oblique_regular, projection, boundary_normal, interior: true }
    }

    /// Looks for `n` in the cone of active normals with `<v_j, n> > 0` for all active `j`.
    fn has_separating_normal(&self, act: &[usize], rng: &mut UniformStream) -> bool {
        let ok = |w: &[f64]| {
            let n: Vec<f64> = (0..self.dim).map(|k| act.iter().zip(w).map(|(&i, wi)| wi * self.normals[i][k]).sum()).collect();
            act.iter().all(|&j| dot(&self.directions[j], &n) > 0.0)
        };
        if act.is_empty() {
            return true;
        }
        let ones = vec![1.0; act.len()];
        if ok(&ones) {
            return true;
        }
        for e in 0..act.len() {
            let w: Vec<f64> = (0..act.len()).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
            if ok(&w) {
                return true;
            }
        }
        (0..200).any(|_| {
            let w: Vec<f64> = (0..act.len()).map(|_| rng.next()).collect();
            ok(&w)
        })
    }
}

/// Constrained path with its regulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectedPath {
    pub dim: usize,
    /// `Gamma(phi)` at the grid nodes, node-major.
    pub values: Vec<f64>,
    /// Regulator increments `dPsi` per node (zero at node 0).
    pub regulator: Vec<f64>,
    /// Cumulative total variation `l` of `Psi`.
    pub variation: Vec<f64>,
}

impl ReflectedPath {
    pub fn n_nodes(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.at(self.n_nodes() - 1)
    }

    pub fn total_variation(&self) -> f64 {
        *self.variation.last().unwrap_or(&0.0)
    }
}

/// Worst domain violation `max(0, -slack)` over the nodes.
pub fn domain_violation(spec: &ReflectionSpec, path: &ReflectedPath) -> f64 {
    (0..path.n_nodes()).map(|k| (-spec.slack(path.at(k))).max(0.0)).fold(0.0, f64::max)
}

/// Regulator mass spent at nodes whose distance to the boundary exceeds `tol`.
pub fn complementarity_defect(spec: &ReflectionSpec, path: &ReflectedPath, tol: f64) -> f64 {
    (0..path.n_nodes())
        .filter(|&k| spec.slack(path.at(k)) > tol)
        .map(|k| path.regulator[k * path.dim..(k + 1) * path.dim].iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum()
}

/// Discrete interval map for a one-dimensional path: `x_k = clamp(x_{k-1} + dphi_k)`.
pub fn reflect_interval(phi: &[f64], lo: f64, hi: Option<f64>) -> Vec<f64> {
    skorokhod_interval_unchecked(phi, lo, hi).values
}

fn skorokhod_interval_unchecked(phi: &[f64], lo: f64, hi: Option<f64>) -> ReflectedPath {
    let n = phi.len();
    let mut values = Vec::with_capacity(n);
    let mut regulator = vec![0.0; n];
    let mut variation = vec![0.0; n];
    let clamp = |x: f64| {
        let x = x.max(lo);
        match hi {
            Some(h) => x.min(h),
            None => x,
        }
    };
    values.push(clamp(phi[0]));
    for k in 1..n {
        let free = values[k - 1] + (phi[k] - phi[k - 1]);
        let x = clamp(free);
        regulator[k] = x - free;
        variation[k] = variation[k - 1] + regulator[k].abs();
        values.push(x);
    }
    ReflectedPath { dim: 1, values, regulator, variation }
}

/// Skorokhod map on `[a, b]`, or `[a, inf)` when `b` is `None`, with normal reflection.
pub fn skorokhod_1d(phi: &[f64], a: f64, b: Option<f64>) -> Result<ReflectedPath> {
    if phi.is_empty() {
        return Err(Error::Reflection("empty path".into()));
    }
    if let Some(b) = b {
        if !(a < b) {
            return Err(Error::Reflection(format!("need a < b, got [{a}, {b}]")));
        }
    }
    let start = phi[0];
    if start < a || b.is_some_and(|b| start > b) || !start.is_finite() {
        return Err(Error::Reflection(format!("path starts at {start}, outside the domain")));
    }
    Ok(skorokhod_interval_unchecked(phi, a, b))
}

/// Discrete polyhedral Skorokhod map of a node-major path of dimension `spec.dim()`.
pub fn skorokhod_polyhedral(phi: &[f64], spec: &ReflectionSpec) -> Result<ReflectedPath> {
    let d = spec.dim();
    if phi.is_empty() || phi.len() % d != 0 {
        return Err(Error::Reflection("path length is not a multiple of the dimension".into()));
    }
    if !spec.contains(&phi[..d], TOL) {
        return Err(Error::Reflection("path starts outside G".into()));
    }
    let n = phi.len() / d;
    let mut out = ReflectedPath { dim: d, values: phi[..d].to_vec(), regulator: vec![0.0; n * d], variation: vec![0.0; n] };
    let mut alpha = vec![0.0; spec.n_faces()];
    let mut y = vec![0.0; d];
    for k in 1..n {
        for c in 0..d {
            y[c] = out.values[(k - 1) * d + c] + (phi[k * d + c] - phi[(k - 1) * d + c]);
        }
        let x = spec.project(&y, &mut alpha, k)?;
        push_node(&mut out, k, &y, &x);
    }
    Ok(out)
}

fn push_node(out: &mut ReflectedPath, k: usize, free: &[f64], x: &[f64]) {
    let d = out.dim;
    let mut tv = 0.0;
    for c in 0..d {
        let r = x[c] - free[c];
        out.regulator[k * d + c] = r;
        tv += r * r;
    }
    out.variation[k] = out.variation[k - 1] + tv.sqrt();
    out.values.extend_from_slice(x);
}

/// Drift `b_f(t, Phi_[0,t], M_[0,t])` of the forward map.
pub type MapDrift = Arc<dyn Fn(f64, &PathView, &PathView, &mut [f64]) + Send + Sync>;
/// `sigma_f(t)` as an `m x n` row-major matrix.
pub type MapVol = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// `dPhi = b_f(t, Phi, M) dt + sigma_f(t) dM`.
#[derive(Clone)]
pub struct SdeMap {
    pub m: usize,
    pub n: usize,
    pub drift: MapDrift,
    pub vol: MapVol,
    /// Declared `C_f`: Lipschitz constant of `b_f`, bound on `|b_f(t, 0, m)|`, and on `|sigma_f| + T |sigma_f'|`.
    pub c_f: f64,
}

impl SdeMap {
    /// `b_f = 0`, `sigma_f = I`.
    pub fn identity(dim: usize) -> Self {
        Self {
            m: dim,
            n: dim,
            drift: Arc::new(|_, _, _, out| out.fill(0.0)),
            vol: Arc::new(move |_, out| {
                out.fill(0.0);
                for k in 0..dim {
                    out[k * dim + k] = 1.0;
                }
            }),
            c_f: 1.0,
        }
    }

    /// `b_f(x) = -kappa x`, `sigma_f = 1` in one dimension.
    pub fn ornstein_uhlenbeck(kappa: f64) -> Self {
        Self {
            m: 1,
            n: 1,
            drift: Arc::new(move |_, phi, _, out| out[0] = -kappa * phi.current()[0]),
            vol: Arc::new(|_, out| out[0] = 1.0),
            c_f: kappa.abs().max(1.0),
        }
    }

    /// `L = C_f (1 + T) e^{C_f T}`.
    pub fn lipschitz_bound(&self, horizon: f64) -> f64 {
        self.c_f * (1.0 + horizon) * (self.c_f * horizon).exp()
    }
}

/// Drives `map` by the path `m_path` (node-major, dimension `map.n`), reflecting each
/// Euler step onto `G` when `spec` is given.
pub fn drive_path(
    map: &SdeMap,
    spec: Option<&ReflectionSpec>,
    grid: &TimeGrid,
    m_path: &[f64],
    x0: &[f64],
) -> Result<ReflectedPath> {
    let (m, n) = (map.m, map.n);
    let nodes = grid.steps() + 1;
    if m_path.len() != nodes * n || x0.len() != m {
        return Err(Error::InvalidArgument("driver path or start point has the wrong shape".into()));
    }
    if let Some(s) = spec {
        if s.dim() != m {
            return Err(Error::Reflection("reflection dimension differs from the state dimension".into()));
        }
        if !s.contains(x0, TOL) {
            return Err(Error::Reflection("start point outside G".into()));
        }
    }
    let mut out = ReflectedPath { dim: m, values: Vec::with_capacity(nodes * m), regulator: vec![0.0; nodes * m], variation: vec![0.0; nodes] };
    out.values.extend_from_slice(x0);
    let mut b = vec![0.0; m];
    let mut sig = vec![0.0; m * n];
    let mut y = vec![0.0; m];
    let mut x = vec![0.0; m];
    let mut alpha = vec![0.0; spec.map_or(0, |s| s.n_faces())];
    for i in 0..grid.steps() {
        let t = grid.t(i);
        let dt = grid.dt(i);
        {
            let phi_view = PathView::new(&out.values, m, grid);
            let m_view = PathView::new(&m_path[..(i + 1) * n], n, grid);
            (map.drift)(t, &phi_view, &m_view, &mut b);
        }
        (map.vol)(t, &mut sig);
        for r in 0..m {
            let mut inc = b[r] * dt;
            for c in 0..n {
                inc += sig[r * n + c] * (m_path[(i + 1) * n + c] - m_path[i * n + c]);
            }
            y[r] = out.values[i * m + r] + inc;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericBlowup { path: 0, step: i + 1 });
        }
        match spec {
            Some(s) => {
                s.project_into(&y, &mut alpha, &mut x, i + 1)?;
                push_node(&mut out, i + 1, &y, &x);
            }
            None => {
                out.values.extend_from_slice(&y);
                out.variation[i + 1] = out.variation[i];
            }
        }
    }
    Ok(out)
}

/// Solution map `phi(M)` applied to every path of `driver`.
pub fn sde_lipschitz_map(map: &SdeMap, driver: &PathBundle, x0: &[f64]) -> Result<PathBundle> {
    map_bundle(map, None, driver, x0).map(|(b, _)| b)
}

/// Reflected SDE driven by `driver`; returns the state paths and the total variation `l_T` per path.
pub fn reflected_sde(map: &SdeMap, spec: &ReflectionSpec, driver: &PathBundle, x0: &[f64]) -> Result<(PathBundle, Vec<f64>)> {
    map_bundle(map, Some(spec), driver, x0)
}

fn map_bundle(map: &SdeMap, spec: Option<&ReflectionSpec>, driver: &PathBundle, x0: &[f64]) -> Result<(PathBundle, Vec<f64>)> {
    if driver.dim() != map.n {
        return Err(Error::InvalidArgument(format!("driver dimension {} differs from n = {}", driver.dim(), map.n)));
    }
    let grid = driver.grid();
    let width = (grid.steps() + 1) * map.m + 1;
    let mut rows = vec![0.0; driver.n_paths() * width];
    reduce::try_fill_rows(&mut rows, width, |p, row| {
        let r = drive_path(map, spec, grid, driver.path(p), x0).map_err(|e| match e {
            Error::NumericBlowup { step, .. } => Error::NumericBlowup { path: p, step },
            other => other,
        })?;
        row[..width - 1].copy_from_slice(&r.values);
        row[width - 1] = r.total_variation();
        Ok::<(), Error>(())
    })?;
    let mut values = Vec::with_capacity(driver.n_paths() * (width - 1));
    let mut l = Vec::with_capacity(driver.n_paths());
    for row in rows.chunks(width) {
        values.extend_from_slice(&row[..width - 1]);
        l.push(row[width - 1]);
    }
    let bundle = PathBundle::new(grid.clone(), map.m, driver.n_paths(), values, driver.seed(), PathKind::ForwardState)?;
    Ok((bundle, l))
}

/// Terminal values of the reflected SDE driven by Brownian paths `0..n_paths` of `seed`,
/// generated one path at a time so long horizons need no path storage.
pub fn reflected_terminal_values(
    map: &SdeMap,
    spec: &ReflectionSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    x0: &[f64],
) -> Result<Vec<f64>> {
    let sq: Vec<f64> = (0..grid.steps()).map(|i| grid.dt(i).sqrt()).collect();
    let stride = (grid.steps() + 1) * map.n;
    let mut out = vec![0.0; n_paths * map.m];
    reduce::try_fill_rows(&mut out, map.m, |p, row| {
        let mut w = vec![0.0; stride];
        paths::brownian_row(&sq, map.n, seed, p, &mut w);
        let r = drive_path(map, Some(spec), grid, &w, x0)?;
        row.copy_from_slice(r.last());
        Ok::<(), Error>(())
    })?;
    Ok(out)
}

/// Largest ratio `sup|phi(M) - phi(M')| / sup|M - M'|` over consecutive path pairs
/// `(2j, 2j + 1)` of the two bundles (input and image), ignoring coincident inputs.
pub fn pairwise_lipschitz(input: &PathBundle, image: &PathBundle) -> f64 {
    let pairs = input.n_paths().min(image.n_paths()) / 2;
    reduce::max_by(pairs, |j| {
        let din = paths::sup_distance(input.path(2 * j), input.path(2 * j + 1), input.dim());
        let dout = paths::sup_distance(image.path(2 * j), image.path(2 * j + 1), image.dim());
        if din > 0.0 {
            dout / din
        } else {
            0.0
        }
    })
}

/// Kolmogorov distance between the empirical law of `samples` and the uniform law on `[a, b]`.
pub fn sup_cdf_distance_uniform(samples: &[f64], a: f64, b: f64) -> f64 {
    let mut s: Vec<f64> = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut worst = 0.0f64;
    for (k, x) in s.iter().enumerate() {
        let u = ((x - a) / (b - a)).clamp(0.0, 1.0);
        worst = worst.max((k as f64 + 1.0) / n - u).max(u - k as f64 / n);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_examples() {
        let phi: Vec<f64> = (0..=10).map(|k| -(k as f64) / 10.0).collect();
        let r = skorokhod_1d(&phi, 0.0, None).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        for (k, l) in r.variation.iter().enumerate() {
            assert!((l - k as f64 / 10.0).abs() < 1e-12);
        }
        let phi: Vec<f64> = (0..=10).map(|k| 2.0 * k as f64 / 10.0).collect();
        let r = skorokhod_1d(&phi, 0.0, Some(1.0)).unwrap();
        for (k, v) in r.values.iter().enumerate() {
            assert!((v - (2.0 * k as f64 / 10.0).min(1.0)).abs() < 1e-12);
            if r.regulator[k] != 0.0 {
                assert_eq!(*v, 1.0);
            }
        }
        assert!(skorokhod_1d(&[2.0, 0.5], 0.0, Some(1.0)).is_err());
    }

    #[test]
    fn unconstrained_is_identity() {
        let spec = ReflectionSpec::unconstrained(2);
        let phi = vec![0.0, 0.0, 1.0, -3.0, 2.5, 7.0];
        let r = skorokhod_polyhedral(&phi, &spec).unwrap();
        assert_eq!(r.values, phi);
    }

    #[test]
    fn oblique_wedge_stays_inside() {
        let s = 0.5f64.sqrt();
        let spec = ReflectionSpec::new(
            2,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            vec![vec![(1.0 - 0.09f64).sqrt(), 0.3], vec![0.4, (1.0 - 0.16f64).sqrt()]],
        )
        .unwrap();
        assert!(spec.dominance_weights().is_some());
        assert!(spec.probe_conditions(3, 200).all());
        let mut alpha = vec![0.0; 2];
        let x = spec.project(&[-1.0, -2.0], &mut alpha, 0).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-12));
        assert!(alpha.iter().all(|a| *a > 0.0));
        let x = spec.project(&[-s, 1.0], &mut alpha, 0).unwrap();
        assert!(x[0].abs() < 1e-15 && x[1] > 1.0);
    }

    #[test]
    fn cycling_spec_hits_the_cap() {
        let v = [1.0 / 5f64.sqrt(), -2.0 / 5f64.sqrt()];
        let spec = ReflectionSpec::new(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], vec![v.to_vec(), vec![v[1], v[0]]])
            .unwrap();
        assert!(spec.dominance_weights().is_none());
        let mut alpha = vec![0.0; 2];
        assert!(matches!(spec.project(&[-1.0, -1.0], &mut alpha, 7), Err(Error::ProjectionNonConvergence { step: 7, cap: 100 })));
    }

    #[test]
    fn ks_distance_of_a_perfect_grid() {
        let s: Vec<f64> = (0..100).map(|k| (k as f64 + 0.5) / 100.0).collect();
        assert!((sup_cdf_distance_uniform(&s, 0.0, 1.0) - 0.005).abs() < 1e-12);
    }
}
