//! Least-squares estimates of conditional expectations given the state at one grid time.
//!
//! A [`StepModel`] holds what is learnt from the cross-section of paths at time `t_i`
//! (standardisation, Gram factor or cell layout). A [`Design`] is the materialised
//! feature matrix for that cross-section and projects any number of target columns.
//! Projection coefficients plus the model form a [`Field`], which can be evaluated on
//! new paths.
//!
//! Two families are available: global polynomials in the current state (optionally with
//! running max and running integral of each coordinate), and piecewise fits on
//! per-coordinate quantile cells. Polynomials extrapolate badly in the tails, where cells
//! stay bounded by the data.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::paths::{PathBundle, PathView};
use crate::reduce;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    Polynomial,
    PolynomialWithPathFunctionals,
    Binned,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureBasis {
    pub kind: BasisKind,
    /// Total degree for polynomials, `0` or `1` within cells for the binned kind.
    pub degree: usize,
    pub running_max: bool,
    pub running_integral: bool,
    /// Cells per variable (binned kind).
    pub bins: usize,
}

impl FeatureBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self { kind: BasisKind::Polynomial, degree, running_max: false, running_integral: false, bins: 0 }
    }

    pub fn with_path_functionals(degree: usize, running_max: bool, running_integral: bool) -> Self {
        Self { kind: BasisKind::PolynomialWithPathFunctionals, degree, running_max, running_integral, bins: 0 }
    }

    pub fn binned(bins: usize, local_degree: usize) -> Self {
        Self { kind: BasisKind::Binned, degree: local_degree.min(1), running_max: false, running_integral: false, bins }
    }

    /// The basis only reads the current state.
    pub fn is_markovian(&self) -> bool {
        !(self.running_max || self.running_integral)
    }

    pub fn n_variables(&self, dim: usize) -> usize {
        dim * (1 + self.running_max as usize + self.running_integral as usize)
    }

    /// Number of regression coefficients per target column.
    pub fn n_features(&self, dim: usize) -> usize {
        let nv = self.n_variables(dim);
        match self.kind {
            BasisKind::Binned => self.bins.max(1).saturating_pow(nv as u32).saturating_mul(1 + self.degree * nv),
            _ => binomial(nv + self.degree, self.degree),
        }
    }

    /// Regression variables of a path prefix.
    pub fn variables(&self, view: &PathView, out: &mut [f64]) {
        let dim = view.dim();
        out[..dim].copy_from_slice(view.current());
        let mut o = dim;
        if self.running_max {
            for k in 0..dim {
                out[o + k] = view.running_max(k);
            }
            o += dim;
        }
        if self.running_integral {
            for k in 0..dim {
                out[o + k] = view.running_integral(k);
            }
        }
    }

    fn validate(&self, dim: usize, n_paths: usize) -> Result<()> {
        if self.kind == BasisKind::Binned && self.bins == 0 {
            return Err(Error::Basis("binned basis needs at least one bin".into()));
        }
        let p = self.n_features(dim);
        if p.saturating_mul(10) > n_paths {
            return Err(Error::Basis(format!("{p} features for {n_paths} paths; need at most n_paths / 10")));
        }
        Ok(())
    }
}

impl fmt::Display for FeatureBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            BasisKind::Polynomial => write!(f, "polynomial:{}", self.degree),
            BasisKind::PolynomialWithPathFunctionals => {
                write!(f, "path:{}", self.degree)?;
                if self.running_max {
                    write!(f, "+max")?;
                }
                if self.running_integral {
                    write!(f, "+integral")?;
                }
                Ok(())
            }
            BasisKind::Binned if self.degree == 0 => write!(f, "binned:{}", self.bins),
            BasisKind::Binned => write!(f, "binned-linear:{}", self.bins),
        }
    }
}

/// Parses `polynomial:D`, `path:D[+max][+integral]`, `binned:B`, `binned-linear:B`.
impl FromStr for FeatureBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Basis(format!("cannot parse basis `{s}`"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let mut parts = rest.split('+');
        let num: usize = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let extras: Vec<&str> = parts.collect();
        match kind.trim() {
            "polynomial" if extras.is_empty() => Ok(Self::polynomial(num)),
            "path" => {
                let mut b = Self::with_path_functionals(num, false, false);
                for e in extras {
                    match e {
                        "max" => b.running_max = true,
                        "integral" => b.running_integral = true,
                        _ => return Err(bad()),
                    }
                }
                Ok(b)
            }
            "binned" if extras.is_empty() => Ok(Self::binned(num, 0)),
            "binned-linear" if extras.is_empty() => Ok(Self::binned(num, 1)),
            _ => Err(bad()),
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let mut r: usize = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

/// Exponent tuples of total degree `1..=degree` in `nv` variables, graded order.
fn monomials(nv: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for total in 1..=degree {
        let mut cur = vec![0u8; nv];
        push_monomials(&mut out, &mut cur, 0, total);
    }
    out
}

fn push_monomials(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left as u8;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e as u8;
        push_monomials(out, cur, pos + 1, left - e);
    }
}

/// Column scale below which a feature is treated as constant.
const CONSTANT_TOL: f64 = 1e-10;
/// Smallest admissible squared pivot of the correlation-matrix factor.
const PIVOT_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
struct DenseModel {
    nv: usize,
    var_mean: Vec<f64>,
    var_scale: Vec<f64>,
    /// `false` for variables that are constant across paths at this time.
    var_live: Vec<bool>,
    monomials: Vec<Vec<u8>>,
    col_mean: Vec<f64>,
    col_scale: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl DenseModel {
    fn row(&self, vars: &[f64], out: &mut [f64]) {
        let mut z = [0.0; 32];
        for j in 0..self.nv {
            z[j] = if self.var_live[j] { (vars[j] - self.var_mean[j]) / self.var_scale[j] } else { 0.0 };
        }
        for (c, e) in self.monomials.iter().enumerate() {
            let mut v = 1.0;
            for (j, &p) in e.iter().enumerate() {
                for _ in 0..p {
                    v *= z[j];
                }
            }
            out[c] = (v - self.col_mean[c]) / self.col_scale[c];
        }
    }
}

#[derive(Clone, Debug)]
struct Cell {
    count: usize,
    mean: Vec<f64>,
    /// Inverse of the centred Gram matrix divided by `count`, when a local slope is fitted.
    inv: Option<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
struct CellModel {
    nv: usize,
    /// Interior edges per variable.
    edges: Vec<Vec<f64>>,
    strides: Vec<usize>,
    cells: Vec<Cell>,
    local: bool,
}

impl CellModel {
    fn locate(&self, vars: &[f64]) -> usize {
        let mut idx = 0;
        for j in 0..self.nv {
            let b = self.edges[j].partition_point(|&e| e <= vars[j]);
            idx += b * self.strides[j];
        }
        idx
    }

    fn width(&self) -> usize {
        1 + if self.local { self.nv } else { 0 }
    }
}

#[derive(Clone, Debug)]
enum ModelKind {
    Dense(DenseModel),
    Cells(CellModel),
}

/// What is learnt from the cross-section of paths at one grid time.
#[derive(Clone, Debug)]
pub struct StepModel {
    basis: FeatureBasis,
    index: usize,
    kind: ModelKind,
}

fn collect_variables(basis: &FeatureBasis, bundle: &PathBundle, i: usize) -> (Vec<f64>, usize) {
    let nv = basis.n_variables(bundle.dim());
    let mut vars = vec![0.0; bundle.n_paths() * nv];
    reduce::fill_rows(&mut vars, nv, |p, row| basis.variables(&bundle.view(p, i), row));
    (vars, nv)
}

impl StepModel {
    /// Learns the feature layout at node `i` from every path of `bundle`.
    pub fn fit(basis: &FeatureBasis, bundle: &PathBundle, i: usize) -> Result<Self> {
        let n = bundle.n_paths();
        basis.validate(bundle.dim(), n)?;
        let (vars, nv) = collect_variables(basis, bundle, i);
        if nv > 32 {
            return Err(Error::Basis(format!("{nv} regression variables; at most 32 supported")));
        }
        let kind = match basis.kind {
            BasisKind::Binned => ModelKind::Cells(fit_cells(basis, &vars, nv, n)?),
            _ => ModelKind::Dense(fit_dense(basis, &vars, nv, n, i)?),
        };
        Ok(Self { basis: basis.clone(), index: i, kind })
    }

    pub fn basis(&self) -> &FeatureBasis {
        &self.basis
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// Coefficients per target column.
    pub fn n_coef(&self) -> usize {
        match &self.kind {
            ModelKind::Dense(m) => 1 + m.monomials.len(),
            ModelKind::Cells(m) => m.cells.len() * m.width(),
        }
    }

    /// Materialises the features of every path of `bundle` at the model's node.
    pub fn design(self: &Arc<Self>, bundle: &PathBundle) -> Design {
        let (vars, nv) = collect_variables(&self.basis, bundle, self.index);
        let n = bundle.n_paths();
        let data = match &self.kind {
            ModelKind::Dense(m) => {
                let p = m.monomials.len();
                let mut x = vec![0.0; n * p];
                reduce::fill_rows(&mut x, p, |r, row| m.row(&vars[r * nv..(r + 1) * nv], row));
                DesignData::Dense { x, p }
            }
            ModelKind::Cells(m) => {
                let cell: Vec<u32> = (0..n).map(|r| m.locate(&vars[r * nv..(r + 1) * nv]) as u32).collect();
                DesignData::Cells { cell, vars, nv }
            }
        };
        Design { model: Arc::clone(self), n, data }
    }

    fn eval_coef(&self, vars: &[f64], coef: &[f64], width: usize, out: &mut [f64]) {
        match &self.kind {
            ModelKind::Dense(m) => {
                let p = m.monomials.len();
                let mut row = [0.0; 512];
                let row = &mut row[..p];
                m.row(vars, row);
                let stride = 1 + p;
                for c in 0..width {
                    let w = &coef[c * stride..(c + 1) * stride];
                    out[c] = w[0] + row.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            ModelKind::Cells(m) => {
                let cw = m.width();
                let stride = m.cells.len() * cw;
                let idx = m.locate(vars);
                let cell = &m.cells[idx];
                for c in 0..width {
                    let w = &coef[c * stride + idx * cw..c * stride + (idx + 1) * cw];
                    let mut v = w[0];
                    if m.local {
                        for j in 0..m.nv {
                            v += w[1 + j] * (vars[j] - cell.mean[j]);
                        }
                    }
                    out[c] = v;
                }
            }
        }
    }
}

fn fit_dense(basis: &FeatureBasis, vars: &[f64], nv: usize, n: usize, i: usize) -> Result<DenseModel> {
    let nf = n as f64;
    let sums = reduce::sum_vec_by(n, nv, |r, acc| {
        for j in 0..nv {
            acc[j] += vars[r * nv + j];
        }
    });
    let var_mean: Vec<f64> = sums[..nv].iter().map(|s| s / nf).collect();
    let sq = reduce::sum_vec_by(n, nv, |r, acc| {
        for j in 0..nv {
            let d = vars[r * nv + j] - var_mean[j];
            acc[j] += d * d;
        }
    });
    let mut var_scale = vec![1.0; nv];
    let mut var_live = vec![false; nv];
    for j in 0..nv {
        let sd = (sq[j] / nf).sqrt();
        if sd > CONSTANT_TOL * (1.0 + var_mean[j].abs()) {
            var_scale[j] = sd;
            var_live[j] = true;
        }
    }
    let mut probe = DenseModel {
        nv,
        var_mean,
        var_scale,
        var_live,
        monomials: monomials(nv, basis.degree),
        col_mean: Vec::new(),
        col_scale: Vec::new(),
        chol: None,
    };
    // Monomials touching a constant variable are constant columns.
    probe.monomials.retain(|e| e.iter().enumerate().all(|(j, &p)| p == 0 || probe.var_live[j]));
    let p = probe.monomials.len();
    probe.col_mean = vec![0.0; p];
    probe.col_scale = vec![1.0; p];
    if p == 0 {
        return Ok(probe);
    }
    let mut raw = vec![0.0; n * p];
    reduce::fill_rows(&mut raw, p, |r, row| probe.row(&vars[r * nv..(r + 1) * nv], row));
    let col_sum = reduce::sum_vec_by(n, p, |r, acc| {
        for c in 0..p {
            acc[c] += raw[r * p + c];
        }
    });
    let col_mean: Vec<f64> = col_sum.iter().map(|s| s / nf).collect();
    let col_sq = reduce::sum_vec_by(n, p, |r, acc| {
        for c in 0..p {
            let d = raw[r * p + c] - col_mean[c];
            acc[c] += d * d;
        }
    });
    let mut keep = Vec::new();
    for c in 0..p {
        if (col_sq[c] / nf).sqrt() > CONSTANT_TOL {
            keep.push(c);
        }
    }
    probe.monomials = keep.iter().map(|&c| probe.monomials[c].clone()).collect();
    probe.col_mean = keep.iter().map(|&c| col_mean[c]).collect();
    probe.col_scale = keep.iter().map(|&c| (col_sq[c] / nf).sqrt()).collect();
    let p = probe.monomials.len();
    if p == 0 {
        return Ok(probe);
    }
    let mut x = vec![0.0; n * p];
    reduce::fill_rows(&mut x, p, |r, row| probe.row(&vars[r * nv..(r + 1) * nv], row));
    let gram = reduce::sum_vec_by(n, p * p, |r, acc| {
        let row = &x[r * p..(r + 1) * p];
        for a in 0..p {
            for b in a..p {
                acc[a * p + b] += row[a] * row[b];
            }
        }
    });
    let mut g = DMatrix::<f64>::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            g[(a, b)] = gram[a * p + b] / nf;
            g[(b, a)] = g[(a, b)];
        }
    }
    let chol = nalgebra::Cholesky::new(g)
        .ok_or_else(|| Error::Basis(format!("feature Gram matrix at node {i} is not positive definite")))?;
    let l = chol.l_dirty();
    for a in 0..p {
        if l[(a, a)] * l[(a, a)] < PIVOT_TOL {
            return Err(Error::Basis(format!(
                "features are collinear at node {i} (monomial {:?}, pivot {:.3e})",
                probe.monomials[a],
                l[(a, a)] * l[(a, a)]
            )));
        }
    }
    probe.chol = Some(chol);
    Ok(probe)
}

fn fit_cells(basis: &FeatureBasis, vars: &[f64], nv: usize, n: usize) -> Result<CellModel> {
    let mut edges = Vec::with_capacity(nv);
    for j in 0..nv {
        let mut col: Vec<f64> = (0..n).map(|r| vars[r * nv + j]).collect();
        col.sort_by(f64::total_cmp);
        let mut e: Vec<f64> = (1..basis.bins).map(|b| col[b * n / basis.bins]).collect();
        e.dedup();
        // Cells must be non-empty: an edge equal to the minimum would leave cell 0 empty.
        e.retain(|&v| v > col[0]);
        edges.push(e);
    }
    let mut strides = vec![1usize; nv];
    let mut total = 1usize;
    for j in 0..nv {
        strides[j] = total;
        total *= edges[j].len() + 1;
    }
    let mut model = CellModel { nv, edges, strides, cells: Vec::new(), local: basis.degree == 1 };
    let assign: Vec<usize> = (0..n).map(|r| model.locate(&vars[r * nv..(r + 1) * nv])).collect();
    let mut count = vec![0usize; total];
    let mut sum = vec![0.0; total * nv];
    for r in 0..n {
        let c = assign[r];
        count[c] += 1;
        for j in 0..nv {
            sum[c * nv + j] += vars[r * nv + j];
        }
    }
    let mut cells: Vec<Cell> = (0..total)
        .map(|c| Cell {
            count: count[c],
            mean: (0..nv).map(|j| if count[c] > 0 { sum[c * nv + j] / count[c] as f64 } else { 0.0 }).collect(),
            inv: None,
        })
        .collect();
    if model.local {
        let mut gram = vec![0.0; total * nv * nv];
        for r in 0..n {
            let c = assign[r];
            for a in 0..nv {
                let da = vars[r * nv + a] - cells[c].mean[a];
                for b in 0..nv {
                    gram[c * nv * nv + a * nv + b] += da * (vars[r * nv + b] - cells[c].mean[b]);
                }
            }
        }
        for (c, cell) in cells.iter_mut().enumerate() {
            if cell.count < 4 * (nv + 1) {
                continue;
            }
            let g = DMatrix::from_row_slice(nv, nv, &gram[c * nv * nv..(c + 1) * nv * nv]) / cell.count as f64;
            let scale = (0..nv).map(|a| g[(a, a)]).fold(0.0, f64::max);
            if scale <= 0.0 {
                continue;
            }
            if let Some(ch) = nalgebra::Cholesky::new(g.clone()) {
                let l = ch.l_dirty();
                if (0..nv).all(|a| l[(a, a)] * l[(a, a)] > PIVOT_TOL * scale) {
                    cell.inv = Some(ch.inverse());
                }
            }
        }
    }
    model.cells = cells;
    Ok(model)
}

enum DesignData {
    Dense { x: Vec<f64>, p: usize },
    Cells { cell: Vec<u32>, vars: Vec<f64>, nv: usize },
}

/// Features of every path at one node.
pub struct Design {
    model: Arc<StepModel>,
    n: usize,
    data: DesignData,
}

/// Projection coefficients and the mean squared residual, summed over target columns.
#[derive(Clone, Debug)]
pub struct Projection {
    pub coef: Vec<f64>,
    pub width: usize,
    pub residual: f64,
}

impl Design {
    pub fn model(&self) -> &Arc<StepModel> {
        &self.model
    }

    pub fn n_paths(&self) -> usize {
        self.n
    }

    /// Projects `targets` (`n x width`, row-major) and writes fitted values to `fitted`.
    pub fn project(&self, targets: &[f64], width: usize, fitted: &mut [f64]) -> Projection {
        let n = self.n;
        let nf = n as f64;
        let coef = match (&self.data, &self.model.kind) {
            (DesignData::Dense { x, p }, ModelKind::Dense(m)) => {
                let p = *p;
                let stride = 1 + p;
                let acc = reduce::sum_vec_by(n, width * stride, |r, acc| {
                    let row = &x[r * p..(r + 1) * p];
                    for c in 0..width {
                        let y = targets[r * width + c];
                        acc[c * stride] += y;
                        for a in 0..p {
                            acc[c * stride + 1 + a] += row[a] * y;
                        }
                    }
                });
                let mut coef = vec![0.0; width * stride];
                for c in 0..width {
                    coef[c * stride] = acc[c * stride] / nf;
                    if let Some(ch) = &m.chol {
                        let rhs = DVector::from_iterator(p, (0..p).map(|a| acc[c * stride + 1 + a] / nf));
                        let beta = ch.solve(&rhs);
                        coef[c * stride + 1..(c + 1) * stride].copy_from_slice(beta.as_slice());
                    }
                }
                reduce::fill_rows(fitted, width, |r, out| {
                    let row = &x[r * p..(r + 1) * p];
                    for c in 0..width {
                        let w = &coef[c * stride..(c + 1) * stride];
                        out[c] = w[0] + row.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                coef
            }
            (DesignData::Cells { cell, vars, nv }, ModelKind::Cells(m)) => {
                let nv = *nv;
                let cw = m.width();
                let nc = m.cells.len();
                let stride = nc * cw;
                let mut sums = vec![0.0; width * nc * cw];
                // Pass 1: cell means of the targets.
                for r in 0..n {
                    let k = cell[r] as usize;
                    for c in 0..width {
                        sums[c * stride + k * cw] += targets[r * width + c];
                    }
                }
                let mut coef = vec![0.0; width * stride];
                for c in 0..width {
                    for k in 0..nc {
                        let cnt = m.cells[k].count;
                        if cnt > 0 {
                            coef[c * stride + k * cw] = sums[c * stride + k * cw] / cnt as f64;
                        }
                    }
                }
                if m.local {
                    for r in 0..n {
                        let k = cell[r] as usize;
                        let mean = &m.cells[k].mean;
                        for c in 0..width {
                            let dy = targets[r * width + c] - coef[c * stride + k * cw];
                            for j in 0..nv {
                                sums[c * stride + k * cw + 1 + j] += (vars[r * nv + j] - mean[j]) * dy;
                            }
                        }
                    }
                    for c in 0..width {
                        for k in 0..nc {
                            if let Some(inv) = &m.cells[k].inv {
                                let cnt = m.cells[k].count as f64;
                                let rhs = DVector::from_iterator(nv, (0..nv).map(|j| sums[c * stride + k * cw + 1 + j] / cnt));
                                let beta = inv * rhs;
                                for j in 0..nv {
                                    coef[c * stride + k * cw + 1 + j] = beta[j];
                                }
                            }
                        }
                    }
                }
                for r in 0..n {
                    let k = cell[r] as usize;
                    let mean = &m.cells[k].mean;
                    for c in 0..width {
                        let w = &coef[c * stride + k * cw..c * stride + (k + 1) * cw];
                        let mut v = w[0];
                        if m.local {
                            for j in 0..nv {
                                v += w[1 + j] * (vars[r * nv + j] - mean[j]);
                            }
                        }
                        fitted[r * width + c] = v;
                    }
                }
                coef
            }
            _ => unreachable!("design built from its own model"),
        };
        let residual = reduce::sum_by(n, |r| {
            (0..width).map(|c| (targets[r * width + c] - fitted[r * width + c]).powi(2)).sum::<f64>()
        }) / nf;
        Projection { coef, width, residual }
    }
}

/// A fitted conditional-expectation map at one node.
#[derive(Clone, Debug)]
pub struct Field {
    model: Arc<StepModel>,
    coef: Vec<f64>,
    width: usize,
}

impl Field {
    pub fn new(model: Arc<StepModel>, projection: &Projection) -> Self {
        Self { model, coef: projection.coef.clone(), width: projection.width }
    }

    /// Coefficient-wise `self + s * other`; both must share the model.
    pub fn axpy(&self, s: f64, other: &Field) -> Field {
        debug_assert!(Arc::ptr_eq(&self.model, &other.model) && self.width == other.width);
        Field {
            model: Arc::clone(&self.model),
            coef: self.coef.iter().zip(&other.coef).map(|(a, b)| a + s * b).collect(),
            width: self.width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn model(&self) -> &Arc<StepModel> {
        &self.model
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }

    /// Evaluates the field on a path prefix ending at the model's node.
    pub fn eval(&self, view: &PathView, out: &mut [f64]) {
        let basis = &self.model.basis;
        let nv = basis.n_variables(view.dim());
        let mut vars = [0.0; 32];
        basis.variables(view, &mut vars[..nv]);
        self.model.eval_coef(&vars[..nv], &self.coef, self.width, out);
    }
}

/// Uncentred explained sum of squares `|P y|^2 / n` of the least-squares projection of
/// each target column onto the span of `columns` (`n x p`, row-major). Rank deficiency
/// is handled by discarding small eigen-directions of the Gram matrix.
pub fn explained_sum_of_squares(columns: &[f64], p: usize, targets: &[f64], width: usize) -> Vec<f64> {
    let n = columns.len() / p;
    let nf = n as f64;
    let gram = reduce::sum_vec_by(n, p * p + p * width, |r, acc| {
        let row = &columns[r * p..(r + 1) * p];
        for a in 0..p {
            for b in 0..p {
                acc[a * p + b] += row[a] * row[b];
            }
            for c in 0..width {
                acc[p * p + a * width + c] += row[a] * targets[r * width + c];
            }
        }
    });
    let g = DMatrix::from_row_slice(p, p, &gram[..p * p]) / nf;
    let eig = nalgebra::SymmetricEigen::new(g);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    (0..width)
        .map(|c| {
            let b = DVector::from_iterator(p, (0..p).map(|a| gram[p * p + a * width + c] / nf));
            // |P y|^2 / n = b^T G^+ b.
            let mut s = 0.0;
            for (k, &lam) in eig.eigenvalues.iter().enumerate() {
                if lam > 1e-10 * top {
                    let proj = eig.eigenvectors.column(k).dot(&b);
                    s += proj * proj / lam;
                }
            }
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::paths::{simulate_brownian, PathKind};

    #[test]
    fn basis_parsing_round_trips() {
        for s in ["polynomial:2", "path:3+max+integral", "binned:32", "binned-linear:8", "path:1+max"] {
            let b: FeatureBasis = s.parse().unwrap();
            assert_eq!(b.to_string(), s);
        }
        assert!("cubic:3".parse::<FeatureBasis>().is_err());
        assert!("polynomial:x".parse::<FeatureBasis>().is_err());
    }

    #[test]
    fn feature_counts() {
        assert_eq!(FeatureBasis::polynomial(2).n_features(1), 3);
        assert_eq!(FeatureBasis::polynomial(2).n_features(2), 6);
        assert_eq!(FeatureBasis::with_path_functionals(1, true, true).n_features(1), 4);
        assert_eq!(FeatureBasis::binned(10, 1).n_features(1), 20);
        assert_eq!(monomials(2, 2).len(), 5);
    }

    #[test]
    fn too_many_features_is_a_basis_error() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let b = simulate_brownian(&grid, 50, 1, 1).unwrap();
        assert!(matches!(StepModel::fit(&FeatureBasis::polynomial(5), &b, 1), Err(Error::Basis(_))));
    }

    #[test]
    fn polynomial_projection_is_exact_on_the_span() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let b = simulate_brownian(&grid, 1000, 1, 2).unwrap();
        let model = Arc::new(StepModel::fit(&FeatureBasis::polynomial(2), &b, 1).unwrap());
        let design = model.design(&b);
        let targets: Vec<f64> = (0..1000).map(|p| 1.0 - 2.0 * b.value(p, 1)[0] + 0.5 * b.value(p, 1)[0].powi(2)).collect();
        let mut fitted = vec![0.0; 1000];
        let proj = design.project(&targets, 1, &mut fitted);
        assert!(proj.residual < 1e-20);
        let field = Field::new(Arc::clone(&model), &proj);
        let grid2 = TimeGrid::uniform(1.0, 2).unwrap();
        let vals = [0.0, 3.0, 3.0];
        let mut out = [0.0];
        field.eval(&PathView::new(&vals[..2], 1, &grid2), &mut out);
        assert!((out[0] - (1.0 - 6.0 + 4.5)).abs() < 1e-9);
    }

    #[test]
    fn constant_state_gives_the_mean() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let b = simulate_brownian(&grid, 500, 1, 2).unwrap();
        let model = Arc::new(StepModel::fit(&FeatureBasis::polynomial(3), &b, 0).unwrap());
        assert_eq!(model.n_coef(), 1);
        let targets: Vec<f64> = (0..500).map(|p| p as f64).collect();
        let mut fitted = vec![0.0; 500];
        model.design(&b).project(&targets, 1, &mut fitted);
        assert!(fitted.iter().all(|&v| (v - 249.5).abs() < 1e-12));
    }

    #[test]
    fn cells_fit_piecewise_means() {
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let n = 4000;
        let mut vals = vec![0.0; n * 2];
        for p in 0..n {
            vals[2 * p + 1] = p as f64 / n as f64;
        }
        let b = PathBundle::new(grid, 1, n, vals, 0, PathKind::Generic).unwrap();
        let model = Arc::new(StepModel::fit(&FeatureBasis::binned(4, 1), &b, 1).unwrap());
        let targets: Vec<f64> = (0..n).map(|p| 2.0 * b.value(p, 1)[0] + 1.0).collect();
        let mut fitted = vec![0.0; n];
        let proj = model.design(&b).project(&targets, 1, &mut fitted);
        assert!(proj.residual < 1e-20);
        let field = Field::new(model, &proj);
        let g = TimeGrid::uniform(1.0, 1).unwrap();
        let v = [0.0, 0.1];
        let mut out = [0.0];
        field.eval(&PathView::new(&v, 1, &g), &mut out);
        assert!((out[0] - 1.2).abs() < 1e-9);
    }

    #[test]
    fn collinear_variables_are_rejected() {
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let n = 200;
        let mut vals = vec![0.0; n * 4];
        for p in 0..n {
            let x = (p as f64 * 0.37).sin();
            vals[4 * p + 2] = x;
            vals[4 * p + 3] = 2.0 * x;
        }
        let b = PathBundle::new(grid, 2, n, vals, 0, PathKind::Generic).unwrap();
        assert!(matches!(StepModel::fit(&FeatureBasis::polynomial(1), &b, 1), Err(Error::Basis(_))));
    }

    #[test]
    fn explained_sum_handles_rank_deficiency() {
        let n = 100;
        let mut cols = vec![0.0; n * 3];
        let mut t = vec![0.0; n];
        for r in 0..n {
            let x = r as f64 / 10.0;
            cols[3 * r] = 1.0;
            cols[3 * r + 1] = x;
            cols[3 * r + 2] = 2.0 * x;
            t[r] = 3.0 + x;
        }
        let ess = explained_sum_of_squares(&cols, 3, &t, 1)[0];
        let total = t.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((ess - total).abs() < 1e-8 * total);
    }
}
