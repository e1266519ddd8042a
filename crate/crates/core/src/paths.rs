//! Path ensembles, path prefixes and forward Euler simulation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::reduce;
use crate::rng::NormalStream;

/// Path-dependent coefficient `(t, path prefix, out)`.
pub type PathFn = Arc<dyn Fn(f64, &PathView, &mut [f64]) + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Brownian,
    ForwardState,
    Generic,
}

/// The restriction of one path to the nodes `t_0, ..., t_i`.
#[derive(Clone, Copy, Debug)]
pub struct PathView<'a> {
    values: &'a [f64],
    dim: usize,
    grid: &'a TimeGrid,
}

impl<'a> PathView<'a> {
    /// `values` holds nodes `0..=i` for some `i`, `dim` numbers per node.
    pub fn new(values: &'a [f64], dim: usize, grid: &'a TimeGrid) -> Self {
        debug_assert!(dim > 0 && values.len() % dim == 0 && !values.is_empty());
        Self { values, dim, grid }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index of the last node in view.
    pub fn index(&self) -> usize {
        self.values.len() / self.dim - 1
    }

    pub fn time(&self) -> f64 {
        self.grid.t(self.index())
    }

    pub fn grid(&self) -> &'a TimeGrid {
        self.grid
    }

    pub fn at(&self, k: usize) -> &'a [f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn current(&self) -> &'a [f64] {
        self.at(self.index())
    }

    pub fn raw(&self) -> &'a [f64] {
        self.values
    }

    /// Shorter prefix ending at node `k`.
    pub fn truncate(&self, k: usize) -> PathView<'a> {
        PathView { values: &self.values[..(k + 1) * self.dim], dim: self.dim, grid: self.grid }
    }

    pub fn running_max(&self, coord: usize) -> f64 {
        (0..=self.index()).map(|k| self.at(k)[coord]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn running_min(&self, coord: usize) -> f64 {
        (0..=self.index()).map(|k| self.at(k)[coord]).fold(f64::INFINITY, f64::min)
    }

    /// Trapezoidal `int_0^t x_s^coord ds`.
    pub fn running_integral(&self, coord: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..self.index() {
            s += 0.5 * (self.at(k)[coord] + self.at(k + 1)[coord]) * self.grid.dt(k);
        }
        s
    }
}

/// Sup-norm distance between two equally long prefixes.
pub fn sup_distance(a: &[f64], b: &[f64], dim: usize) -> f64 {
    a.chunks(dim)
        .zip(b.chunks(dim))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `n_paths` paths on a common grid, stored path-major: `values[(p * (M+1) + i) * dim + k]`.
#[derive(Clone, Debug)]
pub struct PathBundle {
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    values: Vec<f64>,
    seed: u64,
    kind: PathKind,
}

impl PathBundle {
    pub fn new(grid: TimeGrid, dim: usize, n_paths: usize, values: Vec<f64>, seed: u64, kind: PathKind) -> Result<Self> {
        if dim == 0 || n_paths == 0 {
            return Err(Error::InvalidArgument("bundle needs dim > 0 and at least one path".into()));
        }
        let expect = n_paths * (grid.steps() + 1) * dim;
        if values.len() != expect {
            return Err(Error::InvalidArgument(format!("bundle expects {expect} values, got {}", values.len())));
        }
        Ok(Self { grid, dim, n_paths, values, seed, kind })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn stride(&self) -> usize {
        (self.grid.steps() + 1) * self.dim
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let s = self.stride();
        &self.values[p * s..(p + 1) * s]
    }

    pub fn value(&self, p: usize, i: usize) -> &[f64] {
        let o = p * self.stride() + i * self.dim;
        &self.values[o..o + self.dim]
    }

    /// Prefix of path `p` up to node `i`.
    pub fn view(&self, p: usize, i: usize) -> PathView<'_> {
        let o = p * self.stride();
        PathView::new(&self.values[o..o + (i + 1) * self.dim], self.dim, &self.grid)
    }

    /// Increment `x_{i+1} - x_i` of path `p`, coordinate `k`.
    #[inline]
    pub fn increment(&self, p: usize, i: usize, k: usize) -> f64 {
        let o = p * self.stride() + i * self.dim + k;
        self.values[o + self.dim] - self.values[o]
    }

    /// Every `factor`-th node of every path, on the correspondingly coarser grid.
    pub fn subsample(&self, factor: usize) -> Result<PathBundle> {
        let m = self.grid.steps();
        if factor == 0 || m % factor != 0 {
            return Err(Error::InvalidArgument(format!("factor {factor} does not divide {m} steps")));
        }
        let points: Vec<f64> = (0..=m / factor).map(|i| self.grid.t(i * factor)).collect();
        let grid = TimeGrid::from_points(points)?;
        let nodes = m / factor + 1;
        let mut values = Vec::with_capacity(self.n_paths * nodes * self.dim);
        for p in 0..self.n_paths {
            for i in 0..nodes {
                values.extend_from_slice(self.value(p, i * factor));
            }
        }
        PathBundle::new(grid, self.dim, self.n_paths, values, self.seed, self.kind)
    }

    /// Sub-bundle of the first `n` paths.
    pub fn take(&self, n: usize) -> PathBundle {
        let n = n.min(self.n_paths);
        PathBundle {
            grid: self.grid.clone(),
            dim: self.dim,
            n_paths: n,
            values: self.values[..n * self.stride()].to_vec(),
            seed: self.seed,
            kind: self.kind,
        }
    }
}

/// Brownian paths started at zero. The normal used for `(path, step, coord)` is number
/// `step * dim + coord` of the stream of `path`.
pub fn simulate_brownian(grid: &TimeGrid, n_paths: usize, dim: usize, seed: u64) -> Result<PathBundle> {
    if dim == 0 || n_paths == 0 {
        return Err(Error::InvalidArgument("need dim > 0 and at least one path".into()));
    }
    let m = grid.steps();
    let stride = (m + 1) * dim;
    let sq: Vec<f64> = (0..m).map(|i| grid.dt(i).sqrt()).collect();
    let mut values = vec![0.0; n_paths * stride];
    reduce::fill_rows(&mut values, stride, |p, row| brownian_row(&sq, dim, seed, p, row));
    PathBundle::new(grid.clone(), dim, n_paths, values, seed, PathKind::Brownian)
}

/// Brownian path number `p` of `simulate_brownian` written into `row` (starting at 0),
/// given the square roots of the step sizes. Lets callers stream paths one at a time.
pub fn brownian_row(sqrt_dt: &[f64], dim: usize, seed: u64, p: usize, row: &mut [f64]) {
    let mut s = NormalStream::new(seed, p as u64, 0);
    row[..dim].fill(0.0);
    for (i, sq) in sqrt_dt.iter().enumerate() {
        for k in 0..dim {
            row[(i + 1) * dim + k] = row[i * dim + k] + sq * s.next();
        }
    }
}

/// Euler scheme `X_{i+1} = X_i + drift(t_i, X) dt_i + vol(t_i, X) dW_i` driven by the
/// increments of `driver`. `vol` writes an `m x n` row-major matrix.
pub fn euler_forward(
    drift: &(dyn Fn(f64, &PathView, &mut [f64]) + Sync),
    vol: &(dyn Fn(f64, &PathView, &mut [f64]) + Sync),
    driver: &PathBundle,
    x0: &[f64],
) -> Result<PathBundle> {
    let grid = driver.grid();
    let (m_dim, n_dim, steps) = (x0.len(), driver.dim(), grid.steps());
    if m_dim == 0 {
        return Err(Error::InvalidArgument("empty initial state".into()));
    }
    let stride = (steps + 1) * m_dim;
    let mut values = vec![0.0; driver.n_paths() * stride];
    reduce::try_fill_rows(&mut values, stride, |p, row| {
        row[..m_dim].copy_from_slice(x0);
        let mut b = vec![0.0; m_dim];
        let mut s = vec![0.0; m_dim * n_dim];
        for i in 0..steps {
            let (head, tail) = row.split_at_mut((i + 1) * m_dim);
            let view = PathView::new(head, m_dim, grid);
            let t = grid.t(i);
            drift(t, &view, &mut b);
            vol(t, &view, &mut s);
            let dt = grid.dt(i);
            for a in 0..m_dim {
                let mut v = head[i * m_dim + a] + b[a] * dt;
                for j in 0..n_dim {
                    v += s[a * n_dim + j] * driver.increment(p, i, j);
                }
                if !v.is_finite() {
                    return Err(Error::NumericBlowup { path: p, step: i + 1 });
                }
                tail[a] = v;
            }
        }
        Ok(())
    })?;
    PathBundle::new(grid.clone(), m_dim, driver.n_paths(), values, driver.seed(), PathKind::ForwardState)
}

/// A path known on the nodes `0..=end_idx`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathPrefix {
    pub dim: usize,
    pub end_idx: usize,
    pub values: Vec<f64>,
}

impl PathPrefix {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.is_empty() || values.len() % dim != 0 {
            return Err(Error::InvalidArgument("prefix length must be a positive multiple of dim".into()));
        }
        let end_idx = values.len() / dim - 1;
        Ok(Self { dim, end_idx, values })
    }

    /// The first `end_idx + 1` nodes of a full path.
    pub fn from_path(path: &[f64], dim: usize, end_idx: usize) -> Result<Self> {
        if (end_idx + 1) * dim > path.len() {
            return Err(Error::InvalidArgument("prefix longer than path".into()));
        }
        Self::new(dim, path[..(end_idx + 1) * dim].to_vec())
    }

    /// Path frozen at `x` on `0..=end_idx`.
    pub fn constant(x: &[f64], end_idx: usize) -> Self {
        Self { dim: x.len(), end_idx, values: x.repeat(end_idx + 1) }
    }

    pub fn last(&self) -> &[f64] {
        &self.values[self.end_idx * self.dim..]
    }
}

/// A path known on the nodes `start_idx..start_idx + len`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSegment {
    pub dim: usize,
    pub start_idx: usize,
    pub values: Vec<f64>,
}

impl PathSegment {
    pub fn new(dim: usize, start_idx: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.is_empty() || values.len() % dim != 0 {
            return Err(Error::InvalidArgument("segment length must be a positive multiple of dim".into()));
        }
        Ok(Self { dim, start_idx, values })
    }

    pub fn end_idx(&self) -> usize {
        self.start_idx + self.values.len() / self.dim - 1
    }

    pub fn first(&self) -> &[f64] {
        &self.values[..self.dim]
    }

    pub fn last(&self) -> &[f64] {
        &self.values[self.values.len() - self.dim..]
    }

    /// `self` followed by `tail`; `tail` must start where `self` ends, at the same point.
    pub fn splice(&self, tail: &PathSegment) -> Result<PathSegment> {
        check_join(self.dim, self.end_idx(), self.last(), tail)?;
        let mut values = self.values.clone();
        values.extend_from_slice(&tail.values[self.dim..]);
        PathSegment::new(self.dim, self.start_idx, values)
    }
}

fn check_join(dim: usize, end_idx: usize, end_value: &[f64], tail: &PathSegment) -> Result<()> {
    if tail.dim != dim {
        return Err(Error::Splice(format!("dimension {} vs {}", dim, tail.dim)));
    }
    if tail.start_idx != end_idx {
        return Err(Error::Splice(format!("tail starts at node {}, prefix ends at node {}", tail.start_idx, end_idx)));
    }
    if tail.first() != end_value {
        return Err(Error::Splice(format!("value mismatch at node {end_idx}: {:?} vs {:?}", end_value, tail.first())));
    }
    Ok(())
}

/// Prefix on `[0, u]` followed by a segment on `[u, v]`, then held constant up to the
/// end of `grid`.
pub fn concat_paths(grid: &TimeGrid, prefix: &PathPrefix, tail: &PathSegment) -> Result<Vec<f64>> {
    check_join(prefix.dim, prefix.end_idx, prefix.last(), tail)?;
    let n_nodes = grid.steps() + 1;
    if tail.end_idx() >= n_nodes {
        return Err(Error::Splice(format!("segment ends at node {}, grid has {}", tail.end_idx(), n_nodes)));
    }
    let dim = prefix.dim;
    let mut out = Vec::with_capacity(n_nodes * dim);
    out.extend_from_slice(&prefix.values);
    out.extend_from_slice(&tail.values[dim..]);
    while out.len() < n_nodes * dim {
        out.extend_from_slice(tail.last());
    }
    Ok(out)
}
