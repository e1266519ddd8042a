//! Problem descriptions.
//!
//! A problem is a terminal functional `xi`, a driver split as
//! `F(t, x, y, z) = f(t, x, y, z) + a ∘ |z|^2 + z g(t, x, y, z)` and, for coupled
//! systems, a forward volatility `sigma`. Coefficients see the whole path prefix.
//!
//! `z` is a `d x n` matrix stored row-major, `g` returns `n` numbers and `a` (if
//! present) is the diagonal quadratic coefficient, one entry per component of `y`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::paths::{PathFn, PathView};

pub type TerminalFn = Arc<dyn Fn(&PathView, &mut [f64]) + Send + Sync>;
/// `(t, path prefix, y, z, out)`.
pub type DriverFn = Arc<dyn Fn(f64, &PathView, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, current state, y_out, z_out)` for problems with a known Markovian solution.
pub type ClosedFormFn = Arc<dyn Fn(f64, &[f64], &mut [f64], &mut [f64]) + Send + Sync>;

/// Superquadratic growth function `l`, non-decreasing on `[0, inf)`.
#[derive(Clone)]
pub struct Growth {
    pub label: String,
    pub eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl Growth {
    pub fn new(label: impl Into<String>, eval: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { label: label.into(), eval: Arc::new(eval) }
    }

    pub fn at(&self, r: f64) -> f64 {
        (self.eval)(r)
    }
}

impl fmt::Debug for Growth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Growth({})", self.label)
    }
}

/// Declared constants. `k` bounds the squared Lipschitz constant of `xi`, `c` the squared
/// bounds and Lipschitz constants of `xi`, `f`, `g(., 0, 0)` and `sigma`, `c_g` the squared
/// Lipschitz constant of `g`. `k = inf` marks a non-Lipschitz terminal.
#[derive(Clone, Debug, PartialEq)]
pub struct Constants {
    pub k: f64,
    pub c: f64,
    pub c_g: f64,
    /// Bound on `|f|` used by the exponential transform.
    pub c_bar: Option<f64>,
    /// Ellipticity constant `M` of `sigma sigma^T`.
    pub ellipticity: f64,
    /// Whether `|xi|^2 <= c` is part of the declaration.
    pub terminal_bounded: bool,
}

impl Constants {
    pub fn lipschitz(k: f64, c: f64, c_g: f64) -> Self {
        Self { k, c, c_g, c_bar: None, ellipticity: 1.0, terminal_bounded: true }
    }
}

#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    /// Dimension of `Y`.
    pub d: usize,
    /// Dimension of the Brownian motion.
    pub n: usize,
    /// Dimension of the forward state.
    pub m: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub terminal: TerminalFn,
    pub f: Option<DriverFn>,
    pub g: Option<DriverFn>,
    pub diag_a: Option<Vec<f64>>,
    /// Forward volatility, `m x n`; `None` is the identity.
    pub sigma: Option<PathFn>,
    pub constants: Constants,
    pub growth: Option<Growth>,
    /// Coefficients depend on the path only through its current value.
    pub markovian: bool,
    pub closed_form: Option<ClosedFormFn>,
    pub reference: Option<String>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dims", &(self.d, self.n, self.m))
            .field("horizon", &self.horizon)
            .field("constants", &self.constants)
            .field("f", &self.f.is_some())
            .field("g", &self.g.is_some())
            .field("diag_a", &self.diag_a)
            .field("growth", &self.growth)
            .field("markovian", &self.markovian)
            .finish()
    }
}

impl ProblemSpec {
    /// Problem with zero driver and identity volatility.
    pub fn new(name: impl Into<String>, d: usize, n: usize, horizon: f64, terminal: TerminalFn, constants: Constants) -> Self {
        Self {
            name: name.into(),
            d,
            n,
            m: n,
            horizon,
            x0: vec![0.0; n],
            terminal,
            f: None,
            g: None,
            diag_a: None,
            sigma: None,
            constants,
            growth: None,
            markovian: false,
            closed_form: None,
            reference: None,
        }
    }

    fn param_err(&self, message: String) -> Error {
        Error::ProblemParameter { problem: self.name.clone(), message }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.m == 0 {
            return Err(self.param_err("dimensions must be positive".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(self.param_err(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.x0.len() != self.m {
            return Err(self.param_err(format!("x0 has length {}, expected {}", self.x0.len(), self.m)));
        }
        let c = &self.constants;
        for (label, v) in [("K", c.k), ("C", c.c), ("C_g", c.c_g), ("M", c.ellipticity)] {
            if v.is_nan() || v < 0.0 {
                return Err(self.param_err(format!("constant {label} must be non-negative, got {v}")));
            }
        }
        if let Some(a) = &self.diag_a {
            if a.len() != self.d {
                return Err(self.param_err(format!("diagonal coefficient has length {}, expected {}", a.len(), self.d)));
            }
        }
        if self.g.is_some() && self.sigma.is_none() && self.m != self.n {
            return Err(self.param_err("identity volatility needs m = n".into()));
        }
        Ok(())
    }

    /// `g` is identically zero and no quadratic term is present.
    pub fn driver_is_zero(&self) -> bool {
        self.f.is_none() && self.g.is_none() && self.diag_a.is_none()
    }

    pub fn eval_terminal(&self, path: &PathView, out: &mut [f64]) {
        (self.terminal)(path, out)
    }

    /// Writes `F(t, x, y, z)` into `out`.
    pub fn total_driver(&self, t: f64, path: &PathView, y: &[f64], z: &[f64], out: &mut [f64]) {
        let (d, n) = (self.d, self.n);
        match &self.f {
            Some(f) => f(t, path, y, z, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
        if let Some(a) = &self.diag_a {
            for i in 0..d {
                let row = &z[i * n..(i + 1) * n];
                out[i] += a[i] * row.iter().map(|v| v * v).sum::<f64>();
            }
        }
        if let Some(g) = &self.g {
            with_scratch(n, |gv| {
                g(t, path, y, z, gv);
                for i in 0..d {
                    out[i] += (0..n).map(|j| z[i * n + j] * gv[j]).sum::<f64>();
                }
            });
        }
    }

    /// Growth function used by the superquadratic route: the declared `l`, or the
    /// constant `C_g` for Lipschitz `g`.
    pub fn effective_growth(&self, r: f64) -> f64 {
        match (&self.g, &self.growth) {
            (None, _) => 0.0,
            (Some(_), Some(l)) => l.at(r),
            (Some(_), None) => self.constants.c_g,
        }
    }
}

/// Runs `f` with a zeroed scratch buffer of length `n`, on the stack when small.
pub fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    if n <= 16 {
        let mut buf = [0.0; 16];
        f(&mut buf[..n])
    } else {
        let mut buf = vec![0.0; n];
        f(&mut buf)
    }
}

/// Frobenius norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;

    fn spec() -> ProblemSpec {
        let term: TerminalFn = Arc::new(|p, out| out[0] = p.current()[0]);
        let mut s = ProblemSpec::new("t", 1, 2, 1.0, term, Constants::lipschitz(1.0, 1.0, 1.0));
        s.f = Some(Arc::new(|_, _, _, _, out| out[0] = 0.5));
        s.g = Some(Arc::new(|_, _, _, _, out: &mut [f64]| {
            out[0] = 1.0;
            out[1] = -2.0;
        }));
        s.diag_a = Some(vec![3.0]);
        s
    }

    #[test]
    fn total_driver_adds_all_terms() {
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let vals = [0.0, 0.0];
        let view = PathView::new(&vals, 2, &grid);
        let mut out = [0.0];
        spec().total_driver(0.0, &view, &[0.0], &[1.0, 2.0], &mut out);
        assert_eq!(out[0], 0.5 + 3.0 * 5.0 + (1.0 - 4.0));
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut s = spec();
        assert!(s.validate().is_ok());
        s.x0 = vec![0.0];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.diag_a = Some(vec![1.0, 1.0]);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.constants.k = -1.0;
        assert!(s.validate().is_err());
    }
}
