//! Reference values that do not touch the solver crate.
//!
//! Everything here is deterministic: Gaussian expectations by Gauss-Hermite quadrature,
//! the log-transform reference for one-dimensional quadratic problems, level bounds by
//! repeated squaring of an affine map, and a brute-force scan for the partition size.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

pub const DEFAULT_ORDER: usize = 64;
/// Accepted change when the quadrature order is doubled.
pub const SELF_CHECK_TOL: f64 = 1e-8;
pub const FD_STEP: f64 = 1e-5;
/// Accepted gap between the central difference at `h` and at `h/2`.
pub const FD_CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{what}: doubling the order changed the value by {delta:.3e}")]
    NotConverged { what: &'static str, delta: f64 },
    #[error("invalid oracle argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    ClosedForm,
    GaussHermite,
    BruteForce,
    Recursion,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ClosedForm => "closed-form",
            Method::GaussHermite => "gauss-hermite",
            Method::BruteForce => "brute-force",
            Method::Recursion => "recursion",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    pub method: Method,
    /// Quadrature order, number of recursion steps, or scan length.
    pub order: u64,
    /// Size of the self-convergence change that was accepted (0 when exact).
    pub self_check: f64,
}

/// Nodes and weights for `E[h(U)]`, `U ~ N(0,1)`, by Golub-Welsch on the Jacobi matrix of
/// the probabilists' Hermite polynomials. Weights sum to one.
pub fn gauss_hermite(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return Err(OracleError::InvalidArgument("order must be positive".into()));
    }
    let mut j = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> =
        (0..order).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrise: the spectrum is symmetric about zero and the weights are even.
    let n = pairs.len();
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let k = n - 1 - i;
        nodes[i] = 0.5 * (pairs[i].0 - pairs[k].0);
        weights[i] = 0.5 * (pairs[i].1 + pairs[k].1);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((nodes, weights))
}

fn gaussian_mean(h: &dyn Fn(f64) -> f64, x: f64, scale: f64, order: usize) -> Result<f64> {
    let (nodes, weights) = gauss_hermite(order)?;
    Ok(nodes.iter().zip(&weights).map(|(u, w)| w * h(x + scale * u)).sum())
}

fn self_checked(what: &'static str, f: impl Fn(usize) -> Result<f64>) -> Result<OracleResult> {
    let v = f(DEFAULT_ORDER)?;
    let v2 = f(2 * DEFAULT_ORDER)?;
    let delta = (v2 - v).abs();
    if !(delta < SELF_CHECK_TOL * v2.abs().max(1.0)) {
        return Err(OracleError::NotConverged { what, delta });
    }
    Ok(OracleResult { value: v2, method: Method::GaussHermite, order: 2 * DEFAULT_ORDER as u64, self_check: delta })
}

/// `E[h(x + sqrt(T - t) U)]`, i.e. `E[h(W_T) | W_t = x]`.
pub fn quadrature_conditional_expectation(h: &dyn Fn(f64) -> f64, t: f64, x: f64, horizon: f64) -> Result<OracleResult> {
    if !(t <= horizon && t >= 0.0 && x.is_finite()) {
        return Err(OracleError::InvalidArgument(format!("need 0 <= t <= T, got t = {t}, T = {horizon}")));
    }
    let scale = (horizon - t).sqrt();
    self_checked("conditional expectation", |order| gaussian_mean(h, x, scale, order))
}

/// `log E[exp(2a xi(W_T)) | W_t = x] / (2a)`.
fn log_transform_y(xi: &dyn Fn(f64) -> f64, a: f64, t: f64, x: f64, horizon: f64) -> Result<(f64, f64)> {
    let scale = (horizon - t).sqrt();
    let r = self_checked("log-transform mean", |order| gaussian_mean(&|w| (2.0 * a * xi(w)).exp(), x, scale, order))?;
    Ok((r.value.ln() / (2.0 * a), r.self_check))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColeHopfReference {
    pub y: OracleResult,
    /// Derivative of the `Y` field in `x`, Richardson-extrapolated.
    pub z: OracleResult,
}

/// Reference `(Y, Z)` at `(t, x)` for `dY = -a Z^2 dt + Z dW`, `Y_T = xi(W_T)`.
pub fn cole_hopf_reference(xi: &dyn Fn(f64) -> f64, a: f64, t: f64, x: f64, horizon: f64) -> Result<ColeHopfReference> {
    if a == 0.0 || !a.is_finite() {
        return Err(OracleError::InvalidArgument(format!("a must be finite and nonzero, got {a}")));
    }
    if !(t <= horizon && t >= 0.0 && x.is_finite()) {
        return Err(OracleError::InvalidArgument(format!("need 0 <= t <= T, got t = {t}, T = {horizon}")));
    }
    let field = |x: f64| log_transform_y(xi, a, t, x, horizon).map(|v| v.0);
    let (y, y_check) = log_transform_y(xi, a, t, x, horizon)?;
    let central = |h: f64| -> Result<f64> { Ok((field(x + h)? - field(x - h)?) / (2.0 * h)) };
    let d1 = central(FD_STEP)?;
    let d2 = central(0.5 * FD_STEP)?;
    let gap = (d1 - d2).abs();
    if !(gap < FD_CHECK_TOL * d2.abs().max(1.0)) {
        return Err(OracleError::NotConverged { what: "finite-difference Z", delta: gap });
    }
    Ok(ColeHopfReference {
        y: OracleResult { value: y, method: Method::GaussHermite, order: 2 * DEFAULT_ORDER as u64, self_check: y_check },
        z: OracleResult { value: (4.0 * d2 - d1) / 3.0, method: Method::GaussHermite, order: 2 * DEFAULT_ORDER as u64, self_check: gap },
    })
}

/// `K_j` for `K_j = (K_{j-1} + C delta) e^{2(C+1) delta + 4 C_g delta^2}`, `K_0 = K`,
/// by repeated squaring of the affine map.
pub fn level_by_squaring(k: f64, c: f64, c_g: f64, delta: f64, j: u64) -> OracleResult {
    let m = (2.0 * (c + 1.0) * delta + 4.0 * c_g * delta * delta).exp();
    // x -> m x + b
    let step = (m, c * delta * m);
    let compose = |f: (f64, f64), g: (f64, f64)| (f.0 * g.0, f.0 * g.1 + f.1);
    let mut acc = (1.0, 0.0);
    let mut base = step;
    let mut e = j;
    while e > 0 {
        if e & 1 == 1 {
            acc = compose(base, acc);
        }
        base = compose(base, base);
        e >>= 1;
    }
    OracleResult { value: acc.0 * k + acc.1, method: Method::Recursion, order: j, self_check: 0.0 }
}

/// `K_N` with `delta = T/N`, then Richardson in `1/N`: `2 K(2N) - K(N)`.
pub fn level_limit(k: f64, c: f64, c_g: f64, horizon: f64, n: u64) -> OracleResult {
    let coarse = level_by_squaring(k, c, c_g, horizon / n as f64, n).value;
    let fine = level_by_squaring(k, c, c_g, horizon / (2 * n) as f64, 2 * n).value;
    OracleResult { value: 2.0 * fine - coarse, method: Method::Recursion, order: 2 * n, self_check: (fine - coarse).abs() }
}

/// First admissible `N` found by walking `N = 2, 3, ...` with both interval conditions
/// evaluated at the level cap. `None` if nothing up to `max_n` passes.
pub fn brute_force_levels(k: f64, c: f64, c_g: f64, horizon: f64, max_n: u64) -> Option<u64> {
    let r = (k + c / (2.0 * (c + 1.0))) * (4.0 * (c + 1.0) * horizon + 4.0 * c_g * horizon * horizon).exp();
    (2..=max_n).find(|&n| interval_ok(r, c, c_g, horizon / n as f64))
}

/// Both interval conditions, strict, with the same `1e-12` band the planner uses.
pub fn interval_ok(k: f64, c: f64, c_g: f64, eps: f64) -> bool {
    let contraction = if c_g == 0.0 {
        0.0
    } else {
        c_g * (6.0 * (2.0 * (c + 1.0) * eps).exp() * (k + c * eps) + 1.0) * (eps + 1.0) * eps
    };
    let decoupling = if c_g == 0.0 {
        0.0
    } else {
        8.0 * (2.0 * (c + 1.0) * eps + 4.0 * c_g * eps * eps).exp() * (k + c * eps) * c_g * eps
    };
    contraction.max(decoupling) < 1.0 - 1e-12
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one_and_nodes_are_symmetric() {
        let (x, w) = gauss_hermite(64).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for i in 0..64 {
            assert_eq!(x[i], -x[63 - i]);
        }
    }

    #[test]
    fn squaring_matches_the_loop() {
        let (k, c, c_g, d): (f64, f64, f64, f64) = (0.7, 1.3, 0.4, 0.01);
        let m = (2.0 * (c + 1.0) * d + 4.0 * c_g * d * d).exp();
        let mut cur = k;
        for j in 0..200u64 {
            let v = level_by_squaring(k, c, c_g, d, j).value;
            assert!((v - cur).abs() <= 1e-13 * cur, "{j}");
            cur = (cur + c * d) * m;
        }
    }
}
