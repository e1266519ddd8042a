//! Admissible interval lengths, the global partition and its level bounds.
//!
//! A level bound `K_j` is the squared Lipschitz constant of the terminal functional used
//! on the `j`-th interval counted from the horizon. It follows
//! `K_j = (K_{j-1} + C delta) e^{a}` with `a = 2(C+1) delta + 4 C_g delta^2` and
//! `K_0 = K`, whose closed form is `K_j = e^{j a} (K + S) - S`,
//! `S = C delta e^a / (e^a - 1)`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Inequalities count as satisfied only below `1 - GUARD`.
pub const GUARD: f64 = 1e-12;
pub const DEFAULT_CAP: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Lipschitz,
    Superquadratic,
    Diagonal,
    Perturbed,
}

impl Route {
    pub fn as_str(&self) -> &'static str {
        match self {
            Route::Lipschitz => "lipschitz",
            Route::Superquadratic => "superquadratic",
            Route::Diagonal => "diagonal",
            Route::Perturbed => "perturbed",
        }
    }
}

fn mul0(a: f64, b: f64) -> f64 {
    // 0 * inf is 0 here: a vanishing coupling switches the term off.
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        a * b
    }
}

/// `C_g (6 e^{2(C+1)eps} (K + C eps) + 1)(eps + 1) eps`.
pub fn contraction_lhs(c: f64, c_g: f64, k: f64, eps: f64) -> f64 {
    mul0(c_g, (6.0 * (2.0 * (c + 1.0) * eps).exp() * (k + c * eps) + 1.0) * (eps + 1.0) * eps)
}

/// `8 e^{2(C+1)eps + 4 C_g eps^2} (K + C eps) C_g eps`.
pub fn decoupling_branch(c: f64, c_g: f64, k: f64, eps: f64) -> f64 {
    mul0(c_g, 8.0 * (2.0 * (c + 1.0) * eps + 4.0 * c_g * eps * eps).exp() * (k + c * eps) * eps)
}

pub fn decoupling_lhs(c: f64, c_g: f64, k: f64, eps: f64) -> f64 {
    decoupling_branch(c, c_g, k, eps).max(contraction_lhs(c, c_g, k, eps))
}

fn below_one(v: f64) -> bool {
    v < 1.0 - GUARD
}

pub fn eps_ok_contraction(c: f64, c_g: f64, k: f64, eps: f64) -> bool {
    below_one(contraction_lhs(c, c_g, k, eps))
}

pub fn eps_ok_decoupling(c: f64, c_g: f64, k: f64, eps: f64) -> bool {
    below_one(decoupling_lhs(c, c_g, k, eps))
}

/// `(K + C x) exp(2(C+1) x + 4 C_g x^2)`.
pub fn rho_fb(x: f64, k: f64, c: f64, c_g: f64) -> f64 {
    (k + c * x) * (2.0 * (c + 1.0) * x + 4.0 * c_g * x * x).exp()
}

/// `(K + C/(2(C+1))) e^{2(C+1) x} - C/(2(C+1))`.
pub fn rho(x: f64, k: f64, c: f64) -> f64 {
    let s = c / (2.0 * (c + 1.0));
    let b = 2.0 * (c + 1.0) * x;
    // Same value as (k + s) e^b - s, without the cancellation at small x.
    k * b.exp() + mul0(s, b.exp_m1())
}

/// Level cap `R = (K + C/(2(C+1))) exp(4(C+1)T + 4 C_g T^2)`.
pub fn level_cap(k: f64, c: f64, c_g: f64, horizon: f64) -> f64 {
    (k + c / (2.0 * (c + 1.0))) * (4.0 * (c + 1.0) * horizon + mul0(4.0 * c_g, horizon * horizon)).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionPlan {
    pub route: Route,
    pub horizon: f64,
    /// Number of levels `N`.
    pub n_levels: u64,
    pub delta: f64,
    pub k: f64,
    pub c: f64,
    /// `C_g` used for planning (effective value on the superquadratic route).
    pub c_g: f64,
    /// Level cap `R`.
    pub r_cap: f64,
    /// Per-level growth exponent `a = 2(C+1) delta + 4 C_g delta^2`.
    pub a: f64,
    /// Contraction constant at `delta` with `K -> R`.
    pub contraction: f64,
    pub decoupling: f64,
    pub contraction_ok: bool,
    pub decoupling_ok: bool,
}

impl PartitionPlan {
    fn shift(&self) -> f64 {
        if self.c == 0.0 {
            0.0
        } else {
            self.c * self.delta * self.a.exp() / self.a.exp_m1()
        }
    }

    /// Closed-form level bound `K_j`.
    pub fn level(&self, j: u64) -> f64 {
        let s = self.shift();
        (j as f64 * self.a).exp() * (self.k + s) - s
    }

    /// Level bounds by the recursion, `K_0 ..= K_N`.
    pub fn levels(&self) -> impl Iterator<Item = f64> + '_ {
        let growth = self.a.exp();
        let step = self.c * self.delta;
        let mut cur = self.k;
        (0..=self.n_levels).map(move |j| {
            if j > 0 {
                cur = (cur + step) * growth;
            }
            cur
        })
    }

    /// `max_j K_j` (the sequence is nondecreasing, so this is `K_N`).
    pub fn max_level(&self) -> f64 {
        self.level(self.n_levels)
    }

    /// Cap property `max_j K_j <= R`, by recursion when `N` is small enough to walk.
    pub fn cap_certified(&self) -> bool {
        if self.k.is_infinite() {
            return true;
        }
        let max = if self.n_levels <= DEFAULT_CAP { self.levels().fold(0.0, f64::max) } else { self.max_level() };
        max <= self.r_cap * (1.0 + 1e-12)
    }

    /// Human-readable plan with a level table of at most `rows` entries.
    pub fn report(&self, rows: usize) -> String {
        let mut s = String::new();
        s.push_str(&format!("route = {}\n", self.route.as_str()));
        s.push_str(&format!("horizon = {}\n", self.horizon));
        s.push_str(&format!("N = {}\n", self.n_levels));
        s.push_str(&format!("delta = {:.6e}\n", self.delta));
        s.push_str(&format!("K = {:.6e}\nC = {:.6e}\nC_g = {:.6e}\n", self.k, self.c, self.c_g));
        s.push_str(&format!("R = {:.6e}\n", self.r_cap));
        s.push_str(&format!("contraction = {:.6e} ({})\n", self.contraction, ok(self.contraction_ok)));
        s.push_str(&format!("decoupling = {:.6e} ({})\n", self.decoupling, ok(self.decoupling_ok)));
        s.push_str(&format!("cap max_j K_j <= R = {}\n", ok(self.cap_certified())));
        let n = self.n_levels;
        let shown: Vec<u64> = if n as usize + 1 <= rows {
            (0..=n).collect()
        } else {
            let mut v: Vec<u64> = (0..rows as u64).map(|r| r * n / (rows as u64 - 1).max(1)).collect();
            v.dedup();
            v
        };
        s.push_str("level, K_j\n");
        for j in shown {
            s.push_str(&format!("{j}, {:.6e}\n", self.level(j)));
        }
        s
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}

fn check_constants(k: f64, c: f64, c_g: f64, horizon: f64) -> Result<()> {
    for (label, v) in [("K", k), ("C", c), ("C_g", c_g)] {
        if v.is_nan() || v < 0.0 {
            return Err(Error::DegenerateConstants(format!("{label} = {v}")));
        }
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::DegenerateConstants(format!("horizon = {horizon}")));
    }
    if c.is_infinite() || c_g.is_infinite() {
        return Err(Error::DegenerateConstants("C and C_g must be finite for planning".into()));
    }
    Ok(())
}

/// Minimal `N >= 2` such that `delta = T/N` passes both inequalities with `K -> R`.
pub fn plan_partition(k: f64, c: f64, c_g: f64, horizon: f64, route: Route, cap: u64) -> Result<PartitionPlan> {
    check_constants(k, c, c_g, horizon)?;
    let r = level_cap(k, c, c_g, horizon);
    let admissible = |n: u64| eps_ok_decoupling(c, c_g, r, horizon / n as f64);
    let cap = cap.max(2);
    let n = if admissible(2) {
        2
    } else {
        if !admissible(cap) {
            let eps = horizon / cap as f64;
            let limiting = if eps_ok_contraction(c, c_g, r, eps) { "decoupling" } else { "contraction" };
            return Err(Error::PlannerOverflow { cap, limiting });
        }
        // The left sides grow with delta, so admissibility is monotone in N.
        let (mut lo, mut hi) = (2u64, 4u64.min(cap));
        while !admissible(hi) {
            lo = hi;
            hi = hi.saturating_mul(2).min(cap);
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if admissible(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    let delta = horizon / n as f64;
    let a = 2.0 * (c + 1.0) * delta + 4.0 * c_g * delta * delta;
    let contraction = contraction_lhs(c, c_g, r, delta);
    let decoupling = decoupling_lhs(c, c_g, r, delta);
    Ok(PartitionPlan {
        route,
        horizon,
        n_levels: n,
        delta,
        k,
        c,
        c_g,
        r_cap: r,
        a,
        contraction,
        decoupling,
        contraction_ok: below_one(contraction),
        decoupling_ok: below_one(decoupling),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginReport {
    pub beta: f64,
    pub threshold: f64,
    pub deviation: f64,
    pub pass: bool,
}

/// Smallness test of the perturbation route: `deviation < min(1/(256 beta), C_z^2)` with
/// `beta = max(C_y^2 T, C_z^2)`.
pub fn tevzadze_margin(c_y: f64, c_z: f64, horizon: f64, deviation: f64) -> Result<MarginReport> {
    if !(c_y >= 0.0 && c_z >= 0.0 && horizon > 0.0 && deviation >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin needs C_y, C_z >= 0, T > 0, deviation >= 0; got ({c_y}, {c_z}, {horizon}, {deviation})"
        )));
    }
    let beta = (c_y * c_y * horizon).max(c_z * c_z);
    if beta == 0.0 {
        return Err(Error::DegenerateConstants("beta = 0".into()));
    }
    let threshold = (1.0 / (256.0 * beta)).min(c_z * c_z);
    Ok(MarginReport { beta, threshold, deviation, pass: deviation < threshold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_values() {
        assert!(eps_ok_contraction(1.0, 0.0, 1.0, 0.5));
        assert!(!eps_ok_contraction(1.0, 1.0, 1.0, 1.0));
        assert!(eps_ok_decoupling(1.0, 0.0, 5.0, 0.9));
        assert_eq!(rho(0.0, 1.3, 0.7), 1.3);
        assert_eq!(rho_fb(0.0, 1.3, 0.7, 2.0), 1.3);
        assert_eq!(rho(2.0, 0.0, 0.0), 0.0);
        assert!((rho_fb(1.0, 1.0, 1.0, 0.0) - 2.0 * 4f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn guard_band_fails_ties() {
        // With K = C = 0 the left side is 2 C_g at eps = 1.
        assert!(!eps_ok_contraction(0.0, 0.5, 0.0, 1.0));
        assert!(!eps_ok_contraction(0.0, 0.5 * (1.0 - 1e-13), 0.0, 1.0));
        assert!(eps_ok_contraction(0.0, 0.5 * (1.0 - 1e-9), 0.0, 1.0));
    }

    #[test]
    fn cg_zero_plans_two_levels() {
        let p = plan_partition(1.0, 1.0, 0.0, 1.0, Route::Lipschitz, DEFAULT_CAP).unwrap();
        assert_eq!(p.n_levels, 2);
        assert!(p.cap_certified());
    }

    #[test]
    fn unit_constants_overflow_default_cap() {
        let e = plan_partition(1.0, 1.0, 1.0, 1.0, Route::Lipschitz, DEFAULT_CAP).unwrap_err();
        assert!(matches!(e, Error::PlannerOverflow { cap: DEFAULT_CAP, .. }));
    }

    #[test]
    fn margin_examples() {
        let m = tevzadze_margin(1.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(m.threshold, 1.0 / 256.0);
        assert!(m.pass);
        assert!(!tevzadze_margin(1.0, 1.0, 1.0, 1.0 / 256.0).unwrap().pass);
        assert!(matches!(tevzadze_margin(0.0, 0.0, 1.0, 0.0), Err(Error::DegenerateConstants(_))));
    }

    #[test]
    fn degenerate_constants_rejected() {
        assert!(plan_partition(-1.0, 1.0, 1.0, 1.0, Route::Lipschitz, 10).is_err());
        assert!(plan_partition(1.0, f64::NAN, 1.0, 1.0, Route::Lipschitz, 10).is_err());
    }
}
