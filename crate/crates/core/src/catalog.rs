//! Built-in problems.
//!
//! Every entry takes an optional `horizon` (default 1) besides its own parameters.
//! Unknown parameter names are rejected.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::planner;
use crate::problem::{Constants, Growth, ProblemSpec};
use crate::reflection;

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub description: &'static str,
    /// Parameter names with defaults.
    pub params: &'static [(&'static str, f64)],
}

const ENTRIES: &[CatalogEntry] = &[
    CatalogEntry { name: "zero", description: "xi = 0, F = 0", params: &[("c", 1.0)] },
    CatalogEntry {
        name: "linear-drift",
        description: "xi = x_T, g = c, f = 0; Y = W_t + c(T - t), Z = 1",
        params: &[("c", 0.5)],
    },
    CatalogEntry {
        name: "constant-driver",
        description: "xi = x_T, f = c, g = 0; Y = W_t + c(T - t), Z = 1",
        params: &[("c", 1.0)],
    },
    CatalogEntry { name: "sine-terminal", description: "xi = amp sin(x_T), F = 0", params: &[("amp", 1.0)] },
    CatalogEntry {
        name: "square-terminal",
        description: "xi = x_T^2, F = 0 (not Lipschitz); Y = W_t^2 + T - t, Z = 2 W_t",
        params: &[],
    },
    CatalogEntry {
        name: "coupled-affine",
        description: "dX = (c + kappa Y) dt + dW, xi = X_T, f = 0; Y = alpha(t) X + c(alpha - 1)/kappa, alpha = 1/(1 - kappa(T - t))",
        params: &[("c", 0.2), ("kappa", 0.5)],
    },
    CatalogEntry {
        name: "coupled-sine",
        description: "dX = (c + kappa sin Y + lambda tanh Z) dt + dW, xi = amp sin(X_T), f = mu cos(x)",
        params: &[("c", 0.2), ("kappa", 0.5), ("lambda", 0.3), ("amp", 1.0), ("mu", 0.0)],
    },
    CatalogEntry {
        name: "superquadratic",
        description: "xi = amp sin(x_T), g(z) = z|z| so F = z^2 |z|; growth l(r) = r^2",
        params: &[("amp", 0.1)],
    },
    CatalogEntry {
        name: "quad-1d",
        description: "F = a |z|^2, xi = amp sin(x_T); Y = log E[exp(2 a xi)] / (2a)",
        params: &[("a", 1.0), ("amp", 1.0)],
    },
    CatalogEntry {
        name: "diag-quadratic-2d",
        description: "d = n = 2, F^i = a_i |z^i|^2, xi = (sin x^1_T, cos x^2_T)",
        params: &[("a1", 1.0), ("a2", -0.5)],
    },
    CatalogEntry {
        name: "running-max",
        description: "xi = sin(max_{s <= T} x_s), F = 0 (path-dependent)",
        params: &[],
    },
    CatalogEntry {
        name: "sde-terminal",
        description: "xi = sin(Phi_T), Phi the Euler solution of dPhi = -kappa Phi dt + dx (path-dependent)",
        params: &[("kappa", 1.0)],
    },
    CatalogEntry {
        name: "reflected-terminal",
        description: "xi = sin(Gamma(Phi)_T), Phi as in sde-terminal reflected on [lo, hi] (path-dependent)",
        params: &[("kappa", 1.0), ("lo", -1.0), ("hi", 1.0)],
    },
    CatalogEntry {
        name: "lipschitz-mix",
        description: "xi = amp sin(x_T + phase), f = beta y + gamma sin(z) + mu cos(x), g = 0",
        params: &[("amp", 1.0), ("phase", 0.0), ("beta", 0.0), ("gamma", 0.0), ("mu", 0.0)],
    },
];

pub fn catalog() -> &'static [CatalogEntry] {
    ENTRIES
}

struct Params<'a> {
    name: &'a str,
    given: &'a BTreeMap<String, f64>,
    entry: &'a CatalogEntry,
}

impl Params<'_> {
    fn get(&self, key: &str) -> f64 {
        let default = self.entry.params.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).unwrap_or(1.0);
        self.given.get(key).copied().unwrap_or(default)
    }

    fn err(&self, message: String) -> Error {
        Error::ProblemParameter { problem: self.name.to_string(), message }
    }
}

/// Builds catalog entry `name` with `params` (missing ones take their defaults).
pub fn lookup_catalog(name: &str, params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let entry = ENTRIES.iter().find(|e| e.name == name).ok_or_else(|| Error::UnknownProblem {
        name: name.to_string(),
        available: ENTRIES.iter().map(|e| e.name).collect::<Vec<_>>().join(", "),
    })?;
    let pr = Params { name, given: params, entry };
    for (k, v) in params {
        if k != "horizon" && !entry.params.iter().any(|(p, _)| p == k) {
            let known: Vec<&str> = entry.params.iter().map(|(p, _)| *p).chain(["horizon"]).collect();
            return Err(pr.err(format!("unknown parameter `{k}`; accepted: {}", known.join(", "))));
        }
        if !v.is_finite() {
            return Err(pr.err(format!("parameter `{k}` must be finite")));
        }
    }
    let horizon = pr.get("horizon");
    if horizon <= 0.0 {
        return Err(pr.err("horizon must be positive".into()));
    }
    let spec = build(name, &pr, horizon)?;
    spec.validate()?;
    Ok(spec)
}

fn build(name: &str, pr: &Params, horizon: f64) -> Result<ProblemSpec> {
    let t_end = horizon;
    let spec = match name {
        "zero" => {
            let c = pr.get("c");
            if c <= 0.0 {
                return Err(pr.err("c must be positive".into()));
            }
            let mut s = ProblemSpec::new(name, 1, 1, horizon, Arc::new(|_, out| out[0] = 0.0), Constants::lipschitz(0.0, c, 0.0));
            s.markovian = true;
            s.closed_form = Some(Arc::new(|_, _, y, z| {
                y[0] = 0.0;
                z[0] = 0.0;
            }));
            s
        }
        "linear-drift" => {
            let c = pr.get("c");
            let mut s = ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(|p, out| out[0] = p.current()[0]),
                Constants { terminal_bounded: false, ..Constants::lipschitz(1.0, c * c, 0.0) },
            );
            s.g = Some(Arc::new(move |_, _, _, _, out| out[0] = c));
            s.markovian = true;
            s.closed_form = Some(Arc::new(move |t, x, y, z| {
                y[0] = x[0] + c * (t_end - t);
                z[0] = 1.0;
            }));
            s.reference = Some("Y_t = W_t + c(T - t), Z = 1".into());
            s
        }
        "constant-driver" => {
            let c = pr.get("c");
            let mut s = ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(|p, out| out[0] = p.current()[0]),
                Constants { terminal_bounded: false, ..Constants::lipschitz(1.0, c * c, 0.0) },
            );
            s.f = Some(Arc::new(move |_, _, _, _, out| out[0] = c));
            s.markovian = true;
            s.closed_form = Some(Arc::new(move |t, x, y, z| {
                y[0] = x[0] + c * (t_end - t);
                z[0] = 1.0;
            }));
            s.reference = Some("Y_t = W_t + c(T - t), Z = 1".into());
            s
        }
        "sine-terminal" => {
            let amp = pr.get("amp");
            let mut s = ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(move |p, out| out[0] = amp * p.current()[0].sin()),
                Constants::lipschitz(amp * amp, amp * amp, 0.0),
            );
            s.markovian = true;
            s.closed_form = Some(Arc::new(move |t, x, y, z| {
                let decay = (-(t_end - t) / 2.0).exp();
                y[0] = amp * decay * x[0].sin();
                z[0] = amp * decay * x[0].cos();
            }));
            s.reference = Some("Y_t = amp e^{-(T-t)/2} sin W_t".into());
            s
        }
        "square-terminal" => {
            let mut s = ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(|p, out| out[0] = p.current()[0] * p.current()[0]),
                Constants { terminal_bounded: false, ..Constants::lipschitz(f64::INFINITY, 0.0, 0.0) },
            );
            s.markovian = true;
            s.closed_form = Some(Arc::new(move |t, x, y, z| {
                y[0] = x[0] * x[0] + t_end - t;
                z[0] = 2.0 * x[0];
            }));
            s.reference = Some("Y_t = W_t^2 + T - t, Z = 2 W_t".into());
            s
        }
        "coupled-affine" => {
            let (c, kappa) = (pr.get("c"), pr.get("kappa"));
            if kappa <= 0.0 || kappa * horizon >= 1.0 {
                return Err(pr.err(format!("need 0 < kappa T < 1, got kappa T = {}", kappa * horizon)));
            }
            let mut s = ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(|p, out| out[0] = p.current()[0]),
                Constants { terminal_bounded: false, ..Constants::lipschitz(1.0, c * c, kappa * kappa) },
            );
            s.g = Some(Arc::new(move |_, _, y, _, out| out[0] = c + kappa * y[0]));
            s.markovian = true;
            s.closed_form = Some(Arc::new(move |t, x, y, z| {
                let alpha = 1.0 / (1.0 - kappa * (t_end - t));
                y[0] = alpha * x[0] + c * (alpha - 1.0) / kappa;
                z[0] = alpha;
            }));
            s.reference = Some("Y_t = alpha(t) X_t + c(alpha(t) - 1)/kappa, Z = alpha(t)".into());
            s
        }
        "coupled-sine" => {
            let (c, kappa, lambda, amp, mu) = (pr.get("c"), pr.get("kappa"), pr.get("lambda"), pr.get("amp"), pr.get("mu"));
            let k = amp * amp;
            let cc = k.max(c * c).max(mu * mu);
            let mut s = ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(move |p, out| out[0] = amp * p.current()[0].sin()),
                Constants::lipschitz(k, cc, kappa * kappa + lambda * lambda),
            );
            s.g = Some(Arc::new(move |_, _, y, z, out| out[0] = c + kappa * y[0].sin() + lambda * z[0].tanh()));
            if mu != 0.0 {
                s.f = Some(Arc::new(move |_, p, _, _, out| out[0] = mu * p.current()[0].cos()));
            }
            s.markovian = true;
            s
        }
        "superquadratic" => {
            let amp = pr.get("amp");
            let mut s = ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(move |p, out| out[0] = amp * p.current()[0].sin()),
                Constants::lipschitz(amp * amp, amp * amp, f64::INFINITY),
            );
            s.g = Some(Arc::new(|_, _, _, z, out| out[0] = z[0] * z[0].abs()));
            s.growth = Some(Growth::new("r^2", |r| r * r));
            s.markovian = true;
            s
        }
        "quad-1d" => {
            let (a, amp) = (pr.get("a"), pr.get("amp"));
            if a == 0.0 {
                return Err(pr.err("a must be nonzero".into()));
            }
            // |xi| <= amp, so C = max(amp, amp^2) bounds both |xi|^2 and |xi|.
            let c = amp.abs().max(amp * amp);
            let mut s = ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(move |p, out| out[0] = amp * p.current()[0].sin()),
                Constants { c_bar: Some(0.0), ..Constants::lipschitz(amp * amp, c, 0.0) },
            );
            s.diag_a = Some(vec![a]);
            s.markovian = true;
            s.reference = Some("log-transform quadrature".into());
            s
        }
        "diag-quadratic-2d" => {
            let (a1, a2) = (pr.get("a1"), pr.get("a2"));
            if a1 == 0.0 || a2 == 0.0 {
                return Err(pr.err("a1 and a2 must be nonzero".into()));
            }
            let mut s = ProblemSpec::new(
                name,
                2,
                2,
                horizon,
                Arc::new(|p, out| {
                    out[0] = p.current()[0].sin();
                    out[1] = p.current()[1].cos();
                }),
                Constants { c_bar: Some(0.0), ..Constants::lipschitz(1.0, 2.0, 0.0) },
            );
            s.diag_a = Some(vec![a1, a2]);
            s.markovian = true;
            s
        }
        "running-max" => ProblemSpec::new(
            name,
            1,
            1,
            horizon,
            Arc::new(|p, out| out[0] = p.running_max(0).sin()),
            Constants::lipschitz(1.0, 1.0, 0.0),
        ),
        "sde-terminal" => {
            let kappa = pr.get("kappa");
            let l = sde_map_constant(kappa, horizon);
            ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(move |p, out| {
                    let phi = ou_euler(p.raw(), p.grid().points(), kappa);
                    out[0] = phi[phi.len() - 1].sin();
                }),
                Constants::lipschitz(l * l, 1.0, 0.0),
            )
        }
        "reflected-terminal" => {
            let (kappa, lo, hi) = (pr.get("kappa"), pr.get("lo"), pr.get("hi"));
            if !(lo < 0.0 && 0.0 < hi) {
                return Err(pr.err("need lo < 0 < hi".into()));
            }
            let l = sde_map_constant(kappa, horizon);
            ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(move |p, out| {
                    let phi = ou_euler(p.raw(), p.grid().points(), kappa);
                    let r = reflection::reflect_interval(&phi, lo, Some(hi));
                    out[0] = r[r.len() - 1].sin();
                }),
                Constants::lipschitz((reflection::INTERVAL_MAP_LIPSCHITZ * l).powi(2), 1.0, 0.0),
            )
        }
        "lipschitz-mix" => {
            let (amp, phase, beta, gamma, mu) = (pr.get("amp"), pr.get("phase"), pr.get("beta"), pr.get("gamma"), pr.get("mu"));
            let k = amp * amp;
            // Lipschitz^2 of f in (x, y, z) is at most beta^2 + gamma^2 + mu^2 by Cauchy-Schwarz.
            let c = k.max(mu * mu).max(beta * beta + gamma * gamma + mu * mu).max(1e-12);
            let mut s = ProblemSpec::new(
                name,
                1,
                1,
                horizon,
                Arc::new(move |p, out| out[0] = amp * (p.current()[0] + phase).sin()),
                Constants::lipschitz(k, c, 0.0),
            );
            if beta != 0.0 || gamma != 0.0 || mu != 0.0 {
                s.f = Some(Arc::new(move |_, p, y, z, out| out[0] = beta * y[0] + gamma * z[0].sin() + mu * p.current()[0].cos()));
            }
            s.markovian = true;
            s
        }
        _ => unreachable!("entry table and builder agree"),
    };
    Ok(spec)
}

/// Lipschitz constant `C_f (1 + T) e^{C_f T}` of the map driving `dPhi = -kappa Phi dt + dx`,
/// with `C_f = max(kappa, 1)`.
pub fn sde_map_constant(kappa: f64, horizon: f64) -> f64 {
    let cf = kappa.abs().max(1.0);
    cf * (1.0 + horizon) * (cf * horizon).exp()
}

/// Euler path of `dPhi = -kappa Phi dt + dx` from 0 along the one-dimensional `x`.
fn ou_euler(x: &[f64], times: &[f64], kappa: f64) -> Vec<f64> {
    let mut phi = Vec::with_capacity(x.len());
    phi.push(0.0);
    for k in 1..x.len() {
        let prev = phi[k - 1];
        phi.push(prev - kappa * prev * (times[k] - times[k - 1]) + (x[k] - x[k - 1]));
    }
    phi
}

/// Level cap for the entry under the Lipschitz route, for quick inspection.
pub fn describe(spec: &ProblemSpec) -> String {
    let c = &spec.constants;
    format!(
        "{}: d = {}, n = {}, T = {}, K = {:e}, C = {:e}, C_g = {:e}, R = {:e}",
        spec.name,
        spec.d,
        spec.n,
        spec.horizon,
        c.k,
        c.c,
        c.c_g,
        if c.c_g.is_finite() { planner::level_cap(c.k, c.c, c.c_g, spec.horizon) } else { f64::INFINITY }
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::paths::PathView;

    #[test]
    fn every_entry_builds_with_defaults() {
        for e in catalog() {
            let s = lookup_catalog(e.name, &BTreeMap::new()).unwrap();
            assert_eq!(s.name, e.name);
        }
    }

    #[test]
    fn unknown_names_and_params_are_rejected() {
        assert!(matches!(lookup_catalog("nope", &BTreeMap::new()), Err(Error::UnknownProblem { .. })));
        let mut p = BTreeMap::new();
        p.insert("pathz".to_string(), 1.0);
        let e = lookup_catalog("zero", &p).unwrap_err();
        assert!(e.to_string().contains("pathz"));
    }

    #[test]
    fn closed_forms_match_terminals() {
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        for name in ["linear-drift", "constant-driver", "sine-terminal", "square-terminal", "coupled-affine"] {
            let s = lookup_catalog(name, &BTreeMap::new()).unwrap();
            let cf = s.closed_form.clone().unwrap();
            let vals = [0.0, 0.7];
            let mut xi = [0.0];
            s.eval_terminal(&PathView::new(&vals, 1, &grid), &mut xi);
            let (mut y, mut z) = ([0.0], [0.0]);
            cf(1.0, &[0.7], &mut y, &mut z);
            assert!((y[0] - xi[0]).abs() < 1e-14, "{name}");
        }
    }

    #[test]
    fn ou_euler_is_driven_by_increments() {
        let phi = ou_euler(&[0.0, 1.0, 1.0], &[0.0, 0.5, 1.0], 0.0);
        assert_eq!(phi, vec![0.0, 1.0, 1.0]);
        let phi = ou_euler(&[5.0, 6.0], &[0.0, 1.0], 2.0);
        assert_eq!(phi, vec![0.0, 1.0]);
    }
}
