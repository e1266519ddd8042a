//! Sampling audit of declared constants.
//!
//! Probe `k` is a deterministic function of `(seed, k)`, so the observed maxima are
//! monotone in the budget. Pairs alternate between independent paths and single-node
//! bumps, the latter being what stresses sup-norm Lipschitz bounds.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::PathView;
use crate::problem::ProblemSpec;
use crate::rng::{derive_seed, NormalStream, UniformStream};

/// Relative slack allowed over a declared constant.
pub const SLACK: f64 = 0.01;
const PROBE_STEPS: usize = 16;
const AUDIT_TAG: u64 = 0xa0d1;

#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub assumption: &'static str,
    pub declared: f64,
    pub observed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub problem: String,
    pub budget: usize,
    pub seed: u64,
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn entry(&self, assumption: &str) -> Option<&AuditEntry> {
        self.entries.iter().find(|e| e.assumption == assumption)
    }

    pub fn render(&self) -> String {
        let mut s = format!("audit {} (budget {}, seed {})\n", self.problem, self.budget, self.seed);
        for e in &self.entries {
            s += &format!(
                "  {:<16} declared {:>12.6e} observed {:>12.6e} {}\n",
                e.assumption,
                e.declared,
                e.observed,
                if e.pass { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

struct Probe {
    x: Vec<f64>,
    x2: Vec<f64>,
    node: usize,
    y: Vec<f64>,
    y2: Vec<f64>,
    z: Vec<f64>,
    z2: Vec<f64>,
}

fn make_probe(spec: &ProblemSpec, grid: &TimeGrid, seed: u64, k: usize) -> Probe {
    let (m, d, n) = (spec.m, spec.d, spec.n);
    let nodes = grid.steps() + 1;
    let mut u = UniformStream::new(seed, 2 * k as u64 + 1);
    let mut g = NormalStream::new(seed, 2 * k as u64, 0);
    let scale = [0.25, 1.0, 3.0][u.index(3)];
    let mut x = vec![0.0; nodes * m];
    for c in 0..m {
        x[c] = spec.x0.get(c).copied().unwrap_or(0.0);
    }
    for i in 0..grid.steps() {
        let sq = grid.dt(i).sqrt() * scale;
        for c in 0..m {
            x[(i + 1) * m + c] = x[i * m + c] + sq * g.next();
        }
    }
    let node = u.index(nodes);
    let mut x2 = x.clone();
    let bumped = k % 2 == 1;
    if bumped {
        // One node moved by a small amount; stresses the sup-norm quotient.
        let h = 10f64.powf(-u.range(0.0, 4.0));
        let bump_node = if u.next() < 0.5 { nodes - 1 } else { u.index(nodes) };
        let c = u.index(m);
        x2[bump_node * m + c] += if u.next() < 0.5 { h } else { -h };
    } else {
        for i in 0..grid.steps() {
            let sq = grid.dt(i).sqrt() * scale;
            for c in 0..m {
                x2[(i + 1) * m + c] = x2[i * m + c] + sq * g.next();
            }
        }
    }
    let ys = [0.1, 1.0, 5.0][u.index(3)];
    let y: Vec<f64> = (0..d).map(|_| ys * g.next()).collect();
    let z: Vec<f64> = (0..d * n).map(|_| ys * g.next()).collect();
    let (y2, z2) = if bumped {
        let h = 10f64.powf(-u.range(0.0, 4.0));
        (y.iter().map(|v| v + h * g.next()).collect(), z.iter().map(|v| v + h * g.next()).collect())
    } else {
        ((0..d).map(|_| ys * g.next()).collect(), (0..d * n).map(|_| ys * g.next()).collect())
    };
    Probe { x, x2, node, y, y2, z, z2 }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sup_sq(a: &[f64], b: &[f64], dim: usize, upto: usize) -> f64 {
    (0..=upto).map(|i| sq_dist(&a[i * dim..(i + 1) * dim], &b[i * dim..(i + 1) * dim])).fold(0.0, f64::max)
}

fn finite(assumption: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Audit { assumption, message: "coefficient returned a non-finite value".into() })
    }
}

struct Max {
    name: &'static str,
    declared: f64,
    observed: f64,
}

impl Max {
    fn new(name: &'static str, declared: f64) -> Self {
        Self { name, declared, observed: 0.0 }
    }

    fn see(&mut self, v: f64) {
        if v > self.observed {
            self.observed = v;
        }
    }

    fn entry(self) -> AuditEntry {
        let pass = self.observed <= self.declared * (1.0 + SLACK) + 1e-12;
        AuditEntry { assumption: self.name, declared: self.declared, observed: self.observed, pass }
    }
}

/// Largest observed quotient for each declared assumption over `budget` probe pairs.
pub fn audit_assumptions(spec: &ProblemSpec, budget: usize, seed: u64) -> Result<AuditReport> {
    if budget < 100 {
        return Err(Error::InvalidArgument(format!("probe budget must be at least 100, got {budget}")));
    }
    spec.validate()?;
    let c = &spec.constants;
    let (d, n, m) = (spec.d, spec.n, spec.m);
    let grid = TimeGrid::uniform(spec.horizon, PROBE_STEPS)?;
    let seed = derive_seed(seed, AUDIT_TAG);
    let mut xi_bound = Max::new("H1 |xi|^2", c.c);
    let mut xi_lip = Max::new("H1 Lipschitz", c.k);
    let mut f_bound = Max::new("H3 |f(0,0)|^2", c.c);
    let mut f_lip = Max::new("H3 Lipschitz", c.c);
    let mut g_bound = Max::new("H4 |g(0,0)|^2", c.c);
    let g_declared = if spec.growth.is_some() { 1.0 } else { c.c_g };
    let mut g_lip = Max::new(if spec.growth.is_some() { "H3' l-quotient" } else { "H4 Lipschitz" }, g_declared);
    let mut f_abs = Max::new("|f| <= C-bar", c.c_bar.unwrap_or(f64::INFINITY));
    let (mut xa, mut xb) = (vec![0.0; d], vec![0.0; d]);
    let (mut fa, mut fb) = (vec![0.0; d], vec![0.0; d]);
    let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
    let zeros_y = vec![0.0; d];
    let zeros_z = vec![0.0; d * n];
    for k in 0..budget {
        let p = make_probe(spec, &grid, seed, k);
        let full = grid.steps();
        let va = PathView::new(&p.x, m, &grid);
        let vb = PathView::new(&p.x2, m, &grid);
        spec.eval_terminal(&va, &mut xa);
        spec.eval_terminal(&vb, &mut xb);
        finite("H1", &xa)?;
        finite("H1", &xb)?;
        xi_bound.see(sq_dist(&xa, &zeros_y));
        let dx = sup_sq(&p.x, &p.x2, m, full);
        if dx > 0.0 {
            xi_lip.see(sq_dist(&xa, &xb) / dx);
        }
        let s = grid.t(p.node);
        let pa = va.truncate(p.node);
        let pb = vb.truncate(p.node);
        let dx_s = sup_sq(&p.x, &p.x2, m, p.node);
        let dyz = sq_dist(&p.y, &p.y2) + sq_dist(&p.z, &p.z2);
        if let Some(f) = &spec.f {
            f(s, &pa, &zeros_y, &zeros_z, &mut fa);
            finite("H3", &fa)?;
            f_bound.see(sq_dist(&fa, &zeros_y));
            f(s, &pa, &p.y, &p.z, &mut fa);
            f(s, &pb, &p.y2, &p.z2, &mut fb);
            finite("H3", &fa)?;
            finite("H3", &fb)?;
            if dx_s + dyz > 0.0 {
                f_lip.see(sq_dist(&fa, &fb) / (dx_s + dyz));
            }
            f_abs.see(fa.iter().chain(&fb).fold(0.0f64, |acc, v| acc.max(v.abs())));
        }
        if let Some(g) = &spec.g {
            g(s, &pa, &zeros_y, &zeros_z, &mut ga);
            finite("H4", &ga)?;
            g_bound.see(sq_dist(&ga, &vec![0.0; n]));
            g(s, &pa, &p.y, &p.z, &mut ga);
            g(s, &pb, &p.y2, &p.z2, &mut gb);
            finite("H4", &ga)?;
            finite("H4", &gb)?;
            if dx_s + dyz > 0.0 {
                let q = sq_dist(&ga, &gb) / (dx_s + dyz);
                match &spec.growth {
                    Some(l) => {
                        let r = p.z.iter().map(|v| v * v).sum::<f64>().sqrt() + p.z2.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let bound = l.at(r);
                        if bound > 0.0 {
                            g_lip.see(q / bound);
                        } else if q > 0.0 {
                            g_lip.see(f64::INFINITY);
                        }
                    }
                    None => g_lip.see(q),
                }
            }
        }
    }
    let mut entries = Vec::new();
    if c.terminal_bounded {
        entries.push(xi_bound.entry());
    }
    if c.k.is_finite() {
        entries.push(xi_lip.entry());
    }
    if spec.f.is_some() {
        entries.push(f_bound.entry());
        entries.push(f_lip.entry());
        if c.c_bar.is_some() {
            entries.push(f_abs.entry());
        }
    }
    if spec.g.is_some() {
        entries.push(g_bound.entry());
        if spec.growth.is_some() || c.c_g.is_finite() {
            entries.push(g_lip.entry());
        }
    }
    Ok(AuditReport { problem: spec.name.clone(), budget, seed, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{catalog, lookup_catalog};
    use crate::problem::Constants;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    #[test]
    fn catalog_passes_its_own_audit() {
        for e in catalog() {
            let s = lookup_catalog(e.name, &BTreeMap::new()).unwrap();
            let r = audit_assumptions(&s, 2000, 1).unwrap();
            assert!(r.passed(), "{}", r.render());
        }
    }

    #[test]
    fn doubled_terminal_fails_with_quotient_four() {
        let s = ProblemSpec::new("double", 1, 1, 1.0, Arc::new(|p, out| out[0] = 2.0 * p.current()[0]), Constants {
            terminal_bounded: false,
            ..Constants::lipschitz(1.0, 1.0, 0.0)
        });
        let r = audit_assumptions(&s, 200, 3).unwrap();
        let e = r.entry("H1 Lipschitz").unwrap();
        assert!(!e.pass);
        assert!((e.observed - 4.0).abs() < 1e-6, "{}", e.observed);
    }

    #[test]
    fn zero_g_observes_zero() {
        let mut s = lookup_catalog("zero", &BTreeMap::new()).unwrap();
        s.g = Some(Arc::new(|_, _, _, _, out: &mut [f64]| out.fill(0.0)));
        let r = audit_assumptions(&s, 100, 0).unwrap();
        assert_eq!(r.entry("H4 Lipschitz").unwrap().observed, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn budget_floor() {
        let s = lookup_catalog("zero", &BTreeMap::new()).unwrap();
        assert!(audit_assumptions(&s, 99, 0).is_err());
    }
}
