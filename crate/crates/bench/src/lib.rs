//! Acceptance suite.
//!
//! Each criterion runs a handful of checks and reports measured values next to their
//! tolerances. Failures are report entries, never panics. Reports carry no timings, so the
//! same configuration always renders to the same bytes.

use std::fmt::Write as _;

mod criteria;

pub use criteria::{run_criterion, CRITERIA};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Multiplies every tolerance (and every slack above 1). `0.5` halves them.
    pub tolerance_scale: f64,
    /// Multiplies every path count (with a floor of 256).
    pub path_scale: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 2024, tolerance_scale: 1.0, path_scale: 1.0 }
    }
}

impl SuiteConfig {
    pub fn paths(&self, n: usize) -> usize {
        ((n as f64 * self.path_scale).round() as usize).max(256)
    }

    pub fn tol(&self, t: f64) -> f64 {
        t * self.tolerance_scale
    }

    /// `1 + slack`, with the slack scaled.
    pub fn factor(&self, slack: f64) -> f64 {
        1.0 + slack * self.tolerance_scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub label: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(label: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { label: label.into(), measured, tolerance, pass: measured <= tolerance }
    }

    pub fn flag(label: impl Into<String>, measured: f64, tolerance: f64, pass: bool) -> Self {
        Self { label: label.into(), measured, tolerance, pass }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub checks: Vec<Check>,
    /// Set when the criterion could not run to completion.
    pub error: Option<String>,
}

impl CriterionResult {
    pub fn pass(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn status(&self) -> &'static str {
        if self.pass() {
            "PASS"
        } else {
            "FAIL"
        }
    }

    /// One summary line.
    pub fn line(&self) -> String {
        let failed = self.checks.iter().filter(|c| !c.pass).count();
        let mut s = format!("criterion {:>2} {:<24} {}  ({} checks", self.id, self.name, self.status(), self.checks.len());
        if failed > 0 {
            let _ = write!(s, ", {failed} failed");
        }
        s.push(')');
        if let Some(e) = &self.error {
            let _ = write!(s, " error: {e}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcceptanceReport {
    pub config: SuiteConfig,
    pub results: Vec<CriterionResult>,
}

impl AcceptanceReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.pass())
    }

    pub fn get(&self, id: u8) -> Option<&CriterionResult> {
        self.results.iter().find(|r| r.id == id)
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "acceptance report\nseed = {}\ntolerance_scale = {}\npath_scale = {}\n\n",
            self.config.seed, self.config.tolerance_scale, self.config.path_scale
        );
        for r in &self.results {
            s += &r.line();
            s.push('\n');
            for c in &r.checks {
                let _ = writeln!(
                    s,
                    "    {} {:<52} measured = {:.6e}  tolerance = {:.6e}",
                    if c.pass { "ok  " } else { "FAIL" },
                    c.label,
                    c.measured,
                    c.tolerance
                );
            }
        }
        let n_pass = self.results.iter().filter(|r| r.pass()).count();
        let _ = writeln!(s, "\n{n_pass}/{} criteria passed", self.results.len());
        s
    }

    /// One row per check: `criterion,name,check,measured,tolerance,status`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("criterion,name,check,measured,tolerance,status\n");
        for r in &self.results {
            if let Some(e) = &r.error {
                let _ = writeln!(s, "{},{},\"error: {}\",,,FAIL", r.id, r.name, e.replace('"', "'"));
            }
            for c in &r.checks {
                let _ = writeln!(
                    s,
                    "{},{},\"{}\",{:.10e},{:.10e},{}",
                    r.id,
                    r.name,
                    c.label.replace('"', "'"),
                    c.measured,
                    c.tolerance,
                    if c.pass { "PASS" } else { "FAIL" }
                );
            }
        }
        s
    }
}

pub fn run_criteria(ids: &[u8], config: &SuiteConfig) -> AcceptanceReport {
    AcceptanceReport { config: config.clone(), results: ids.iter().map(|&id| run_criterion(id, config)).collect() }
}

/// All twelve criteria in order.
pub fn run_acceptance_suite(config: &SuiteConfig) -> AcceptanceReport {
    let ids: Vec<u8> = CRITERIA.iter().map(|(id, _)| *id).collect();
    run_criteria(&ids, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halved_tolerances_flag_without_crashing() {
        let tight = SuiteConfig { tolerance_scale: 1e-9, ..SuiteConfig::default() };
        let r = run_criteria(&[1], &tight);
        assert!(!r.passed());
        assert!(r.render_text().contains("FAIL"));
        let ok = run_criteria(&[1], &SuiteConfig::default());
        assert!(ok.passed(), "{}", ok.render_text());
    }

    #[test]
    fn unknown_criterion_is_a_failed_entry() {
        let r = run_criteria(&[99], &SuiteConfig::default());
        assert!(!r.passed());
        assert!(r.results[0].error.is_some());
        assert!(r.to_csv().contains("error"));
    }
}
