//! Config-driven runs.
//!
//! A run is described by a TOML file:
//!
//! ```toml
//! seed = 1
//! route = "lipschitz"
//! problem = "sine-terminal"
//!
//! [params]
//! amp = 0.5
//!
//! [numerics]
//! n_paths = 100000
//! steps = 50
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Unknown keys are errors. Every artifact goes into the output directory under a fixed
//! name; see [`run`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use qbsde_bench::{run_criteria, SuiteConfig, CRITERIA};
use qbsde_core::bsde::{SolverConfig, DEFAULT_MAX_ITER, DEFAULT_TOL};
use qbsde_core::catalog::{describe, lookup_catalog};
use qbsde_core::fbsde::{contraction_constant, solve_local_fbsde, Prefix};
use qbsde_core::girsanov::{fbsde_residual, fbsde_via_bsde, stochastic_exponential};
use qbsde_core::global::{
    plan_for, solve_diagonal_quadratic, solve_global_lipschitz_g, solve_global_superquadratic, solve_perturbed, GlobalSolution,
    PerturbedOutcome,
};
use qbsde_core::paths::{simulate_brownian, PathPrefix};
use qbsde_core::planner::{rho_fb, Route as PlanRoute, DEFAULT_CAP};
use qbsde_core::problem::ProblemSpec;
use qbsde_core::reflection::{reflected_sde, ReflectionSpec, SdeMap};
use qbsde_core::regression::FeatureBasis;
use qbsde_core::rng::derive_seed;
use qbsde_core::{PathBundle, TimeGrid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SOLUTION_CSV: &str = "solution.csv";
pub const CERTIFICATE: &str = "certificate.txt";
pub const CONTRACTION_CSV: &str = "contraction.csv";
pub const WEIGHTS_CSV: &str = "weights.csv";
pub const REFLECTED_CSV: &str = "reflected.csv";
pub const ACCEPTANCE_TXT: &str = "acceptance.txt";
pub const ACCEPTANCE_CSV: &str = "acceptance.csv";

const DEFAULT_OUT: &str = "out";
const PROBE_COUNT: usize = 1000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config schema error: {0}")]
    Schema(String),
    #[error("route `{route}` does not fit problem `{problem}`: {reason}")]
    Mismatch { route: &'static str, problem: String, reason: String },
    #[error("route `{route}`: {source}")]
    Solver { route: &'static str, source: qbsde_core::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteName {
    Lipschitz,
    Superquadratic,
    Diagonal,
    Perturbed,
    FbsdeLocal,
    FbsdeViaBsde,
    ReflectedSde,
    Acceptance,
}

impl RouteName {
    pub fn as_str(&self) -> &'static str {
        match self {
            RouteName::Lipschitz => "lipschitz",
            RouteName::Superquadratic => "superquadratic",
            RouteName::Diagonal => "diagonal",
            RouteName::Perturbed => "perturbed",
            RouteName::FbsdeLocal => "fbsde-local",
            RouteName::FbsdeViaBsde => "fbsde-via-bsde",
            RouteName::ReflectedSde => "reflected-sde",
            RouteName::Acceptance => "acceptance",
        }
    }

    fn takes_problem(&self) -> bool {
        !matches!(self, RouteName::ReflectedSde | RouteName::Acceptance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// `polynomial:D`, `path:D[+max][+integral]`, `binned:B` or `binned-linear:B`.
    #[serde(default = "default_basis")]
    pub basis: String,
    /// Largest partition size the planner may return.
    #[serde(default = "default_cap")]
    pub plan_cap: u64,
}

fn default_paths() -> usize {
    100_000
}
fn default_steps() -> usize {
    50
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_basis() -> String {
    "binned:32".into()
}
fn default_cap() -> u64 {
    DEFAULT_CAP
}
fn yes() -> bool {
    true
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            n_paths: default_paths(),
            steps: default_steps(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            basis: default_basis(),
            plan_cap: default_cap(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Write the solution (or reflected path) CSV.
    #[serde(default = "yes")]
    pub csv: bool,
    /// Write per-path measure-change weights (fbsde-via-bsde only).
    #[serde(default)]
    pub weights_csv: bool,
}

impl Default for Output {
    fn default() -> Self {
        Self { dir: None, csv: true, weights_csv: false }
    }
}

/// Base problem for the perturbed route, solved on the Lipschitz route first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbedConfig {
    pub base: String,
    #[serde(default)]
    pub base_params: BTreeMap<String, f64>,
    pub c_y: f64,
    pub c_z: f64,
    #[serde(default = "default_probes")]
    pub probes: usize,
}

fn default_probes() -> usize {
    200
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapName {
    Identity,
    OrnsteinUhlenbeck,
}

/// Domain `{x : <n_i, x> >= c_i}` with directions `v_i`, and the SDE map to reflect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectionConfig {
    #[serde(default = "default_map")]
    pub map: MapName,
    #[serde(default = "one")]
    pub kappa: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub normals: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
}

fn default_map() -> MapName {
    MapName::Identity
}
fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceConfig {
    #[serde(default = "one")]
    pub tolerance_scale: f64,
    #[serde(default = "one")]
    pub path_scale: f64,
    /// Subset of criteria; all twelve when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criteria: Option<Vec<u8>>,
}

impl Default for AcceptanceConfig {
    fn default() -> Self {
        Self { tolerance_scale: 1.0, path_scale: 1.0, criteria: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub route: RouteName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub output: Output,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed: Option<PerturbedConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<AcceptanceConfig>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = o.paths {
            self.numerics.n_paths = p;
        }
        if let Some(m) = o.steps {
            self.numerics.steps = m;
        }
        if let Some(d) = &o.out {
            self.output.dir = Some(d.clone());
        }
    }

    pub fn basis(&self) -> Result<FeatureBasis> {
        self.numerics.basis.parse().map_err(|e: qbsde_core::Error| CliError::Schema(format!("numerics.basis: {e}")))
    }

    pub fn solver(&self) -> Result<SolverConfig> {
        Ok(SolverConfig { basis: self.basis()?, tol: self.numerics.tol, max_iter: self.numerics.max_iter })
    }

    /// Effective configuration as TOML, for the reproducibility stanza.
    pub fn echo(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# not serializable: {e}\n"))
    }

    /// The catalog problem, for routes that take one.
    pub fn spec(&self) -> Result<ProblemSpec> {
        let name = self.problem.as_deref().ok_or_else(|| CliError::Schema(format!("route `{}` needs `problem`", self.route.as_str())))?;
        lookup_catalog(name, &self.params).map_err(|e| CliError::Schema(e.to_string()))
    }

    /// Checks that do not need the file text: value ranges, route-specific tables and the
    /// route against the problem's capabilities.
    pub fn validate(&self) -> Result<()> {
        let n = &self.numerics;
        if n.n_paths < 2 {
            return Err(CliError::Schema(format!("numerics.n_paths must be at least 2, got {}", n.n_paths)));
        }
        if n.steps == 0 {
            return Err(CliError::Schema("numerics.steps must be positive".into()));
        }
        if !(n.tol.is_finite() && n.tol > 0.0) {
            return Err(CliError::Schema(format!("numerics.tol must be positive, got {}", n.tol)));
        }
        if n.max_iter == 0 {
            return Err(CliError::Schema("numerics.max_iter must be positive".into()));
        }
        self.basis()?;
        let route = self.route.as_str();
        let table = |present: bool, name: &str, wanted: RouteName| -> Result<()> {
            match (present, self.route == wanted) {
                (true, false) => Err(CliError::Schema(format!("table `{name}` is only read by route `{}`", wanted.as_str()))),
                (false, true) => Err(CliError::Schema(format!("route `{route}` needs a `{name}` table"))),
                _ => Ok(()),
            }
        };
        table(self.perturbed.is_some(), "perturbed", RouteName::Perturbed)?;
        table(self.reflection.is_some(), "reflection", RouteName::ReflectedSde)?;
        if self.acceptance.is_some() && self.route != RouteName::Acceptance {
            return Err(CliError::Schema("table `acceptance` is only read by route `acceptance`".into()));
        }
        if !self.route.takes_problem() {
            if let Some(p) = &self.problem {
                return Err(CliError::Mismatch { route, problem: p.clone(), reason: "this route takes no problem".into() });
            }
            if !self.params.is_empty() {
                return Err(CliError::Schema(format!("route `{route}` takes no `params`")));
            }
            return match self.route {
                RouteName::ReflectedSde => self.reflection_setup().map(|_| ()),
                _ => self.acceptance_setup().map(|_| ()),
            };
        }
        let spec = self.spec()?;
        check_route(self.route, &spec)?;
        if let Some(p) = &self.perturbed {
            let base = lookup_catalog(&p.base, &p.base_params).map_err(|e| CliError::Schema(format!("perturbed.base: {e}")))?;
            check_route(RouteName::Lipschitz, &base)?;
            if (base.d, base.n, base.m) != (spec.d, spec.n, spec.m) || base.horizon != spec.horizon {
                return Err(CliError::Mismatch {
                    route,
                    problem: spec.name.clone(),
                    reason: format!("base `{}` differs in dimensions or horizon", base.name),
                });
            }
            if !(p.c_y >= 0.0 && p.c_z >= 0.0) || p.probes == 0 {
                return Err(CliError::Schema("perturbed: c_y and c_z must be nonnegative, probes positive".into()));
            }
        }
        Ok(())
    }

    fn reflection_setup(&self) -> Result<(SdeMap, ReflectionSpec, Vec<f64>, f64)> {
        let r = self.reflection.as_ref().ok_or_else(|| CliError::Schema("route `reflected-sde` needs a `reflection` table".into()))?;
        let dim = r.x0.len();
        let map = match r.map {
            MapName::Identity => SdeMap::identity(dim),
            MapName::OrnsteinUhlenbeck if dim == 1 => SdeMap::ornstein_uhlenbeck(r.kappa),
            MapName::OrnsteinUhlenbeck => {
                return Err(CliError::Schema(format!("reflection.map = \"ornstein-uhlenbeck\" is one-dimensional, x0 has {dim} entries")))
            }
        };
        if !(r.horizon.is_finite() && r.horizon > 0.0) {
            return Err(CliError::Schema(format!("reflection.horizon must be positive, got {}", r.horizon)));
        }
        let spec = ReflectionSpec::new(dim, r.normals.clone(), r.offsets.clone(), r.directions.clone())
            .map_err(|e| CliError::Schema(format!("reflection: {e}")))?;
        if !spec.contains(&r.x0, 0.0) {
            return Err(CliError::Schema("reflection.x0 lies outside the domain".into()));
        }
        Ok((map, spec, r.x0.clone(), r.horizon))
    }

    fn acceptance_setup(&self) -> Result<(Vec<u8>, SuiteConfig)> {
        let a = self.acceptance.clone().unwrap_or_default();
        let ids: Vec<u8> = a.criteria.unwrap_or_else(|| CRITERIA.iter().map(|(i, _)| *i).collect());
        if let Some(bad) = ids.iter().find(|i| !CRITERIA.iter().any(|(c, _)| c == *i)) {
            return Err(CliError::Schema(format!("acceptance.criteria: no criterion {bad}")));
        }
        if !(a.tolerance_scale > 0.0 && a.path_scale > 0.0) {
            return Err(CliError::Schema("acceptance: scales must be positive".into()));
        }
        Ok((ids, SuiteConfig { seed: self.seed, tolerance_scale: a.tolerance_scale, path_scale: a.path_scale }))
    }
}

fn check_route(route: RouteName, spec: &ProblemSpec) -> Result<()> {
    let mismatch = |reason: &str| Err(CliError::Mismatch { route: route.as_str(), problem: spec.name.clone(), reason: reason.into() });
    let quadratic = spec.diag_a.is_some();
    match route {
        RouteName::Diagonal if !quadratic => mismatch("the problem has no diagonal quadratic coefficients `a`"),
        RouteName::Diagonal => Ok(()),
        _ if quadratic => mismatch("the driver has a quadratic term; use route `diagonal`"),
        RouteName::Lipschitz | RouteName::Perturbed | RouteName::FbsdeViaBsde if spec.g.is_some() && !spec.constants.c_g.is_finite() => {
            mismatch("g has no finite Lipschitz constant; use route `superquadratic`")
        }
        RouteName::FbsdeViaBsde if !spec.markovian => mismatch("the construction needs a Markovian problem"),
        _ => Ok(()),
    }
}

/// Parses and validates a config file body.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
    let cfg = RunConfig::deserialize(table).map_err(|e| CliError::Schema(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    let mut cfg = parse_config(&text)?;
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

/// What a run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Files written, relative to the output directory, in writing order.
    pub files: Vec<String>,
    /// All verdicts passed (acceptance criteria, perturbation margin).
    pub passed: bool,
    pub summary: String,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|source| CliError::Io { path, source })?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// Executes the configured route and writes its artifacts into [`RunConfig::out_dir`]:
/// `certificate.txt` always, `solution.csv` for solver routes (when `output.csv`),
/// `contraction.csv` for fbsde-local, `weights.csv` for fbsde-via-bsde (when
/// `output.weights_csv`), `reflected.csv` for reflected-sde, `acceptance.txt` and
/// `acceptance.csv` for the acceptance route.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
    let mut out = Artifacts { dir, files: Vec::new() };
    let route = cfg.route.as_str();
    let solver_err = |source| CliError::Solver { route, source };

    let mut cert = format!("[run]\nroute = {route}\n");
    let mut passed = true;
    match cfg.route {
        RouteName::Acceptance => {
            let (ids, suite) = cfg.acceptance_setup()?;
            let report = run_criteria(&ids, &suite);
            out.write(ACCEPTANCE_TXT, &report.render_text())?;
            out.write(ACCEPTANCE_CSV, &report.to_csv())?;
            passed = report.passed();
            cert += "[acceptance]\n";
            for r in &report.results {
                cert += &r.line();
                cert.push('\n');
            }
        }
        RouteName::ReflectedSde => {
            let (map, spec, x0, horizon) = cfg.reflection_setup()?;
            let grid = TimeGrid::uniform(horizon, cfg.numerics.steps).map_err(solver_err)?;
            let driver = simulate_brownian(&grid, cfg.numerics.n_paths, map.n, cfg.seed).map_err(solver_err)?;
            let (paths, l) = reflected_sde(&map, &spec, &driver, &x0).map_err(solver_err)?;
            if cfg.output.csv {
                out.write(REFLECTED_CSV, &state_csv(&paths))?;
            }
            let flags = spec.probe_conditions(derive_seed(cfg.seed, 1), PROBE_COUNT);
            let violation = (0..paths.n_paths())
                .flat_map(|p| (0..=grid.steps()).map(move |i| (p, i)))
                .map(|(p, i)| (-spec.slack(paths.value(p, i))).max(0.0))
                .fold(0.0, f64::max);
            let mean_l = l.iter().sum::<f64>() / l.len() as f64;
            cert += "[reflection]\n";
            cert += &format!("paths = {}\nsteps = {}\n", paths.n_paths(), grid.steps());
            cert += &format!(
                "conditions: oblique-regular {}, projection {}, boundary-normal {}, interior {}\n",
                verdict(flags.oblique_regular),
                verdict(flags.projection),
                verdict(flags.boundary_normal),
                verdict(flags.interior)
            );
            cert += &format!("domain violation = {violation:.3e}\n");
            cert += &format!("mean regulator variation l_T = {mean_l:.6e}\n");
            cert += &format!("SDE map Lipschitz bound = {:.6e}\n", map.lipschitz_bound(horizon));
        }
        RouteName::FbsdeLocal => {
            let spec = cfg.spec()?;
            let noise = brownian(&spec, cfg, cfg.seed).map_err(solver_err)?;
            let prefix = Prefix::Shared(PathPrefix::constant(&spec.x0, 0));
            let sol = solve_local_fbsde(&spec, 0, &prefix, &noise, &cfg.solver()?).map_err(solver_err)?;
            let c = &spec.constants;
            if cfg.output.csv {
                out.write(SOLUTION_CSV, &sol.solution.to_csv(|x| rho_fb(x, c.k, c.c, c.c_g).sqrt()))?;
            }
            out.write(CONTRACTION_CSV, &sol.log_csv())?;
            cert += &problem_block(&spec);
            cert += &format!("[solution]\npaths = {}\nsteps = {}\ny0 = {:?}\n", noise.n_paths(), cfg.numerics.steps, sol.solution.y0());
            cert += "[contraction]\n";
            cert += &format!("C~(T) = {:.6e}\n", contraction_constant(&spec, spec.horizon));
            cert += &format!("iterations = {}\n", sol.iterations);
            let worst = sol.ratios().iter().cloned().fold(0.0, f64::max);
            cert += &format!("max gap ratio = {worst:.6e}\n");
            cert += &format!("final gap = {:.6e}\n", sol.contraction_log.last().copied().unwrap_or(0.0).sqrt());
            cert += &format!("k(0, x0) = {:?}\n", sol.k_u);
        }
        _ => {
            let spec = cfg.spec()?;
            let bundle = brownian(&spec, cfg, cfg.seed).map_err(solver_err)?;
            let sc = cfg.solver()?;
            let (sol, extra, ok) = solve_route(cfg, &spec, Arc::clone(&bundle), &sc, &mut out)?;
            passed = ok;
            cert += &problem_block(&spec);
            if let Some(sol) = &sol {
                if cfg.output.csv {
                    out.write(SOLUTION_CSV, &sol.to_csv())?;
                }
                cert += "[solution]\n";
                cert += &sol.certificate_text();
            }
            cert += &extra;
        }
    }
    cert += "[reproducibility]\n";
    cert += &format!("seed = {}\n", cfg.seed);
    cert += &format!("version = {} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    cert += "config:\n";
    for line in cfg.echo().lines() {
        cert += &format!("  {line}\n");
    }
    out.write(CERTIFICATE, &cert)?;
    let summary = format!(
        "{route}: {} ({})",
        if passed { "ok" } else { "verdict failed" },
        out.files.iter().map(|f| out.dir.join(f).display().to_string()).collect::<Vec<_>>().join(", ")
    );
    Ok(RunReport { files: out.files, passed, summary })
}

type RouteOutcome = (Option<GlobalSolution>, String, bool);

fn solve_route(cfg: &RunConfig, spec: &ProblemSpec, bundle: Arc<PathBundle>, sc: &SolverConfig, out: &mut Artifacts) -> Result<RouteOutcome> {
    let route = cfg.route.as_str();
    let e = |source| CliError::Solver { route, source };
    let lipschitz = |spec: &ProblemSpec, bundle: Arc<PathBundle>| -> Result<GlobalSolution> {
        let plan = plan_for(spec, PlanRoute::Lipschitz, cfg.numerics.plan_cap).map_err(e)?;
        solve_global_lipschitz_g(spec, bundle, &plan, sc).map_err(e)
    };
    Ok(match cfg.route {
        RouteName::Lipschitz => (Some(lipschitz(spec, bundle)?), String::new(), true),
        RouteName::Superquadratic => (Some(solve_global_superquadratic(spec, bundle, sc).map_err(e)?), String::new(), true),
        RouteName::Diagonal => (Some(solve_diagonal_quadratic(spec, bundle, sc).map_err(e)?), String::new(), true),
        RouteName::Perturbed => {
            let p = cfg.perturbed.as_ref().expect("validated");
            let base_spec = lookup_catalog(&p.base, &p.base_params).map_err(e)?;
            let base = lipschitz(&base_spec, bundle)?;
            let extra = format!("[base]\nproblem = {}\ny0 = {:?}\n", base_spec.name, base.solution.y0());
            match solve_perturbed(spec, &base_spec, &base, p.c_y, p.c_z, p.probes, derive_seed(cfg.seed, 2), sc).map_err(e)? {
                PerturbedOutcome::Solved(s) => (Some(*s), extra, true),
                PerturbedOutcome::Rejected(m) => {
                    let text = format!(
                        "{extra}[margin]\nrejected: deviation = {:.6e} exceeds threshold = {:.6e} (beta = {:.6e})\n",
                        m.deviation, m.threshold, m.beta
                    );
                    (None, text, false)
                }
            }
        }
        RouteName::FbsdeViaBsde => {
            let sol = lipschitz(spec, bundle)?;
            let fresh = Arc::new(
                simulate_brownian(&sol.solution.grid, cfg.numerics.n_paths, spec.n, derive_seed(cfg.seed, 1)).map_err(e)?,
            );
            let cand = fbsde_via_bsde(spec, &sol, Arc::clone(&fresh)).map_err(e)?;
            let res = fbsde_residual(&cand, spec).map_err(e)?;
            let w = stochastic_exponential(&cand.drift_integrand(spec), &fresh).map_err(e)?;
            let (mean, se) = w.mean_and_se();
            if cfg.output.weights_csv {
                out.write(WEIGHTS_CSV, &w.to_csv())?;
            }
            let mut extra = String::from("[residuals]\n");
            extra += &res.render();
            extra += "[measure change]\n";
            extra += &format!("mean weight = {mean:.6e} (standard error {se:.3e})\n");
            extra += &format!("max |theta| = {:.6e}\n", w.theta_bound);
            (Some(sol), extra, true)
        }
        _ => unreachable!("non-solver route"),
    })
}

fn brownian(spec: &ProblemSpec, cfg: &RunConfig, seed: u64) -> qbsde_core::Result<Arc<PathBundle>> {
    let grid = TimeGrid::uniform(spec.horizon, cfg.numerics.steps)?;
    Ok(Arc::new(simulate_brownian(&grid, cfg.numerics.n_paths, spec.n, seed)?))
}

fn problem_block(spec: &ProblemSpec) -> String {
    format!("problem = {}\n[problem]\n{}\n", spec.name, describe(spec))
}

fn verdict(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "FAIL"
    }
}

/// `t, X_k means, X_k stddevs` per node.
fn state_csv(b: &PathBundle) -> String {
    let m = b.dim();
    let mut s = String::from("t");
    for k in 1..=m {
        s += &format!(",X{k}_mean");
    }
    for k in 1..=m {
        s += &format!(",X{k}_std");
    }
    s.push('\n');
    let n = b.n_paths() as f64;
    for i in 0..=b.grid().steps() {
        let mean: Vec<f64> = (0..m).map(|k| (0..b.n_paths()).map(|p| b.value(p, i)[k]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..m)
            .map(|k| ((0..b.n_paths()).map(|p| (b.value(p, i)[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
            .collect();
        s += &format!("{:.10}", b.grid().t(i));
        for v in mean.iter().chain(&std) {
            s += &format!(",{v:.10e}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config("problem = \"zero\"\nroute = \"lipschitz\"\nseed = 1\n").unwrap();
        assert_eq!(c.numerics.n_paths, 100_000);
        assert_eq!(c.numerics.steps, 50);
        assert_eq!(c.numerics.tol, 1e-6);
        assert_eq!(c.out_dir(), PathBuf::from("out"));
    }

    #[test]
    fn echo_parses_back() {
        let c = parse_config("problem = \"quad-1d\"\nroute = \"diagonal\"\nseed = 7\n[params]\na = 0.5\n").unwrap();
        assert_eq!(parse_config(&c.echo()).unwrap(), c);
    }
}
