use std::fs;
use std::path::Path;
use std::process::Command;

use qbsde_cli::{parse_config, run, CliError, RouteName};
use tempfile::TempDir;

fn qbsde(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qbsde")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn with_out(body: &str, out: &Path) -> String {
    format!("{body}\n[output]\ndir = {:?}\n", out.display().to_string())
}

#[test]
fn minimal_config_gets_defaults() {
    let c = parse_config("problem = \"zero\"\nroute = \"lipschitz\"\nseed = 1\n").unwrap();
    assert_eq!(c.route, RouteName::Lipschitz);
    assert_eq!((c.numerics.n_paths, c.numerics.steps, c.numerics.tol), (100_000, 50, 1e-6));
    assert_eq!(c.numerics.basis, "binned:32");
}

#[test]
fn unknown_keys_are_named() {
    let e = parse_config("problem = \"zero\"\nroute = \"lipschitz\"\nseed = 1\npathz = 10\n").unwrap_err();
    assert!(matches!(e, CliError::Schema(_)));
    assert!(e.to_string().contains("pathz"), "{e}");
    let e = parse_config("problem = \"zero\"\nroute = \"lipschitz\"\nseed = 1\n[numerics]\npathz = 10\n").unwrap_err();
    assert!(e.to_string().contains("pathz"), "{e}");
    let e = parse_config("problem = \"zero\"\nroute = \"lipschitz\"\nseed = 1\n[params]\nampp = 1.0\n").unwrap_err();
    assert!(e.to_string().contains("ampp"), "{e}");
}

#[test]
fn seed_is_mandatory() {
    let e = parse_config("problem = \"zero\"\nroute = \"lipschitz\"\n").unwrap_err();
    assert!(e.to_string().contains("seed"), "{e}");
}

#[test]
fn syntax_errors_carry_a_position() {
    let e = parse_config("seed = 1\nroute = = \"lipschitz\"\n").unwrap_err();
    assert!(matches!(e, CliError::Parse(_)));
    assert!(e.to_string().contains("line 2"), "{e}");
}

#[test]
fn route_problem_mismatches() {
    let e = parse_config("problem = \"zero\"\nroute = \"diagonal\"\nseed = 1\n").unwrap_err();
    assert!(matches!(e, CliError::Mismatch { .. }), "{e}");
    let e = parse_config("problem = \"quad-1d\"\nroute = \"lipschitz\"\nseed = 1\n").unwrap_err();
    assert!(matches!(e, CliError::Mismatch { .. }), "{e}");
    let e = parse_config("problem = \"superquadratic\"\nroute = \"lipschitz\"\nseed = 1\n").unwrap_err();
    assert!(matches!(e, CliError::Mismatch { .. }), "{e}");
    let e = parse_config("problem = \"running-max\"\nroute = \"fbsde-via-bsde\"\nseed = 1\n").unwrap_err();
    assert!(matches!(e, CliError::Mismatch { .. }), "{e}");
    let e = parse_config("problem = \"zero\"\nroute = \"acceptance\"\nseed = 1\n").unwrap_err();
    assert!(matches!(e, CliError::Mismatch { .. }), "{e}");
    assert!(parse_config("problem = \"zero\"\nroute = \"perturbed\"\nseed = 1\n").is_err());
    assert!(parse_config("problem = \"zero\"\nroute = \"lipschitz\"\nseed = 1\n[numerics]\nbasis = \"spline:3\"\n").is_err());
}

#[test]
fn zero_problem_gives_zeros_and_a_passing_certificate() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &with_out("problem = \"zero\"\nroute = \"lipschitz\"\nseed = 1", &out));
    let o = qbsde(&["--config", &cfg, "--paths", "500", "--steps", "10", "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let csv = fs::read_to_string(out.join("solution.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,Y1_mean,Y1_std,Z_abs_mean,Z_abs_max,sqrt_rho_bound");
    let mut rows = 0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        for v in &cols[1..5] {
            assert!(v.is_empty() || v.parse::<f64>().unwrap() == 0.0, "{line}");
        }
        rows += 1;
    }
    assert_eq!(rows, 11);
    let cert = fs::read_to_string(out.join("certificate.txt")).unwrap();
    assert!(!cert.contains("FAIL"), "{cert}");
    assert!(cert.contains("[plan]") && cert.contains("[z bound]") && cert.contains("[reproducibility]"));
    assert!(cert.contains("seed = 1\n"));
    assert!(cert.contains("n_paths = 500"), "flags are echoed: {cert}");
}

#[test]
fn flags_override_the_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "problem = \"zero\"\nroute = \"lipschitz\"\nseed = 1\n");
    let out = tmp.path().join("elsewhere");
    let o = qbsde(&["--config", &cfg, "--seed", "99", "--paths", "400", "--steps", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cert = fs::read_to_string(out.join("certificate.txt")).unwrap();
    assert!(cert.contains("seed = 99\n") && cert.contains("steps = 4\n"), "{cert}");
}

#[test]
fn bad_configs_exit_nonzero_and_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "problem = \"zero\"\nroute = \"lipschitz\"\nseed = 1\n[numerics]\npathz = 3\n");
    let o = qbsde(&["--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("pathz"));
    let o = qbsde(&["--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert!(!o.status.success());
    let o = qbsde(&[]);
    assert!(!o.status.success(), "--config is required");
}

#[test]
fn runs_stay_inside_the_output_directory() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("a").join("b");
    let cfg = write_config(
        tmp.path(),
        &with_out("problem = \"linear-drift\"\nroute = \"fbsde-via-bsde\"\nseed = 3\n[numerics]\nn_paths = 400\nsteps = 8", &out)
            .replace("[output]\n", "[output]\nweights_csv = true\n"),
    );
    let o = qbsde(&["--config", &cfg, "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut top: Vec<String> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["a", "run.toml"]);
    let mut files: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, ["certificate.txt", "solution.csv", "weights.csv"]);
}

#[test]
fn fbsde_via_bsde_reports_residuals() {
    let tmp = TempDir::new().unwrap();
    let body = "problem = \"linear-drift\"\nroute = \"fbsde-via-bsde\"\nseed = 5\n[params]\nc = 0.3\n[numerics]\nn_paths = 2000\nsteps = 10\nbasis = \"polynomial:1\"";
    let cfg = parse_config(&with_out(body, tmp.path())).unwrap();
    let r = run(&cfg).unwrap();
    assert!(r.passed);
    let cert = fs::read_to_string(tmp.path().join("certificate.txt")).unwrap();
    for needle in ["[residuals]", "terminal residual", "backward residual", "forward residual", "mean weight"] {
        assert!(cert.contains(needle), "{needle} missing from\n{cert}");
    }
}

#[test]
fn outputs_are_identical_across_runs_and_worker_counts() {
    let body = "problem = \"sine-terminal\"\nroute = \"lipschitz\"\nseed = 11\n[numerics]\nn_paths = 3000\nsteps = 10";
    let render = |threads: usize| {
        let tmp = TempDir::new().unwrap();
        let mut cfg = parse_config(body).unwrap();
        cfg.output.dir = Some(tmp.path().join("o"));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run(&cfg)).unwrap();
        let csv = fs::read(tmp.path().join("o/solution.csv")).unwrap();
        let cert = fs::read_to_string(tmp.path().join("o/certificate.txt")).unwrap();
        // the echoed directory is the only thing allowed to differ
        let cert: String = cert.lines().filter(|l| !l.contains("dir = ")).collect::<Vec<_>>().join("\n");
        (csv, cert)
    };
    let a = render(1);
    assert_eq!(a, render(1));
    assert_eq!(a, render(4));
}

#[test]
fn diagonal_route_reports_the_envelope() {
    let tmp = TempDir::new().unwrap();
    let body = "problem = \"quad-1d\"\nroute = \"diagonal\"\nseed = 2\n[params]\na = 0.5\n[numerics]\nn_paths = 2000\nsteps = 10";
    let r = run(&parse_config(&with_out(body, tmp.path())).unwrap()).unwrap();
    assert!(r.passed);
    let cert = fs::read_to_string(tmp.path().join("certificate.txt")).unwrap();
    assert!(cert.contains("[envelope]") && cert.contains("route = diagonal"), "{cert}");
}

#[test]
fn perturbed_route_solves_or_rejects() {
    let tmp = TempDir::new().unwrap();
    let near = "problem = \"lipschitz-mix\"\nroute = \"perturbed\"\nseed = 4\n[params]\nphase = 0.001\n[numerics]\nn_paths = 1000\nsteps = 10\n[perturbed]\nbase = \"lipschitz-mix\"\nc_y = 0.1\nc_z = 0.1";
    let r = run(&parse_config(&with_out(near, &tmp.path().join("near"))).unwrap()).unwrap();
    assert!(r.passed);
    assert!(fs::read_to_string(tmp.path().join("near/certificate.txt")).unwrap().contains("[margin]"));
    let far = near.replace("phase = 0.001", "phase = 1.5");
    let r = run(&parse_config(&with_out(&far, &tmp.path().join("far"))).unwrap()).unwrap();
    assert!(!r.passed);
    assert!(fs::read_to_string(tmp.path().join("far/certificate.txt")).unwrap().contains("rejected"));
    assert!(!tmp.path().join("far/solution.csv").exists());
}

#[test]
fn local_fbsde_writes_the_contraction_log() {
    let tmp = TempDir::new().unwrap();
    let body = "problem = \"coupled-affine\"\nroute = \"fbsde-local\"\nseed = 8\n[params]\nhorizon = 0.125\n[numerics]\nn_paths = 2000\nsteps = 10\nbasis = \"polynomial:1\"\nmax_iter = 20";
    run(&parse_config(&with_out(body, tmp.path())).unwrap()).unwrap();
    let log = fs::read_to_string(tmp.path().join("contraction.csv")).unwrap();
    assert!(log.starts_with("iteration,triple_gap_sq,ratio\n"));
    assert!(log.lines().count() >= 3);
    assert!(tmp.path().join("solution.csv").exists());
}

#[test]
fn reflected_sde_stays_in_the_domain() {
    let tmp = TempDir::new().unwrap();
    let body = "route = \"reflected-sde\"\nseed = 6\n[numerics]\nn_paths = 500\nsteps = 100\n[reflection]\nx0 = [0.5]\nnormals = [[1.0], [-1.0]]\noffsets = [0.0, -1.0]\ndirections = [[1.0], [-1.0]]";
    run(&parse_config(&with_out(body, tmp.path())).unwrap()).unwrap();
    let csv = fs::read_to_string(tmp.path().join("reflected.csv")).unwrap();
    assert!(csv.starts_with("t,X1_mean,X1_std\n"));
    assert_eq!(csv.lines().count(), 102);
    let cert = fs::read_to_string(tmp.path().join("certificate.txt")).unwrap();
    assert!(cert.contains("domain violation = 0.000e0"), "{cert}");
    assert!(!cert.contains("FAIL"), "{cert}");
    let outside = body.replace("x0 = [0.5]", "x0 = [1.5]");
    assert!(parse_config(&outside).is_err());
}

#[test]
fn acceptance_route_writes_the_report() {
    let tmp = TempDir::new().unwrap();
    let body = "route = \"acceptance\"\nseed = 2024\n[acceptance]\ncriteria = [1, 2]";
    let r = run(&parse_config(&with_out(body, tmp.path())).unwrap()).unwrap();
    assert!(r.passed);
    let text = fs::read_to_string(tmp.path().join("acceptance.txt")).unwrap();
    assert!(text.contains("2/2 criteria passed"), "{text}");
    let csv = fs::read_to_string(tmp.path().join("acceptance.csv")).unwrap();
    assert!(csv.starts_with("criterion,name,check,measured,tolerance,status\n"));
    let tight = body.replace("criteria = [1, 2]", "criteria = [1]\ntolerance_scale = 1e-9");
    let r = run(&parse_config(&with_out(&tight, &tmp.path().join("t"))).unwrap()).unwrap();
    assert!(!r.passed);
    assert!(parse_config(&body.replace("[1, 2]", "[13]")).is_err());
}
