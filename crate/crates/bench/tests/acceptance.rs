//! The acceptance suite as a test target: one PASS/FAIL line per criterion, then the
//! checks behind it. Arguments that do not start with `-` filter by criterion name, as in
//! `cargo test --test acceptance -- reflection 11`.

use std::process::ExitCode;

use qbsde_bench::{run_criterion, SuiteConfig, CRITERIA};

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<(u8, &str)> = CRITERIA
        .iter()
        .copied()
        .filter(|(id, name)| {
            let label = format!("criterion_{id:02}_{name}");
            filters.is_empty()
                || filters.iter().any(|f| match f.parse::<u8>() {
                    Ok(n) => n == *id,
                    Err(_) => label.contains(f.as_str()),
                })
        })
        .collect();
    let cfg = SuiteConfig::default();
    println!("running {} acceptance criteria (seed {})", selected.len(), cfg.seed);
    let mut failed = 0;
    for (id, _) in &selected {
        let r = run_criterion(*id, &cfg);
        println!("{}", r.line());
        for c in &r.checks {
            println!(
                "    {} {:<52} measured = {:.6e}  tolerance = {:.6e}",
                if c.pass { "ok  " } else { "FAIL" },
                c.label,
                c.measured,
                c.tolerance
            );
        }
        failed += (!r.pass()) as usize;
    }
    println!("\nacceptance: {} passed, {failed} failed", selected.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
