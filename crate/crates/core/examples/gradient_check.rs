//! Finite-difference check of every differentiable operation in f64.
//!
//! cargo run --release --example gradient_check

use luna::gradsuite::{run_suite, SUITE_TOL};

fn main() -> luna::Result<()> {
    let entries = run_suite(1.0)?;
    for e in &entries {
        println!(
            "{:<34} {:>5} partials  max rel error {:.2e}  {}",
            e.name,
            e.report.checked,
            e.report.max_rel_error,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    println!("{failed} failures at tolerance {SUITE_TOL:e}");
    Ok(())
}
