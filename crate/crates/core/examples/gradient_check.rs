//! Finite-difference check of every operator, loss and per-variant
//! composite objective.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use biqt::gradsuite::run_gradient_suite;

fn main() -> biqt::Result<()> {
    let report = run_gradient_suite(0)?;
    for e in &report.entries {
        println!(
            "{:<40} {}  max rel err {:.2e} (tol {:.0e})",
            e.name,
            if e.passed() { "ok  " } else { "FAIL" },
            e.report.max_error(),
            e.report.tol
        );
    }
    println!("all passed: {}", report.passed());
    Ok(())
}
