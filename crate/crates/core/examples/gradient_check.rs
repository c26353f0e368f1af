//! Runs the full gradient-check suite (primitive ops, attention stages,
//! prompt blocks and the end-to-end enhancer) and prints the worst relative
//! error per case.
//!
//! `cargo run --release --example gradient_check`

use std::time::Instant;

use cpa_enhancer::gradcheck::GradCheckOptions;
use cpa_enhancer::suite::{run, standard_suite};

fn main() -> cpa_enhancer::Result<()> {
    let start = Instant::now();
    let cases = standard_suite(0, true)?;
    let report = run(&cases, &GradCheckOptions::default())?;
    for r in &report.reports {
        println!("{:<20} {:>10.3e}  {}", r.op, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
    }
    println!(
        "{} cases, worst {:.3e}, {} in {:.1}s",
        report.reports.len(),
        report.max_rel_error,
        if report.passed { "all passed" } else { "FAILED" },
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
