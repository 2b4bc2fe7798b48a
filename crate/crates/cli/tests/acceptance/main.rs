//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Arguments that do not start with `-` filter criteria by substring, so
//! `cargo test --test acceptance -- bezier` runs only the Bézier checks.

mod assign;
mod attention;
mod fitting;
mod geometry;
mod gradients;
mod training;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// Result of one criterion: pass or fail plus a one-line summary of the
/// measured numbers.
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

type Criterion = (&'static str, fn() -> anyhow::Result<Outcome>);

const CRITERIA: &[Criterion] = &[
    ("gradient suite", gradients::gradient_suite),
    ("chamfer oracle", geometry::chamfer_oracle),
    ("bezier identities", geometry::bezier_identities),
    ("attention invariants", attention::attention_invariants),
    ("simota", assign::simota),
    ("fit convergence", fitting::fit_convergence),
    ("toy 2d training", training::toy_2d),
    ("toy 3d training", training::toy_3d),
    ("loss composition", training::loss_composition),
    ("loss ordering", fitting::loss_ordering),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())))
        .collect();
    let mut failures = 0;
    for (name, run) in &selected {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome::new(false, format!("error: {e:#}")),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            }
        };
        if !outcome.passed {
            failures += 1;
        }
        println!(
            "{} {name} ({:.1}s): {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    println!("acceptance: {} passed, {failures} failed", selected.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
