use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context};
use bezierformer::gradsuite::{run_gradient_suite, MODEL_TOLERANCE, OP_TOLERANCE};

use crate::Outcome;

/// Every differentiable operation must appear in the suite under one of these
/// name prefixes.
const REQUIRED: &[&str] = &[
    "bernstein",
    "evaluate",
    "curve_length",
    "project",
    "bilinear_sample",
    "positional_encoding_self_attention",
    "bezier_curve_attention",
    "chamfer_iou_directed",
    "location_loss",
    "shape_constraints",
    "focal_loss",
    "end_to_end",
];

const BUDGET_SECONDS: f64 = 120.0;

pub fn gradient_suite() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let cases = run_gradient_suite(0)?;
    let library_seconds = start.elapsed().as_secs_f64();

    let mut problems = Vec::new();
    for prefix in REQUIRED {
        if !cases.iter().any(|c| c.name.starts_with(prefix)) {
            problems.push(format!("{prefix} not covered"));
        }
    }
    let mut worst_op: f64 = 0.0;
    let mut worst_model: f64 = 0.0;
    for c in &cases {
        let expected = if c.name.starts_with("end_to_end") { MODEL_TOLERANCE } else { OP_TOLERANCE };
        ensure!(c.tolerance == expected, "{} checked at {} instead of {expected}", c.name, c.tolerance);
        if c.name.starts_with("end_to_end") {
            worst_model = worst_model.max(c.max_rel_error);
        } else {
            worst_op = worst_op.max(c.max_rel_error);
        }
        if !c.passed() {
            problems.push(format!("{} rel error {:.2e}", c.name, c.max_rel_error));
        }
    }
    ensure!(OP_TOLERANCE == 1e-4 && MODEL_TOLERANCE == 1e-3, "tolerances drifted");
    if library_seconds >= BUDGET_SECONDS {
        problems.push(format!("library run took {library_seconds:.1}s"));
    }

    // the same suite through the command-line tool
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_bzf"))
        .args(["gradcheck", "--seed", "0"])
        .output()
        .context("running bzf gradcheck")?;
    let cli_seconds = start.elapsed().as_secs_f64();
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).context("gradcheck output is not JSON")?;
    if !out.status.success() || report["passed"] != serde_json::Value::Bool(true) {
        problems.push(format!("bzf gradcheck failed (status {:?})", out.status.code()));
    }
    if cli_seconds >= BUDGET_SECONDS {
        problems.push(format!("bzf gradcheck took {cli_seconds:.1}s"));
    }

    let detail = format!(
        "{} cases, worst op {worst_op:.2e} (tol {OP_TOLERANCE:.0e}), worst end-to-end {worst_model:.2e} (tol {MODEL_TOLERANCE:.0e}), {library_seconds:.1}s library, {cli_seconds:.1}s cli{}",
        cases.len(),
        if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
    );
    Ok(Outcome::new(problems.is_empty(), detail))
}
