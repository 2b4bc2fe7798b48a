use std::time::Instant;

use bezierformer::bezier::{evaluate, uniform_ts, ControlPolygon};
use bezierformer::eval::symmetric_chamfer_distance;
use bezierformer::fit::{fit_curve, fit_curve_with, FitConfig, FitInit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const SEEDS: u64 = 20;

struct Problem {
    samples: Vec<Vec<f64>>,
    dense_truth: Vec<f64>,
    diag: f64,
}

/// 50 noiseless samples of a random planar cubic.
fn problem(seed: u64) -> anyhow::Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cps: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
    let truth = ControlPolygon::new(&cps)?;
    let samples: Vec<Vec<f64>> = evaluate(&truth, &uniform_ts(50))?.points().map(|p| p.to_vec()).collect();
    let extent = |d: usize| {
        let v = samples.iter().map(|p| p[d]);
        v.clone().fold(f64::NEG_INFINITY, f64::max) - v.fold(f64::INFINITY, f64::min)
    };
    Ok(Problem {
        dense_truth: evaluate(&truth, &uniform_ts(1000))?.flat().to_vec(),
        diag: extent(0).hypot(extent(1)),
        samples,
    })
}

/// Symmetric Chamfer distance to the true curve, as a fraction of the
/// sample bounding-box diagonal.
fn relative_error(p: &Problem, cp: &ControlPolygon) -> anyhow::Result<f64> {
    let dense = evaluate(cp, &uniform_ts(1000))?;
    Ok(symmetric_chamfer_distance(dense.flat(), &p.dense_truth, 2) / p.diag)
}

pub fn fit_convergence() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let cfg = FitConfig::default();
    let mut worst: f64 = 0.0;
    let mut misses = 0;
    for seed in 0..SEEDS {
        let p = problem(seed)?;
        let err = relative_error(&p, &fit_curve(&p.samples, &cfg)?.control_points)?;
        worst = worst.max(err);
        if err > 1e-3 {
            misses += 1;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(Outcome::new(
        misses == 0 && seconds < 30.0 && cfg.iters == 2000,
        format!(
            "{SEEDS} seeds, {} iterations: worst Chamfer {worst:.2e} x diagonal (tol 1e-3), {misses} above; {seconds:.1}s (budget 30s)",
            cfg.iters
        ),
    ))
}

/// Wins of the curve loss over pointwise sample matching, out of `SEEDS`.
fn ordering_wins(init: FitInit) -> anyhow::Result<(usize, f64, f64)> {
    let cfg = FitConfig {
        init,
        ..FitConfig::default()
    };
    let (mut wins, mut ours, mut theirs) = (0, 0.0, 0.0);
    for seed in 0..SEEDS {
        let p = problem(seed)?;
        let curve = fit_curve(&p.samples, &cfg)?;
        let matched = fit_curve_with(&p.samples, &cfg, |g, pred, target| {
            let gt = g.constant(target.gt.samples.clone())?;
            let d = g.sub(pred, gt)?;
            let n = g.row_norm(d)?;
            let s = g.sum(n)?;
            g.scale(s, 1.0 / (target.loss.n_dis as f64 * target.loss.e))
        })?;
        let (a, b) = (relative_error(&p, &curve.control_points)?, relative_error(&p, &matched.control_points)?);
        if a < b {
            wins += 1;
        }
        ours += a / SEEDS as f64;
        theirs += b / SEEDS as f64;
    }
    Ok((wins, ours, theirs))
}

pub fn loss_ordering() -> anyhow::Result<Outcome> {
    let (wins, ours, theirs) = ordering_wins(FitInit::LeastSquares)?;
    let (chord_wins, chord_ours, chord_theirs) = ordering_wins(FitInit::Chord)?;
    Ok(Outcome::new(
        wins >= 15,
        format!(
            "curve loss beats order-matched sampling on {wins}/{SEEDS} seeds (need 15), mean Chamfer {ours:.2e} vs {theirs:.2e} x diagonal; from a chord start (information only) {chord_wins}/{SEEDS}, {chord_ours:.2e} vs {chord_theirs:.2e}"
        ),
    ))
}
