use bezierformer::bezier::{bernstein, evaluate, uniform_ts, ControlPolygon, CurveSamples};
use bezierformer::loss::chamfer_iou_directed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn random_cubic(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> ControlPolygon {
    let pts: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| rng.random_range(lo..hi)).collect()).collect();
    ControlPolygon::new(&pts).expect("four points of one dimension")
}

fn brute_ciou(a: &CurveSamples, b: &CurveSamples, e: f64) -> f64 {
    let mut total = 0.0;
    for p in a.points() {
        let mut best = f64::INFINITY;
        for q in b.points() {
            best = best.min(p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
        total += (2.0 * e - best) / (2.0 * e + best);
    }
    total / a.len() as f64
}

const CHAMFER_TOL: f64 = 1e-9;

pub fn chamfer_oracle() -> anyhow::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ts = uniform_ts(200);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for dim in [2, 3] {
        for _ in 0..100 {
            let a = evaluate(&random_cubic(&mut rng, dim, -50.0, 50.0), &ts)?;
            let b = evaluate(&random_cubic(&mut rng, dim, -50.0, 50.0), &ts)?;
            let e = rng.random_range(1.0..20.0);
            for (x, y) in [(&a, &b), (&b, &a)] {
                worst = worst.max((chamfer_iou_directed(x, y, e)? - brute_ciou(x, y, e)).abs());
            }
            pairs += 1;
        }
    }

    let seg = |y: f64| {
        ControlPolygon::new(&[vec![0.0, y], vec![10.0 / 3.0, y], vec![20.0 / 3.0, y], vec![10.0, y]])
            .expect("valid segment")
    };
    let base = evaluate(&seg(0.0), &ts)?;
    let mut analytic = Vec::new();
    for (offset, expect) in [(0.0, 1.0), (10.0, 1.0 / 3.0), (20.0, 0.0)] {
        let got = chamfer_iou_directed(&base, &evaluate(&seg(offset), &ts)?, 10.0)?;
        analytic.push((got - expect).abs());
    }
    let worst_analytic = analytic.iter().copied().fold(0.0, f64::max);

    let passed = worst <= CHAMFER_TOL && worst_analytic <= CHAMFER_TOL;
    Ok(Outcome::new(
        passed,
        format!(
            "{pairs} random pairs (2D and 3D, 200 samples), worst |lib - brute| {worst:.2e}; analytic 1, 1/3, 0 off by at most {worst_analytic:.2e} (tol {CHAMFER_TOL:.0e})"
        ),
    ))
}

/// Point at `t` by repeated linear interpolation.
fn de_casteljau(cp: &ControlPolygon, t: f64) -> Vec<f64> {
    let mut pts = cp.to_vecs();
    while pts.len() > 1 {
        pts = pts
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (1.0 - t) * a + t * b).collect())
            .collect();
    }
    pts.pop().expect("one point left")
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bezier_identities() -> anyhow::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ts: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();

    let mut partition: f64 = 0.0;
    for &t in &ts {
        let sum: f64 = (0..=3).map(|n| bernstein(n, 3, t)).sum::<bezierformer::Result<f64>>()?;
        partition = partition.max((sum - 1.0).abs());
    }

    // control points in the unit box, so tolerances are absolute
    let (mut endpoints_exact, mut casteljau, mut affine, mut reversal) = (true, 0.0f64, 0.0f64, 0.0f64);
    let grid = uniform_ts(101);
    for trial in 0..200 {
        let dim = 2 + trial % 2;
        let cp = random_cubic(&mut rng, dim, 0.0, 1.0);
        let ends = evaluate(&cp, &[0.0, 1.0])?;
        endpoints_exact &= ends.point(0) == cp.point(0) && ends.point(1) == cp.point(3);

        let samples = evaluate(&cp, &grid)?;
        for (i, &t) in grid.iter().enumerate() {
            casteljau = casteljau.max(max_diff(samples.point(i), &de_casteljau(&cp, t)));
        }

        let a: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let apply = |p: &[f64]| -> Vec<f64> {
            (0..dim).map(|r| (0..dim).map(|c| a[r * dim + c] * p[c]).sum::<f64>() + b[r]).collect()
        };
        let moved = evaluate(&cp.map_points(apply)?, &grid)?;
        for i in 0..grid.len() {
            affine = affine.max(max_diff(moved.point(i), &apply(samples.point(i))));
        }

        let rev = evaluate(&cp.reversed(), &grid)?;
        for (i, &t) in grid.iter().enumerate() {
            reversal = reversal.max(max_diff(rev.point(i), evaluate(&cp, &[1.0 - t])?.point(0)));
        }
    }

    let passed = partition <= 1e-12 && endpoints_exact && casteljau <= 1e-12 && affine <= 1e-9 && reversal <= 1e-12;
    Ok(Outcome::new(
        passed,
        format!(
            "partition {partition:.1e} (tol 1e-12), endpoints exact: {endpoints_exact}, de Casteljau {casteljau:.1e} (tol 1e-12), affine {affine:.1e} (tol 1e-9), reversal {reversal:.1e} (tol 1e-12); 200 unit-box cubics"
        ),
    ))
}
